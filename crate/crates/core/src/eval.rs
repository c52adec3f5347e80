//! Held-out evaluation: replay each user's training history through a
//! decode session under the chosen cache policy, then score the held-out
//! tail one position at a time (teacher-forced), pooling predictions into
//! AUC / GAUC / logloss.

use alloc::vec::Vec;

use crate::backbone::{
    embed_sequence, predict_ctr, DecodeSession, ModelConfig, Parameters,
};
use crate::data::{Dataset, TemporalSplit};
use crate::error::{Error, Result};
use crate::metrics::{auc, gauc, logloss, UserScores};
use crate::numerics::{MacMeter, Matrix};
use crate::policy::{BlockPolicy, CachePolicyConfig, PrefillStrategy};

/// Pooled ranking/calibration metrics over the held-out impressions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub gauc: f64,
    pub logloss: f64,
    /// Held-out impressions actually scored.
    pub impressions: usize,
    /// Users contributing at least one held-out impression.
    pub users_scored: usize,
}

/// Scores every held-out impression of `split` with `params` under
/// `policy`. For each user the training prefix is prefilled once, then each
/// held-out position is predicted from the hidden state preceding it before
/// the true interaction is fed back in.
pub fn evaluate(
    dataset: &Dataset,
    split: &TemporalSplit,
    params: &Parameters,
    model: &ModelConfig,
    policy: &CachePolicyConfig,
    policy_seed: u64,
    meter: &mut MacMeter,
) -> Result<EvalReport> {
    model.validate()?;
    if split.train_len.len() != dataset.sequences.len() {
        return Err(Error::Config(alloc::format!(
            "split covers {} sequences, dataset has {}",
            split.train_len.len(),
            dataset.sequences.len()
        )));
    }
    // Frozen per-block policy weights are drawn once and cloned per user.
    let template: Vec<BlockPolicy> = (0..model.n_blocks)
        .map(|b| BlockPolicy::new(policy.clone(), model, policy_seed, b))
        .collect::<Result<_>>()?;

    let mut per_user = Vec::new();
    let mut all_labels = Vec::new();
    let mut all_scores = Vec::new();
    for (s, seq) in dataset.sequences.iter().enumerate() {
        let train_len = split.train_len[s];
        let test_len = split.test_len[s];
        if test_len == 0 {
            continue;
        }
        let tokens = embed_sequence(&seq.items, &seq.labels, params, model)?;
        let mut session = fresh_session(model, &template)?;
        let mut hidden = session
            .prefill(&tokens.top_rows(train_len), params, meter)?
            .ok_or(Error::Data(alloc::string::String::from(
                "split left a user with an empty training prefix",
            )))?;

        let mut user = UserScores {
            labels: Vec::with_capacity(test_len),
            scores: Vec::with_capacity(test_len),
        };
        for t in train_len..seq.len() {
            let p = predict_ctr(&hidden, seq.items[t], params, meter)?;
            user.labels.push(seq.labels[t]);
            user.scores.push(p);
            if t + 1 < seq.len() {
                hidden = session.step(tokens.row(t), params, meter)?;
            }
        }
        all_labels.extend_from_slice(&user.labels);
        all_scores.extend_from_slice(&user.scores);
        per_user.push(user);
    }

    Ok(EvalReport {
        auc: auc(&all_labels, &all_scores)?,
        gauc: gauc(&per_user)?,
        logloss: logloss(&all_labels, &all_scores)?,
        impressions: all_labels.len(),
        users_scored: per_user.len(),
    })
}

fn fresh_session(model: &ModelConfig, template: &[BlockPolicy]) -> Result<DecodeSession> {
    let states = template.iter().map(|p| p.empty_state()).collect();
    let raw = match template[0].config().prefill_strategy() {
        PrefillStrategy::Recompute => Some(Matrix::zeros(0, model.d_model)),
        _ => None,
    };
    DecodeSession::from_parts(model, template.to_vec(), states, raw, 0)
}
