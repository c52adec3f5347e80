//! Ranking and calibration metrics: AUC (rank-sum form), user-grouped GAUC,
//! and logloss. These are the accuracy axes reported by the benchmark.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Clamp bound applied to predictions before taking logarithms.
pub const LOGLOSS_EPS: f64 = 1e-7;

fn check_scores(labels: &[u8], scores: &[f64]) -> Result<()> {
    if labels.len() != scores.len() {
        return Err(Error::Shape {
            op: "metric inputs",
            left: (labels.len(), 1),
            right: (scores.len(), 1),
        });
    }
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("empty input"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data(alloc::string::String::from("NaN score")));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Data(alloc::string::String::from("label outside {0, 1}")));
    }
    Ok(())
}

/// Area under the ROC curve via the rank-sum identity, with average ranks for
/// tied scores (each tied positive/negative pair counts one half). Equals the
/// pairwise count (wins + ties / 2) / (P * N) exactly, not merely within a
/// tolerance: both numerators are sums of integer halves, which f64
/// represents exactly at these sizes.
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    check_scores(labels, scores)?;
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("single-class AUC"));
    }

    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("NaN screened above"));

    // Sum of 1-based average ranks over positives, accumulated tie-run by
    // tie-run so every term is an exact multiple of 1/2.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        let pos_in_run = order[i..=j].iter().filter(|&&idx| labels[idx] == 1).count();
        rank_sum_pos += avg_rank * pos_in_run as f64;
        i = j + 1;
    }

    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-user impression group for GAUC.
#[derive(Debug, Clone)]
pub struct UserScores {
    pub labels: Vec<u8>,
    pub scores: Vec<f64>,
}

/// Impression-weighted mean of per-user AUCs. Users whose impressions are all
/// one class have no defined AUC and are excluded from both numerator and
/// denominator; if every user is excluded the metric is undefined.
pub fn gauc(users: &[UserScores]) -> Result<f64> {
    let mut weighted = 0.0f64;
    let mut weight = 0.0f64;
    for user in users {
        match auc(&user.labels, &user.scores) {
            Ok(a) => {
                let n_u = user.labels.len() as f64;
                weighted += n_u * a;
                weight += n_u;
            }
            Err(Error::UndefinedMetric(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if weight == 0.0 {
        return Err(Error::UndefinedMetric("no user with both classes"));
    }
    Ok(weighted / weight)
}

/// Mean binary cross-entropy with predictions clamped to
/// `[LOGLOSS_EPS, 1 - LOGLOSS_EPS]`.
pub fn logloss(labels: &[u8], preds: &[f64]) -> Result<f64> {
    check_scores(labels, preds)?;
    let mut sum = 0.0f64;
    for (&y, &p) in labels.iter().zip(preds.iter()) {
        let p = p.clamp(LOGLOSS_EPS, 1.0 - LOGLOSS_EPS);
        sum -= if y == 1 { libm::log(p) } else { libm::log(1.0 - p) };
    }
    Ok(sum / labels.len() as f64)
}
