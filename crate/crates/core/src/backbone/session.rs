//! Incremental decoding against per-block cache states.
//!
//! A session owns one `BlockPolicy` + `CacheState` per block. `prefill`
//! ingests a history according to the policy's strategy (exact trace,
//! stepwise replay, or retained raw inputs for recompute-mode); `step`
//! decodes one new position: layer-norm, project, append to the cache,
//! attend, gate, and ride the residual stream.

use alloc::vec::Vec;

use crate::backbone::forward::{
    forward_blocks, forward_full, layer_norm_row, silu, ForwardTrace,
};
use crate::backbone::params::Parameters;
use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{MacMeter, Matrix};
use crate::policy::{
    BlockPolicy, CachePolicyConfig, CacheState, MemoryUse, PrefillInputs, PrefillStrategy,
};

#[derive(Clone)]
pub struct DecodeSession {
    model: ModelConfig,
    policies: Vec<BlockPolicy>,
    states: Vec<CacheState>,
    /// Embedded token rows, retained only by recompute-mode policies.
    raw_tokens: Option<Matrix>,
    len: usize,
}

impl DecodeSession {
    pub fn new(policy: &CachePolicyConfig, model: &ModelConfig, policy_seed: u64) -> Result<Self> {
        model.validate()?;
        let policies: Vec<BlockPolicy> = (0..model.n_blocks)
            .map(|b| BlockPolicy::new(policy.clone(), model, policy_seed, b))
            .collect::<Result<_>>()?;
        let states = policies.iter().map(|p| p.empty_state()).collect();
        let raw_tokens = match policy.prefill_strategy() {
            PrefillStrategy::Recompute => Some(Matrix::zeros(0, model.d_model)),
            _ => None,
        };
        Ok(Self { model: *model, policies, states, raw_tokens, len: 0 })
    }

    /// Assembles a session around externally built states (synthetic cache
    /// contents for resource measurement, or states restored elsewhere).
    pub fn from_parts(
        model: &ModelConfig,
        policies: Vec<BlockPolicy>,
        states: Vec<CacheState>,
        raw_tokens: Option<Matrix>,
        len: usize,
    ) -> Result<Self> {
        if policies.len() != model.n_blocks || states.len() != model.n_blocks {
            return Err(Error::Config(alloc::format!(
                "expected {} per-block policies and states, got {} and {}",
                model.n_blocks,
                policies.len(),
                states.len()
            )));
        }
        Ok(Self { model: *model, policies, states, raw_tokens, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn states(&self) -> &[CacheState] {
        &self.states
    }

    pub fn policies(&self) -> &[BlockPolicy] {
        &self.policies
    }

    /// Byte accounting summed over blocks (one sequence).
    pub fn memory_use(&self) -> MemoryUse {
        let mut total = MemoryUse::default();
        for (policy, state) in self.policies.iter().zip(self.states.iter()) {
            let m = policy.memory_bytes(state);
            total.headline += m.headline;
            total.overhead += m.overhead;
        }
        total
    }

    /// Ingests an embedded history (`L x d_model`). Returns the final
    /// position's hidden state, or `None` for an empty history. Must be the
    /// first operation on the session.
    pub fn prefill(
        &mut self,
        tokens: &Matrix,
        params: &Parameters,
        meter: &mut MacMeter,
    ) -> Result<Option<Vec<f64>>> {
        if self.len != 0 {
            return Err(Error::Config(alloc::string::String::from(
                "prefill must precede any decode step",
            )));
        }
        let total = tokens.rows();
        if total == 0 {
            return Ok(None);
        }
        match self.policies[0].config().prefill_strategy() {
            PrefillStrategy::ExactTrace => {
                let trace = forward_full(tokens, params, &self.model, meter)?;
                for (b, policy) in self.policies.iter().enumerate() {
                    let inputs = PrefillInputs {
                        keys: &trace.keys[b],
                        values: &trace.values[b],
                        queries: &trace.queries[b],
                        hiddens: &trace.normed[b],
                    };
                    self.states[b] = policy.prefill(&inputs, meter)?;
                }
                self.len = total;
                Ok(Some(trace.hidden.row(total - 1).to_vec()))
            }
            PrefillStrategy::Stepwise => {
                let mut last = Vec::new();
                for t in 0..total {
                    last = self.step(tokens.row(t), params, meter)?;
                }
                Ok(Some(last))
            }
            PrefillStrategy::Recompute => {
                let trace = self.recompute_forward(tokens, params, meter)?;
                for state in &mut self.states {
                    *state = CacheState::Recompute { len: total };
                }
                self.raw_tokens = Some(tokens.clone());
                self.len = total;
                Ok(Some(trace.hidden.row(total - 1).to_vec()))
            }
        }
    }

    /// Decodes one position from its embedded token row and returns the new
    /// hidden state.
    pub fn step(
        &mut self,
        token: &[f64],
        params: &Parameters,
        meter: &mut MacMeter,
    ) -> Result<Vec<f64>> {
        let d = self.model.d_model;
        if token.len() != d {
            return Err(Error::Shape { op: "step", left: (1, d), right: (1, token.len()) });
        }
        if self.len >= self.model.max_seq_len {
            return Err(Error::Config(alloc::format!(
                "decode step would exceed max_seq_len {}",
                self.model.max_seq_len
            )));
        }
        if params.blocks.len() != self.model.n_blocks {
            return Err(Error::Config(alloc::format!(
                "parameters hold {} blocks, session expects {}",
                params.blocks.len(),
                self.model.n_blocks
            )));
        }

        if matches!(
            self.policies[0].config().prefill_strategy(),
            PrefillStrategy::Recompute
        ) {
            let mut raw = self.raw_tokens.take().expect("recompute sessions retain inputs");
            raw.push_row(token);
            let trace = self.recompute_forward(&raw, params, meter)?;
            let total = raw.rows();
            self.raw_tokens = Some(raw);
            for state in &mut self.states {
                *state = CacheState::Recompute { len: total };
            }
            self.len = total;
            return Ok(trace.hidden.row(total - 1).to_vec());
        }

        let mut x = token.to_vec();
        let mut h = alloc::vec![0.0f64; d];
        for (b, block) in params.blocks.iter().enumerate() {
            layer_norm_row(&x, &mut h);
            let q = project_row(&h, &block.w_q, meter)?;
            let k = project_row(&h, &block.w_k, meter)?;
            let v = project_row(&h, &block.w_v, meter)?;
            let u = project_row(&h, &block.w_u, meter)?;
            self.policies[b].append(&mut self.states[b], &k, &v, &h, meter)?;
            let att = self.policies[b].attend(&mut self.states[b], &q, meter)?;
            let mut g = att.context;
            for (gv, &uv) in g.iter_mut().zip(u.iter()) {
                *gv *= silu(uv);
            }
            let proj = project_row(&g, &block.w_o, meter)?;
            for (xv, &pv) in x.iter_mut().zip(proj.iter()) {
                *xv += pv;
            }
        }
        self.len += 1;
        Ok(x)
    }

    fn recompute_forward(
        &self,
        tokens: &Matrix,
        params: &Parameters,
        meter: &mut MacMeter,
    ) -> Result<ForwardTrace> {
        forward_blocks(
            tokens,
            params,
            &self.model,
            |b| {
                self.policies[b]
                    .recompute_variant()
                    .expect("recompute sessions hold recompute-mode policies")
            },
            meter,
        )
    }
}

/// `x (1 x n) . w (n x m)`, metered as a full `n x m` product.
fn project_row(x: &[f64], w: &Matrix, meter: &mut MacMeter) -> Result<Vec<f64>> {
    if x.len() != w.rows() {
        return Err(Error::Shape {
            op: "project_row",
            left: (1, x.len()),
            right: (w.rows(), w.cols()),
        });
    }
    let mut out = alloc::vec![0.0f64; w.cols()];
    for (r, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let row = w.row(r);
        for (o, &wv) in out.iter_mut().zip(row.iter()) {
            *o += xv * wv;
        }
    }
    meter.add((w.rows() * w.cols()) as u64);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn config(blocks: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_blocks: blocks,
            max_seq_len: 16,
            n_items: 6,
            label_vocab: 2,
            bytes_per_element: 4,
        }
    }

    fn random_tokens(len: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::random_uniform(len, 8, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn native_stepwise_decoding_matches_full_forward_at_every_position() {
        for seed in [1u64, 2, 3] {
            let cfg = config(2);
            let params = Parameters::init(&cfg, seed);
            let tokens = random_tokens(6, seed + 10);
            let mut meter = MacMeter::new();
            let trace = forward_full(&tokens, &params, &cfg, &mut meter).unwrap();
            let mut session = DecodeSession::new(&CachePolicyConfig::Native, &cfg, 7).unwrap();
            for t in 0..6 {
                let h = session.step(tokens.row(t), &params, &mut meter).unwrap();
                for (a, b) in h.iter().zip(trace.hidden.row(t).iter()) {
                    assert!((a - b).abs() <= 1e-10, "seed {seed} position {t}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn first_step_on_an_empty_session_equals_length_one_forward() {
        let cfg = config(2);
        let params = Parameters::init(&cfg, 3);
        let tokens = random_tokens(1, 40);
        let mut meter = MacMeter::new();
        let trace = forward_full(&tokens, &params, &cfg, &mut meter).unwrap();
        let mut session = DecodeSession::new(&CachePolicyConfig::Native, &cfg, 7).unwrap();
        let h = session.step(tokens.row(0), &params, &mut meter).unwrap();
        for (a, b) in h.iter().zip(trace.hidden.row(0).iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn prefill_then_step_matches_pure_stepping_for_native() {
        let cfg = config(2);
        let params = Parameters::init(&cfg, 5);
        let tokens = random_tokens(6, 41);
        let mut meter = MacMeter::new();

        let mut stepped = DecodeSession::new(&CachePolicyConfig::Native, &cfg, 7).unwrap();
        let mut last_stepped = Vec::new();
        for t in 0..6 {
            last_stepped = stepped.step(tokens.row(t), &params, &mut meter).unwrap();
        }

        let mut prefilled = DecodeSession::new(&CachePolicyConfig::Native, &cfg, 7).unwrap();
        let last_prefilled = prefilled
            .prefill(&tokens.top_rows(5), &params, &mut meter)
            .unwrap()
            .unwrap();
        let _ = last_prefilled;
        let h = prefilled.step(tokens.row(5), &params, &mut meter).unwrap();
        for (a, b) in h.iter().zip(last_stepped.iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
        assert_eq!(prefilled.len(), 6);
    }

    #[test]
    fn no_eviction_budget_tracks_native_exactly() {
        let cfg = config(2);
        let params = Parameters::init(&cfg, 8);
        let tokens = random_tokens(8, 42);
        let mut meter = MacMeter::new();
        let native_last;
        {
            let mut s = DecodeSession::new(&CachePolicyConfig::Native, &cfg, 7).unwrap();
            s.prefill(&tokens.top_rows(7), &params, &mut meter).unwrap();
            native_last = s.step(tokens.row(7), &params, &mut meter).unwrap();
        }
        for policy in [
            CachePolicyConfig::H2o { budget: 64, recent_window: 4 },
            CachePolicyConfig::SnapKv { budget: 64, obs_window: 16, pool_width: 3 },
            CachePolicyConfig::Beacon { ratio: 1 },
            CachePolicyConfig::IntactKv { bits: 2, pivots: 64 },
        ] {
            let mut s = DecodeSession::new(&policy, &cfg, 7).unwrap();
            s.prefill(&tokens.top_rows(7), &params, &mut meter).unwrap();
            let last = s.step(tokens.row(7), &params, &mut meter).unwrap();
            for (a, b) in last.iter().zip(native_last.iter()) {
                assert!((a - b).abs() <= 1e-6, "{}: {a} vs {b}", policy.label());
            }
        }
    }

    #[test]
    fn recompute_session_reports_zero_cache_bytes_and_true_length() {
        let cfg = config(2);
        let params = Parameters::init(&cfg, 9);
        let tokens = random_tokens(5, 43);
        let mut meter = MacMeter::new();
        let mut s = DecodeSession::new(
            &CachePolicyConfig::Longformer { window: 2, n_global: 1 },
            &cfg,
            7,
        )
        .unwrap();
        s.prefill(&tokens, &params, &mut meter).unwrap();
        assert_eq!(s.memory_use(), MemoryUse::default());
        assert_eq!(s.len(), 5);
        let h = s.step(&[0.1; 8], &params, &mut meter).unwrap();
        assert_eq!(s.len(), 6);
        assert!(h.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wide_window_recompute_matches_native_last_token() {
        let cfg = config(2);
        let params = Parameters::init(&cfg, 12);
        let tokens = random_tokens(8, 44);
        let mut meter = MacMeter::new();
        let mut native = DecodeSession::new(&CachePolicyConfig::Native, &cfg, 7).unwrap();
        native.prefill(&tokens.top_rows(7), &params, &mut meter).unwrap();
        let want = native.step(tokens.row(7), &params, &mut meter).unwrap();

        let mut wide = DecodeSession::new(
            &CachePolicyConfig::Longformer { window: 32, n_global: 0 },
            &cfg,
            7,
        )
        .unwrap();
        wide.prefill(&tokens.top_rows(7), &params, &mut meter).unwrap();
        let got = wide.step(tokens.row(7), &params, &mut meter).unwrap();
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn step_beyond_max_seq_len_is_rejected() {
        let cfg = ModelConfig { max_seq_len: 2, ..config(1) };
        let params = Parameters::init(&cfg, 1);
        let mut s = DecodeSession::new(&CachePolicyConfig::Native, &cfg, 7).unwrap();
        let mut meter = MacMeter::new();
        s.step(&[0.0; 8], &params, &mut meter).unwrap();
        s.step(&[0.0; 8], &params, &mut meter).unwrap();
        assert!(s.step(&[0.0; 8], &params, &mut meter).is_err());
    }

    #[test]
    fn prefill_after_stepping_is_rejected() {
        let cfg = config(1);
        let params = Parameters::init(&cfg, 1);
        let mut s = DecodeSession::new(&CachePolicyConfig::Native, &cfg, 7).unwrap();
        let mut meter = MacMeter::new();
        s.step(&[0.0; 8], &params, &mut meter).unwrap();
        assert!(s.prefill(&random_tokens(2, 1), &params, &mut meter).is_err());
    }

    #[test]
    fn step_macs_match_the_decode_closed_form_for_native() {
        // 5 d^2 projections plus attention score/context products over the
        // post-append cache, per block.
        let cfg = config(2);
        let params = Parameters::init(&cfg, 14);
        let tokens = random_tokens(5, 45);
        let mut s = DecodeSession::new(&CachePolicyConfig::Native, &cfg, 7).unwrap();
        let mut meter = MacMeter::new();
        s.prefill(&tokens.top_rows(4), &params, &mut meter).unwrap();
        let mut step_meter = MacMeter::new();
        s.step(tokens.row(4), &params, &mut step_meter).unwrap();
        let d = 8u64;
        let attended = 5u64;
        assert_eq!(step_meter.count(), 2 * (5 * d * d + 2 * attended * d));
    }
}
