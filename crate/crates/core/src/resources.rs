//! Resource accounting for decode requests: closed-form and instrumented
//! MAC counts, and peak cached bytes under the convention that the step
//! being decoded is not yet part of the cache (so a full-context request
//! over a length-L window reports L-1 cached positions).
//!
//! Byte figures model a deployment element width (`bytes_per_element`,
//! fp32 by default) independently of the f64 arithmetic used internally.

use alloc::vec::Vec;

use crate::backbone::{DecodeSession, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::numerics::{MacMeter, Matrix, Rng};
use crate::policy::{
    BlockPolicy, CachePolicyConfig, CacheState, ExecutionMode, PrefillInputs, PrefillStrategy,
};

pub const BYTES_PER_MIB: u64 = 1024 * 1024;

/// Bytes to binary mebibytes.
pub fn to_mib(bytes: u64) -> f64 {
    bytes as f64 / BYTES_PER_MIB as f64
}

/// Resource measurements for one decode request (whole batch totals).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ResourceReport {
    /// Instrumented multiply-accumulate count across every batch sample's
    /// decode step.
    pub macs_measured: u64,
    /// Closed-form count for the same work, when the policy has one.
    pub macs_formula: Option<u64>,
    /// Cached-payload bytes at the modeled element width, summed over
    /// blocks and batch.
    pub kv_peak_bytes: u64,
    /// Auxiliary bytes (scales, zero points, scores, residuals, pivots).
    pub overhead_bytes: u64,
    pub batch: usize,
    pub mode: ExecutionMode,
}

/// Cached key/value payload of a full-width cache:
/// `2 * cached_len * d_model * bytes_per_elem * n_blocks * batch`.
pub fn native_kv_bytes(
    cached_len: usize,
    d_model: usize,
    n_blocks: usize,
    batch: usize,
    bytes_per_elem: usize,
) -> u64 {
    2 * cached_len as u64
        * d_model as u64
        * bytes_per_elem as u64
        * n_blocks as u64
        * batch as u64
}

/// Closed-form MACs for one sample's decode step, summed over blocks:
/// five `d x d` projections plus attention score/value products over the
/// post-append cache of `cached_len + 1` entries. Latent policies replace
/// the attention width with the latent dimension and pay three `d x
/// latent_dim` maps (compress, query absorption, context up-projection).
pub fn macs_formula(
    policy: &CachePolicyConfig,
    model: &ModelConfig,
    cached_len: usize,
) -> Result<u64> {
    let d = model.d_model as u64;
    let attended = cached_len as u64 + 1;
    let per_block = match policy {
        CachePolicyConfig::Native | CachePolicyConfig::Mqa | CachePolicyConfig::Gqa { .. } => {
            5 * d * d + 2 * attended * d
        }
        CachePolicyConfig::Mla { latent_dim } => {
            let c = *latent_dim as u64;
            5 * d * d + 3 * d * c + 2 * attended * c
        }
        other => return Err(Error::UnsupportedFormula(kind_name(other))),
    };
    Ok(per_block * model.n_blocks as u64)
}

/// Closed-form MACs for one full pass over `len` positions under full
/// causal attention, per block per sample: `5 len d^2` of projections plus
/// `len (len + 1) d` of attention products. The attention term is
/// quadratic, so doubling `len` at fixed `d` quadruples it.
pub fn full_recompute_macs(d_model: usize, len: usize) -> u64 {
    let d = d_model as u64;
    let l = len as u64;
    5 * l * d * d + l * (l + 1) * d
}

fn kind_name(policy: &CachePolicyConfig) -> &'static str {
    match policy {
        CachePolicyConfig::Native => "native",
        CachePolicyConfig::Mqa => "mqa",
        CachePolicyConfig::Gqa { .. } => "gqa",
        CachePolicyConfig::Mla { .. } => "mla",
        CachePolicyConfig::H2o { .. } => "h2o",
        CachePolicyConfig::SnapKv { .. } => "snapkv",
        CachePolicyConfig::Beacon { .. } => "beacon",
        CachePolicyConfig::Kivi { .. } => "kivi",
        CachePolicyConfig::IntactKv { .. } => "intactkv",
        CachePolicyConfig::Linformer { .. } => "linformer",
        CachePolicyConfig::Reformer { .. } => "reformer",
        CachePolicyConfig::Longformer { .. } => "longformer",
        CachePolicyConfig::Rwkv => "rwkv",
    }
}

/// One measurement request: a single decode step per batch sample against
/// a prefilled cache of `cached_len` positions.
#[derive(Debug, Clone)]
pub struct MeasureScenario {
    pub model: ModelConfig,
    pub policy: CachePolicyConfig,
    pub cached_len: usize,
    pub batch: usize,
    pub seed: u64,
    /// Upper bound on the projected cache bytes of the whole request;
    /// scenarios above it are rejected before allocating further blocks.
    pub ceiling_bytes: Option<u64>,
}

/// Synthetic prefill content and step parameters for one (model, seed,
/// cached_len) point, reusable across several policy measurements so a
/// sweep pays the construction cost once.
pub struct MeasureInputs {
    model: ModelConfig,
    seed: u64,
    cached_len: usize,
    keys: Matrix,
    values: Matrix,
    queries: Matrix,
    hiddens: Matrix,
    params: Parameters,
}

impl MeasureInputs {
    pub fn new(model: &ModelConfig, seed: u64, cached_len: usize) -> Result<Self> {
        model.validate()?;
        if cached_len + 1 > model.max_seq_len {
            return Err(Error::Config(alloc::format!(
                "cached_len {} leaves no room for a decode step within max_seq_len {}",
                cached_len,
                model.max_seq_len
            )));
        }
        let d = model.d_model;
        // Shared across blocks: only shapes (and, for score-based
        // eviction, some attention history) matter here.
        let rng = Rng::new(seed);
        Ok(Self {
            model: *model,
            seed,
            cached_len,
            keys: Matrix::random_uniform(cached_len, d, -1.0, 1.0, &mut rng.derive(101)),
            values: Matrix::random_uniform(cached_len, d, -1.0, 1.0, &mut rng.derive(102)),
            queries: Matrix::random_uniform(cached_len, d, -1.0, 1.0, &mut rng.derive(103)),
            hiddens: Matrix::random_uniform(cached_len, d, -1.0, 1.0, &mut rng.derive(104)),
            params: Parameters::init(model, seed),
        })
    }
}

/// Builds synthetic per-block cache contents, reports their byte use at
/// the modeled width, and instruments one decode step per batch sample.
pub fn measure(s: &MeasureScenario) -> Result<ResourceReport> {
    let inputs = MeasureInputs::new(&s.model, s.seed, s.cached_len)?;
    measure_with(&inputs, &s.policy, s.batch, s.ceiling_bytes)
}

/// `measure` against prebuilt inputs; one policy per call.
pub fn measure_with(
    m: &MeasureInputs,
    policy_config: &CachePolicyConfig,
    batch: usize,
    ceiling_bytes: Option<u64>,
) -> Result<ResourceReport> {
    if batch == 0 {
        return Err(Error::Config(alloc::string::String::from("batch must be positive")));
    }
    let d = m.model.d_model;
    let n_blocks = m.model.n_blocks;
    let mut scratch = MacMeter::new();
    let inputs = PrefillInputs {
        keys: &m.keys,
        values: &m.values,
        queries: &m.queries,
        hiddens: &m.hiddens,
    };

    let mut policies: Vec<BlockPolicy> = Vec::with_capacity(n_blocks);
    let mut states: Vec<CacheState> = Vec::with_capacity(n_blocks);
    let mut headline = 0u64;
    let mut overhead = 0u64;
    for b in 0..n_blocks {
        let policy = BlockPolicy::new(policy_config.clone(), &m.model, m.seed, b)?;
        // Only latent compression bakes per-block frozen maps into its
        // state; every other policy builds an identical state from the
        // shared inputs, so later blocks reuse the first block's state
        // (prefill work here is unmetered scratch either way).
        let state = if b == 0 || matches!(policy_config, CachePolicyConfig::Mla { .. }) {
            policy.prefill(&inputs, &mut scratch)?
        } else {
            states[0].clone()
        };
        let bytes = policy.memory_bytes(&state);
        if b == 0 {
            let projected = bytes.total() * n_blocks as u64 * batch as u64;
            if let Some(ceiling) = ceiling_bytes {
                if projected > ceiling {
                    return Err(Error::CacheCeiling { needed: projected, ceiling });
                }
            }
        }
        headline += bytes.headline;
        overhead += bytes.overhead;
        policies.push(policy);
        states.push(state);
    }

    let raw_tokens = match policy_config.prefill_strategy() {
        PrefillStrategy::Recompute => Some(m.hiddens.clone()),
        _ => None,
    };
    let base =
        DecodeSession::from_parts(&m.model, policies, states, raw_tokens, m.cached_len)?;
    let mut meter = MacMeter::new();
    for i in 0..batch {
        let mut token_rng = Rng::new(m.seed).derive(200 + i as u64);
        let token: Vec<f64> = (0..d).map(|_| token_rng.uniform_in(-1.0, 1.0)).collect();
        let mut session = base.clone();
        session.step(&token, &m.params, &mut meter)?;
    }

    let formula = match macs_formula(policy_config, &m.model, m.cached_len) {
        Ok(per_sample) => Some(per_sample * batch as u64),
        Err(Error::UnsupportedFormula(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(ResourceReport {
        macs_measured: meter.count(),
        macs_formula: formula,
        kv_peak_bytes: headline * batch as u64,
        overhead_bytes: overhead * batch as u64,
        batch,
        mode: policy_config.mode(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(d: usize, heads: usize, blocks: usize, max_len: usize) -> ModelConfig {
        ModelConfig {
            d_model: d,
            n_heads: heads,
            n_blocks: blocks,
            max_seq_len: max_len,
            n_items: 10,
            label_vocab: 2,
            bytes_per_element: 4,
        }
    }

    fn scenario(
        m: ModelConfig,
        policy: CachePolicyConfig,
        cached_len: usize,
        batch: usize,
    ) -> MeasureScenario {
        MeasureScenario { model: m, policy, cached_len, batch, seed: 3, ceiling_bytes: None }
    }

    #[test]
    fn full_width_payload_matches_the_closed_form_anchors() {
        assert_eq!(native_kv_bytes(1023, 256, 8, 8, 4), 134_086_656);
        assert!((to_mib(134_086_656) - 127.875).abs() < 1e-12);
        assert_eq!(native_kv_bytes(127, 256, 8, 8, 4), 16_646_144);
        assert!((to_mib(16_646_144) - 15.875).abs() < 1e-12);
        assert_eq!(native_kv_bytes(0, 256, 8, 8, 4), 0);
    }

    #[test]
    fn measured_native_payload_equals_the_closed_form() {
        let m = model(16, 4, 3, 64);
        for cached in [0usize, 5, 31] {
            let r = measure(&scenario(m, CachePolicyConfig::Native, cached, 2)).unwrap();
            assert_eq!(r.kv_peak_bytes, native_kv_bytes(cached, 16, 3, 2, 4));
            assert_eq!(r.overhead_bytes, 0);
            assert_eq!(r.mode, ExecutionMode::Cached);
        }
    }

    #[test]
    fn measured_macs_equal_formula_macs_for_closed_form_policies() {
        let m = model(16, 4, 2, 64);
        for policy in [
            CachePolicyConfig::Native,
            CachePolicyConfig::Mqa,
            CachePolicyConfig::Gqa { groups: 2 },
            CachePolicyConfig::Mla { latent_dim: 8 },
        ] {
            for cached in [0usize, 7, 20] {
                let r = measure(&scenario(m, policy.clone(), cached, 3)).unwrap();
                assert_eq!(
                    Some(r.macs_measured),
                    r.macs_formula,
                    "{} cached {cached}",
                    policy.label()
                );
            }
        }
    }

    #[test]
    fn policies_without_closed_forms_report_no_formula() {
        let m = model(16, 4, 2, 64);
        for policy in [
            CachePolicyConfig::H2o { budget: 8, recent_window: 2 },
            CachePolicyConfig::Kivi { bits: 2, group_size: 8 },
            CachePolicyConfig::Longformer { window: 8, n_global: 2 },
            CachePolicyConfig::Rwkv,
        ] {
            let r = measure(&scenario(m, policy.clone(), 12, 1)).unwrap();
            assert!(r.macs_formula.is_none(), "{}", policy.label());
            assert!(r.macs_measured > 0);
            assert!(matches!(
                macs_formula(&policy, &m, 12),
                Err(Error::UnsupportedFormula(_))
            ));
        }
    }

    #[test]
    fn payload_ratios_at_the_default_width_are_exact() {
        let m = model(256, 8, 8, 1024);
        let native = measure(&scenario(m, CachePolicyConfig::Native, 1023, 8)).unwrap();
        assert_eq!(native.kv_peak_bytes, 134_086_656);

        let mqa = measure(&scenario(m, CachePolicyConfig::Mqa, 1023, 8)).unwrap();
        assert_eq!(native.kv_peak_bytes, 8 * mqa.kv_peak_bytes);

        let gqa = measure(&scenario(m, CachePolicyConfig::Gqa { groups: 4 }, 1023, 8)).unwrap();
        assert_eq!(native.kv_peak_bytes, 2 * gqa.kv_peak_bytes);

        let mla =
            measure(&scenario(m, CachePolicyConfig::Mla { latent_dim: 64 }, 1023, 8)).unwrap();
        assert_eq!(native.kv_peak_bytes, 8 * mla.kv_peak_bytes);

        let kivi =
            measure(&scenario(m, CachePolicyConfig::Kivi { bits: 2, group_size: 32 }, 1023, 8))
                .unwrap();
        assert_eq!(native.kv_peak_bytes, 16 * kivi.kv_peak_bytes);
        assert!(kivi.overhead_bytes > 0);

        let h2o = measure(&scenario(
            m,
            CachePolicyConfig::H2o { budget: 16, recent_window: 4 },
            1023,
            8,
        ))
        .unwrap();
        assert_eq!(h2o.kv_peak_bytes, 2 * BYTES_PER_MIB);
    }

    #[test]
    fn recompute_policies_report_zero_cache() {
        let m = model(16, 4, 2, 64);
        for policy in [
            CachePolicyConfig::Linformer { proj_len: 8 },
            CachePolicyConfig::Reformer { n_buckets: 4 },
            CachePolicyConfig::Longformer { window: 8, n_global: 1 },
        ] {
            let r = measure(&scenario(m, policy.clone(), 20, 2)).unwrap();
            assert_eq!(r.kv_peak_bytes, 0, "{}", policy.label());
            assert_eq!(r.overhead_bytes, 0);
            assert_eq!(r.mode, ExecutionMode::Recompute);
            assert!(r.macs_measured > 0);
        }
    }

    #[test]
    fn payload_grows_with_cache_except_for_the_recurrent_state() {
        let m = model(16, 4, 2, 128);
        for policy in [
            CachePolicyConfig::Native,
            CachePolicyConfig::Mqa,
            CachePolicyConfig::Gqa { groups: 2 },
            CachePolicyConfig::Mla { latent_dim: 8 },
        ] {
            let mut last = 0;
            for cached in [4usize, 16, 64] {
                let r = measure(&scenario(m, policy.clone(), cached, 1)).unwrap();
                assert!(r.kv_peak_bytes > last, "{}", policy.label());
                last = r.kv_peak_bytes;
            }
        }
        let small = measure(&scenario(m, CachePolicyConfig::Rwkv, 4, 1)).unwrap();
        let large = measure(&scenario(m, CachePolicyConfig::Rwkv, 64, 1)).unwrap();
        assert_eq!(small.kv_peak_bytes, large.kv_peak_bytes);
    }

    #[test]
    fn latent_decode_is_cheaper_than_full_width_at_the_default_config() {
        let m = model(256, 8, 8, 1024);
        let native = macs_formula(&CachePolicyConfig::Native, &m, 1023).unwrap();
        let mla = macs_formula(&CachePolicyConfig::Mla { latent_dim: 64 }, &m, 1023).unwrap();
        assert!(mla < native, "{mla} vs {native}");
    }

    #[test]
    fn doubling_the_window_quadruples_recompute_attention_terms() {
        let d = 32;
        let attention = |len: u64| full_recompute_macs(d, len as usize) - 5 * len * (d * d) as u64;
        assert_eq!(attention(64), 64 * 65 * d as u64);
        assert_eq!(attention(128), 128 * 129 * d as u64);
        let r = attention(128) as f64 / attention(64) as f64;
        assert!((r - 4.0).abs() < 0.05, "ratio {r}");
    }

    #[test]
    fn byte_ceiling_rejects_oversized_requests() {
        let m = model(16, 4, 2, 64);
        let mut s = scenario(m, CachePolicyConfig::Native, 32, 4);
        let need = native_kv_bytes(32, 16, 2, 4, 4);
        s.ceiling_bytes = Some(need - 1);
        match measure(&s) {
            Err(Error::CacheCeiling { needed, ceiling }) => {
                assert_eq!(needed, need);
                assert_eq!(ceiling, need - 1);
            }
            other => panic!("expected ceiling rejection, got {other:?}"),
        }
        s.ceiling_bytes = Some(need);
        assert!(measure(&s).is_ok());
    }

    #[test]
    fn shared_inputs_reproduce_per_scenario_measurements() {
        let m = model(16, 4, 2, 64);
        let inputs = MeasureInputs::new(&m, 3, 20).unwrap();
        for policy in [
            CachePolicyConfig::Native,
            CachePolicyConfig::Gqa { groups: 2 },
            CachePolicyConfig::Kivi { bits: 4, group_size: 8 },
            CachePolicyConfig::Rwkv,
        ] {
            let shared = measure_with(&inputs, &policy, 2, None).unwrap();
            let solo = measure(&scenario(m, policy, 20, 2)).unwrap();
            assert_eq!(shared, solo);
        }
    }

    #[test]
    fn measurement_is_deterministic() {
        let m = model(16, 4, 2, 64);
        let s = scenario(m, CachePolicyConfig::SnapKv { budget: 8, obs_window: 4, pool_width: 3 }, 20, 2);
        let a = measure(&s).unwrap();
        let b = measure(&s).unwrap();
        assert_eq!(a, b);
    }
}

