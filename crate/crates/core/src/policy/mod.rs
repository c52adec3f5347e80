//! KV-cache management policies for the attention blocks.
//!
//! Thirteen policies cover five levels at which a decode cache can be
//! compressed: execution (recompute instead of caching: Linformer, Reformer,
//! Longformer), sequence (merge or evict tokens: Beacon, H2O, SnapKV),
//! head (share K/V across query heads: MQA, GQA), vector (low-rank latents:
//! MLA), element (low-bit storage: KIVI, IntactKV), plus the uncompressed
//! Native baseline and the attention-free RWKV recurrence.
//!
//! A [`BlockPolicy`] is the per-block operator: it owns any frozen derived
//! weights (random projections, latent maps, decay ramps) and drives a
//! [`CacheState`] through `prefill`, `append`, `attend`, and byte accounting.

mod lsh;
mod masks;
mod quantize;
mod rwkv;
mod states;

pub use lsh::lsh_bucket;
pub use masks::{bucket_mask, longformer_mask};
pub use quantize::{packed_code_bytes, quantize_lowbit, validate_bits, QuantizedVec};
pub use rwkv::{rwkv_step, WkvState};
pub use states::{BeaconState, CacheState, EvictState, FullState, IntactState, KiviState, SnapState};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_in_place, MacMeter, Matrix, Rng};

fn default_proj_len() -> usize {
    64
}
fn default_n_buckets() -> usize {
    8
}
fn default_window() -> usize {
    64
}
fn default_n_global() -> usize {
    4
}
fn default_ratio() -> usize {
    8
}
fn default_budget() -> usize {
    16
}
fn default_recent_window() -> usize {
    4
}
fn default_obs_window() -> usize {
    16
}
fn default_pool_width() -> usize {
    3
}
fn default_groups() -> usize {
    4
}
fn default_latent_dim() -> usize {
    64
}
fn default_bits() -> u32 {
    2
}
fn default_group_size() -> usize {
    32
}
fn default_pivots() -> usize {
    4
}

/// Cache policy selection plus its hyperparameters. Serialized with a
/// `name` tag so benchmark configs read naturally:
/// `{"name": "h2o", "budget": 16}`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum CachePolicyConfig {
    Native,
    Linformer {
        #[serde(default = "default_proj_len")]
        proj_len: usize,
    },
    Reformer {
        #[serde(default = "default_n_buckets")]
        n_buckets: usize,
    },
    Longformer {
        #[serde(default = "default_window")]
        window: usize,
        #[serde(default = "default_n_global")]
        n_global: usize,
    },
    Beacon {
        #[serde(default = "default_ratio")]
        ratio: usize,
    },
    H2o {
        #[serde(default = "default_budget")]
        budget: usize,
        #[serde(default = "default_recent_window")]
        recent_window: usize,
    },
    #[serde(rename = "snapkv")]
    SnapKv {
        #[serde(default = "default_budget")]
        budget: usize,
        #[serde(default = "default_obs_window")]
        obs_window: usize,
        #[serde(default = "default_pool_width")]
        pool_width: usize,
    },
    Mqa,
    Gqa {
        #[serde(default = "default_groups")]
        groups: usize,
    },
    Mla {
        #[serde(default = "default_latent_dim")]
        latent_dim: usize,
    },
    Kivi {
        #[serde(default = "default_bits")]
        bits: u32,
        #[serde(default = "default_group_size")]
        group_size: usize,
    },
    #[serde(rename = "intactkv")]
    IntactKv {
        #[serde(default = "default_bits")]
        bits: u32,
        #[serde(default = "default_pivots")]
        pivots: usize,
    },
    Rwkv,
}

/// Whether a policy serves decode steps from a cache or recomputes the
/// whole sequence per request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    Cached,
    Recompute,
}

/// How a decoding session builds its initial state from a history.
///
/// Selection/compression policies (`ExactTrace`) keep the uncompressed
/// forward pass for the history — they only change what is *retained* for
/// decoding, matching how such caches are deployed. Policies that alter the
/// attention function itself (`Stepwise`) must replay the history token by
/// token so every position's hidden state reflects the altered attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefillStrategy {
    ExactTrace,
    Stepwise,
    Recompute,
}

impl CachePolicyConfig {
    pub fn mode(&self) -> ExecutionMode {
        match self {
            CachePolicyConfig::Linformer { .. }
            | CachePolicyConfig::Reformer { .. }
            | CachePolicyConfig::Longformer { .. } => ExecutionMode::Recompute,
            _ => ExecutionMode::Cached,
        }
    }

    pub fn prefill_strategy(&self) -> PrefillStrategy {
        match self {
            CachePolicyConfig::Native
            | CachePolicyConfig::Beacon { .. }
            | CachePolicyConfig::H2o { .. }
            | CachePolicyConfig::SnapKv { .. }
            | CachePolicyConfig::Kivi { .. }
            | CachePolicyConfig::IntactKv { .. } => PrefillStrategy::ExactTrace,
            CachePolicyConfig::Mqa
            | CachePolicyConfig::Gqa { .. }
            | CachePolicyConfig::Mla { .. }
            | CachePolicyConfig::Rwkv => PrefillStrategy::Stepwise,
            CachePolicyConfig::Linformer { .. }
            | CachePolicyConfig::Reformer { .. }
            | CachePolicyConfig::Longformer { .. } => PrefillStrategy::Recompute,
        }
    }

    /// Short stable identifier embedding the hyperparameters, used in
    /// scenario ids and report rows.
    pub fn label(&self) -> String {
        match self {
            CachePolicyConfig::Native => String::from("native"),
            CachePolicyConfig::Linformer { proj_len } => format!("linformer_k{proj_len}"),
            CachePolicyConfig::Reformer { n_buckets } => format!("reformer_b{n_buckets}"),
            CachePolicyConfig::Longformer { window, n_global } => {
                format!("longformer_w{window}_g{n_global}")
            }
            CachePolicyConfig::Beacon { ratio } => format!("beacon_r{ratio}"),
            CachePolicyConfig::H2o { budget, recent_window } => {
                format!("h2o_b{budget}_r{recent_window}")
            }
            CachePolicyConfig::SnapKv { budget, obs_window, pool_width } => {
                format!("snapkv_b{budget}_o{obs_window}_p{pool_width}")
            }
            CachePolicyConfig::Mqa => String::from("mqa"),
            CachePolicyConfig::Gqa { groups } => format!("gqa_g{groups}"),
            CachePolicyConfig::Mla { latent_dim } => format!("mla_c{latent_dim}"),
            CachePolicyConfig::Kivi { bits, group_size } => format!("kivi_{bits}bit_g{group_size}"),
            CachePolicyConfig::IntactKv { bits, pivots } => format!("intactkv_{bits}bit_p{pivots}"),
            CachePolicyConfig::Rwkv => String::from("rwkv"),
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        match *self {
            CachePolicyConfig::Native | CachePolicyConfig::Mqa | CachePolicyConfig::Rwkv => Ok(()),
            CachePolicyConfig::Linformer { proj_len } => {
                if proj_len == 0 {
                    return Err(Error::Config(String::from("linformer proj_len must be positive")));
                }
                Ok(())
            }
            CachePolicyConfig::Reformer { n_buckets } => {
                if n_buckets < 2 || n_buckets % 2 != 0 {
                    return Err(Error::Config(format!(
                        "reformer n_buckets {n_buckets} must be even and at least 2"
                    )));
                }
                Ok(())
            }
            CachePolicyConfig::Longformer { window, .. } => {
                if window == 0 {
                    return Err(Error::Config(String::from("longformer window must be positive")));
                }
                Ok(())
            }
            CachePolicyConfig::Beacon { ratio } => {
                if ratio == 0 {
                    return Err(Error::Config(String::from("beacon ratio must be positive")));
                }
                Ok(())
            }
            CachePolicyConfig::H2o { budget, recent_window } => {
                if budget == 0 {
                    return Err(Error::Config(String::from("h2o budget must be positive")));
                }
                if recent_window > budget {
                    return Err(Error::Config(format!(
                        "h2o recent_window {recent_window} exceeds budget {budget}"
                    )));
                }
                Ok(())
            }
            CachePolicyConfig::SnapKv { budget, obs_window, pool_width } => {
                if budget == 0 || obs_window == 0 || pool_width == 0 {
                    return Err(Error::Config(String::from(
                        "snapkv budget, obs_window, pool_width must be positive",
                    )));
                }
                if obs_window > budget {
                    return Err(Error::Config(format!(
                        "snapkv obs_window {obs_window} exceeds budget {budget}"
                    )));
                }
                Ok(())
            }
            CachePolicyConfig::Gqa { groups } => {
                if groups == 0 || groups > model.n_heads || model.n_heads % groups != 0 {
                    return Err(Error::Config(format!(
                        "gqa groups {groups} must divide n_heads {}",
                        model.n_heads
                    )));
                }
                Ok(())
            }
            CachePolicyConfig::Mla { latent_dim } => {
                if latent_dim == 0 || latent_dim > 2 * model.d_model {
                    return Err(Error::Config(format!(
                        "mla latent_dim {latent_dim} outside [1, {}]",
                        2 * model.d_model
                    )));
                }
                Ok(())
            }
            CachePolicyConfig::Kivi { bits, group_size } => {
                validate_bits(bits)?;
                if group_size == 0 {
                    return Err(Error::Config(String::from("kivi group_size must be positive")));
                }
                Ok(())
            }
            CachePolicyConfig::IntactKv { bits, .. } => validate_bits(bits),
        }
    }
}

/// Per-block tensors handed to `prefill`, all `L x d_model`, produced by a
/// full forward pass over the history.
pub struct PrefillInputs<'a> {
    pub keys: &'a Matrix,
    pub values: &'a Matrix,
    pub queries: &'a Matrix,
    /// Layer-normalized block inputs; only latent compression reads them.
    pub hiddens: &'a Matrix,
}

/// Result of one attention call: the concatenated per-head context vector
/// plus the attention weights actually used. Weighted policies return one
/// weight vector per head (a single vector for latent-space attention);
/// the recurrent policy returns none.
#[derive(Debug, Clone)]
pub struct AttendOutput {
    pub context: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

/// Byte accounting for one block's cache state (one sequence).
/// `headline` is the retained KV payload at the policy's element width;
/// `overhead` covers auxiliary bookkeeping: quantizer scales and zero
/// points, raw residual/pivot copies, eviction scores, recurrent scratch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemoryUse {
    pub headline: u64,
    pub overhead: u64,
}

impl MemoryUse {
    pub fn total(&self) -> u64 {
        self.headline + self.overhead
    }
}

/// Per-block cache operator: policy config, model shape, and any frozen
/// derived weights (seeded once per evaluation, never trained).
#[derive(Debug, Clone)]
pub struct BlockPolicy {
    config: CachePolicyConfig,
    model: ModelConfig,
    linformer_e: Option<Matrix>,
    linformer_f: Option<Matrix>,
    lsh_rotation: Option<Matrix>,
    latent_down: Option<Matrix>,
    latent_up_k: Option<Matrix>,
    latent_up_v: Option<Matrix>,
    rwkv_decay: Option<Vec<f64>>,
    rwkv_bonus: Option<Vec<f64>>,
}

impl BlockPolicy {
    pub fn new(
        config: CachePolicyConfig,
        model: &ModelConfig,
        seed: u64,
        block: usize,
    ) -> Result<Self> {
        config.validate(model)?;
        let root = Rng::new(seed).derive(block as u64);
        let d = model.d_model;
        let mut policy = Self {
            config: config.clone(),
            model: *model,
            linformer_e: None,
            linformer_f: None,
            lsh_rotation: None,
            latent_down: None,
            latent_up_k: None,
            latent_up_v: None,
            rwkv_decay: None,
            rwkv_bonus: None,
        };
        match config {
            CachePolicyConfig::Linformer { proj_len } => {
                let s = 1.0 / libm::sqrt(model.max_seq_len as f64);
                let mut rng_e = root.derive(1);
                let mut rng_f = root.derive(2);
                policy.linformer_e =
                    Some(Matrix::random_uniform(proj_len, model.max_seq_len, -s, s, &mut rng_e));
                policy.linformer_f =
                    Some(Matrix::random_uniform(proj_len, model.max_seq_len, -s, s, &mut rng_f));
            }
            CachePolicyConfig::Reformer { n_buckets } => {
                let mut rng = root.derive(3);
                policy.lsh_rotation =
                    Some(Matrix::random_uniform(d, n_buckets / 2, -1.0, 1.0, &mut rng));
            }
            CachePolicyConfig::Mla { latent_dim } => {
                let s_down = 1.0 / libm::sqrt(d as f64);
                let s_up = 1.0 / libm::sqrt(latent_dim as f64);
                let mut rng_down = root.derive(4);
                let mut rng_k = root.derive(5);
                let mut rng_v = root.derive(6);
                policy.latent_down =
                    Some(Matrix::random_uniform(d, latent_dim, -s_down, s_down, &mut rng_down));
                policy.latent_up_k =
                    Some(Matrix::random_uniform(latent_dim, d, -s_up, s_up, &mut rng_k));
                policy.latent_up_v =
                    Some(Matrix::random_uniform(latent_dim, d, -s_up, s_up, &mut rng_v));
            }
            CachePolicyConfig::Rwkv => {
                // Fixed per-channel ramps: decays spread over (0, 6] so some
                // channels remember long histories and others only recent
                // tokens; bonuses spread over [-0.5, 0.5].
                let denom = (d.max(2) - 1) as f64;
                policy.rwkv_decay =
                    Some((0..d).map(|c| 0.3 + 5.7 * c as f64 / denom).collect());
                policy.rwkv_bonus =
                    Some((0..d).map(|c| 0.5 - c as f64 / denom).collect());
            }
            _ => {}
        }
        Ok(policy)
    }

    pub fn config(&self) -> &CachePolicyConfig {
        &self.config
    }

    pub fn mode(&self) -> ExecutionMode {
        self.config.mode()
    }

    /// Replaces the frozen low-rank sequence projections (`proj_len x
    /// max_seq_len` each); useful for injecting structured maps.
    pub fn set_linformer_maps(&mut self, e: Matrix, f: Matrix) -> Result<()> {
        let proj_len = match self.config {
            CachePolicyConfig::Linformer { proj_len } => proj_len,
            _ => return Err(Error::Config(String::from("policy has no sequence projections"))),
        };
        for m in [&e, &f] {
            if m.rows() != proj_len || m.cols() != self.model.max_seq_len {
                return Err(Error::Shape {
                    op: "set_linformer_maps",
                    left: (proj_len, self.model.max_seq_len),
                    right: (m.rows(), m.cols()),
                });
            }
        }
        self.linformer_e = Some(e);
        self.linformer_f = Some(f);
        Ok(())
    }

    /// Replaces the frozen latent compression/reconstruction maps.
    pub fn set_latent_maps(&mut self, down: Matrix, up_k: Matrix, up_v: Matrix) -> Result<()> {
        let latent_dim = match self.config {
            CachePolicyConfig::Mla { latent_dim } => latent_dim,
            _ => return Err(Error::Config(String::from("policy has no latent maps"))),
        };
        let d = self.model.d_model;
        if down.rows() != d || down.cols() != latent_dim {
            return Err(Error::Shape {
                op: "set_latent_maps",
                left: (d, latent_dim),
                right: (down.rows(), down.cols()),
            });
        }
        for m in [&up_k, &up_v] {
            if m.rows() != latent_dim || m.cols() != d {
                return Err(Error::Shape {
                    op: "set_latent_maps",
                    left: (latent_dim, d),
                    right: (m.rows(), m.cols()),
                });
            }
        }
        self.latent_down = Some(down);
        self.latent_up_k = Some(up_k);
        self.latent_up_v = Some(up_v);
        Ok(())
    }

    pub fn linformer_maps(&self) -> Option<(&Matrix, &Matrix)> {
        Some((self.linformer_e.as_ref()?, self.linformer_f.as_ref()?))
    }

    pub fn latent_maps(&self) -> Option<(&Matrix, &Matrix, &Matrix)> {
        Some((
            self.latent_down.as_ref()?,
            self.latent_up_k.as_ref()?,
            self.latent_up_v.as_ref()?,
        ))
    }

    pub fn rwkv_params(&self) -> Option<(&[f64], &[f64])> {
        Some((self.rwkv_decay.as_deref()?, self.rwkv_bonus.as_deref()?))
    }

    /// The per-block attention variant a recompute-mode policy runs its full
    /// forward passes with; `None` for cached policies.
    pub fn recompute_variant(&self) -> Option<crate::backbone::AttentionVariant<'_>> {
        use crate::backbone::AttentionVariant;
        match self.config {
            CachePolicyConfig::Linformer { proj_len } => Some(AttentionVariant::LowRank {
                e: self.linformer_e.as_ref().expect("derived at construction"),
                f: self.linformer_f.as_ref().expect("derived at construction"),
                proj_len,
            }),
            CachePolicyConfig::Reformer { .. } => Some(AttentionVariant::Bucketed {
                rotation: self.lsh_rotation.as_ref().expect("derived at construction"),
            }),
            CachePolicyConfig::Longformer { window, n_global } => {
                Some(AttentionVariant::Windowed { window, n_global })
            }
            _ => None,
        }
    }

    pub fn lsh_rotation(&self) -> Option<&Matrix> {
        self.lsh_rotation.as_ref()
    }

    fn groups(&self) -> usize {
        match self.config {
            CachePolicyConfig::Mqa => 1,
            CachePolicyConfig::Gqa { groups } => groups,
            _ => self.model.n_heads,
        }
    }

    pub fn empty_state(&self) -> CacheState {
        let d = self.model.d_model;
        match self.config {
            CachePolicyConfig::Native => CacheState::Native(FullState::new(d)),
            CachePolicyConfig::Mqa | CachePolicyConfig::Gqa { .. } => CacheState::Grouped {
                entries: FullState::new(self.groups() * self.model.head_dim()),
                groups: self.groups(),
            },
            CachePolicyConfig::Mla { latent_dim } => {
                CacheState::Latent { latents: Matrix::zeros(0, latent_dim) }
            }
            CachePolicyConfig::H2o { budget, recent_window } => {
                CacheState::Evicting(EvictState::new(d, budget, recent_window))
            }
            CachePolicyConfig::SnapKv { budget, .. } => CacheState::Snap(SnapState::new(d, budget)),
            CachePolicyConfig::Beacon { ratio } => CacheState::Beacon(BeaconState::new(d, ratio)),
            CachePolicyConfig::Kivi { bits, group_size } => {
                CacheState::Kivi(KiviState::new(d, bits, group_size))
            }
            CachePolicyConfig::IntactKv { bits, pivots } => {
                CacheState::Intact(IntactState::new(d, bits, pivots))
            }
            CachePolicyConfig::Rwkv => CacheState::Rwkv(WkvState::new(d)),
            CachePolicyConfig::Linformer { .. }
            | CachePolicyConfig::Reformer { .. }
            | CachePolicyConfig::Longformer { .. } => CacheState::Recompute { len: 0 },
        }
    }

    /// Builds a cache state from a full history. `H2O` replays the history
    /// through its streaming evict/score loop; `SnapKV` votes with the
    /// trailing observation window; the rest transform and store.
    pub fn prefill(&self, inputs: &PrefillInputs<'_>, meter: &mut MacMeter) -> Result<CacheState> {
        let d = self.model.d_model;
        let len = inputs.keys.rows();
        for m in [inputs.keys, inputs.values, inputs.queries, inputs.hiddens] {
            if m.rows() != len || m.cols() != d {
                return Err(Error::Shape {
                    op: "prefill",
                    left: (len, d),
                    right: (m.rows(), m.cols()),
                });
            }
        }
        if len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "prefill length {len} exceeds max_seq_len {}",
                self.model.max_seq_len
            )));
        }

        match &self.config {
            CachePolicyConfig::Native => Ok(CacheState::Native(FullState {
                keys: inputs.keys.clone(),
                values: inputs.values.clone(),
            })),
            CachePolicyConfig::Mqa | CachePolicyConfig::Gqa { .. } => {
                let mut state = self.empty_state();
                for t in 0..len {
                    self.append(&mut state, inputs.keys.row(t), inputs.values.row(t), &[], meter)?;
                }
                Ok(state)
            }
            CachePolicyConfig::Mla { .. } => {
                let down = self.latent_down.as_ref().expect("derived at construction");
                let latents = inputs.hiddens.matmul(down, meter)?;
                Ok(CacheState::Latent { latents })
            }
            CachePolicyConfig::H2o { .. } => {
                let mut state = self.empty_state();
                for t in 0..len {
                    self.append(&mut state, inputs.keys.row(t), inputs.values.row(t), &[], meter)?;
                    self.attend(&mut state, inputs.queries.row(t), meter)?;
                }
                Ok(state)
            }
            CachePolicyConfig::SnapKv { budget, obs_window, pool_width } => {
                Ok(CacheState::Snap(self.snap_prefill(
                    inputs,
                    *budget,
                    *obs_window,
                    *pool_width,
                    meter,
                )))
            }
            CachePolicyConfig::Beacon { .. }
            | CachePolicyConfig::Kivi { .. }
            | CachePolicyConfig::IntactKv { .. } => {
                let mut state = self.empty_state();
                for t in 0..len {
                    self.append(&mut state, inputs.keys.row(t), inputs.values.row(t), &[], meter)?;
                }
                Ok(state)
            }
            CachePolicyConfig::Rwkv => {
                let mut state = WkvState::new(d);
                let decay = self.rwkv_decay.as_ref().expect("derived at construction");
                for t in 0..len {
                    state.fold(inputs.keys.row(t), inputs.values.row(t), decay, meter);
                }
                Ok(CacheState::Rwkv(state))
            }
            CachePolicyConfig::Linformer { .. }
            | CachePolicyConfig::Reformer { .. }
            | CachePolicyConfig::Longformer { .. } => Ok(CacheState::Recompute { len }),
        }
    }

    fn snap_prefill(
        &self,
        inputs: &PrefillInputs<'_>,
        budget: usize,
        obs_window: usize,
        pool_width: usize,
        meter: &mut MacMeter,
    ) -> SnapState {
        let len = inputs.keys.rows();
        let d = self.model.d_model;
        let n_heads = self.model.n_heads;
        let head_dim = self.model.head_dim();
        let scale = 1.0 / libm::sqrt(head_dim as f64);
        let window = obs_window.min(len);
        let prefix = len - window;

        // Attention mass each prefix token receives from the observation
        // window's queries, summed over heads and window positions.
        let mut votes = alloc::vec![0.0f64; prefix];
        for p in prefix..len {
            let q = inputs.queries.row(p);
            for h in 0..n_heads {
                let qh = &q[h * head_dim..(h + 1) * head_dim];
                let mut scores: Vec<f64> = (0..=p)
                    .map(|j| {
                        let kh = &inputs.keys.row(j)[h * head_dim..(h + 1) * head_dim];
                        dot(qh, kh, meter) * scale
                    })
                    .collect();
                softmax_in_place(&mut scores);
                for (j, &w) in scores.iter().take(prefix).enumerate() {
                    votes[j] += w;
                }
            }
        }

        let keep = snap_select(&votes, pool_width, budget.saturating_sub(window));
        let mut state = SnapState::new(d, budget);
        for &j in &keep {
            state.push_selected(inputs.keys.row(j), inputs.values.row(j));
        }
        for p in prefix..len {
            state.push_selected(inputs.keys.row(p), inputs.values.row(p));
        }
        state
    }

    /// Appends one token. `hidden` is the layer-normalized block input for
    /// this position; only latent compression reads it, other policies
    /// accept an empty slice.
    pub fn append(
        &self,
        state: &mut CacheState,
        k: &[f64],
        v: &[f64],
        hidden: &[f64],
        meter: &mut MacMeter,
    ) -> Result<()> {
        let d = self.model.d_model;
        if matches!(self.mode(), ExecutionMode::Recompute) {
            if let CacheState::Recompute { len } = state {
                *len += 1;
                return Ok(());
            }
        }
        if k.len() != d || v.len() != d {
            return Err(Error::Shape { op: "append", left: (1, d), right: (1, k.len().max(v.len())) });
        }
        match state {
            CacheState::Native(s) => s.push(k, v),
            CacheState::Grouped { entries, groups } => {
                let pk = pool_heads(k, self.model.n_heads, self.model.head_dim(), *groups);
                let pv = pool_heads(v, self.model.n_heads, self.model.head_dim(), *groups);
                entries.push(&pk, &pv);
            }
            CacheState::Latent { latents } => {
                let down = self.latent_down.as_ref().expect("derived at construction");
                if hidden.len() != d {
                    return Err(Error::Shape {
                        op: "append latent",
                        left: (1, d),
                        right: (1, hidden.len()),
                    });
                }
                let c = mla_compress(hidden, down, meter)?;
                latents.push_row(&c);
            }
            CacheState::Evicting(s) => s.push(k, v),
            CacheState::Snap(s) => s.push(k, v),
            CacheState::Beacon(s) => s.push(k, v),
            CacheState::Kivi(s) => s.push(k, v),
            CacheState::Intact(s) => s.push(k, v),
            CacheState::Rwkv(s) => {
                let decay = self.rwkv_decay.as_ref().expect("derived at construction");
                if let Some((pk, pv)) = s.pending.take() {
                    s.fold(&pk, &pv, decay, meter);
                }
                s.pending = Some((k.to_vec(), v.to_vec()));
            }
            CacheState::Recompute { .. } => unreachable!("handled above"),
        }
        Ok(())
    }

    /// Softmax attention of one query over the policy's stored
    /// representation. Mutates scoring state where the policy tracks
    /// received attention (H2O) or folds a pending token (RWKV).
    pub fn attend(
        &self,
        state: &mut CacheState,
        q: &[f64],
        meter: &mut MacMeter,
    ) -> Result<AttendOutput> {
        let d = self.model.d_model;
        if q.len() != d {
            return Err(Error::Shape { op: "attend", left: (1, d), right: (1, q.len()) });
        }
        let n_heads = self.model.n_heads;
        let head_dim = self.model.head_dim();
        match state {
            CacheState::Native(s) => {
                if s.is_empty() {
                    return Err(Error::EmptyCache);
                }
                Ok(attend_full_width(q, &s.keys, &s.values, n_heads, head_dim, meter))
            }
            CacheState::Grouped { entries, groups } => {
                if entries.is_empty() {
                    return Err(Error::EmptyCache);
                }
                Ok(attend_grouped(q, &entries.keys, &entries.values, n_heads, head_dim, *groups, meter))
            }
            CacheState::Latent { latents } => {
                if latents.rows() == 0 {
                    return Err(Error::EmptyCache);
                }
                let up_k = self.latent_up_k.as_ref().expect("derived at construction");
                let up_v = self.latent_up_v.as_ref().expect("derived at construction");
                Ok(attend_latent_absorbed(q, latents, up_k, up_v, meter))
            }
            CacheState::Evicting(s) => {
                if s.len() == 0 {
                    return Err(Error::EmptyCache);
                }
                let out =
                    attend_full_width(q, &s.entries.keys, &s.entries.values, n_heads, head_dim, meter);
                let mut mass = alloc::vec![0.0f64; s.len()];
                for head in &out.weights {
                    for (m, &w) in mass.iter_mut().zip(head.iter()) {
                        *m += w;
                    }
                }
                s.record_attention(&mass);
                Ok(out)
            }
            CacheState::Snap(s) => {
                if s.len() == 0 {
                    return Err(Error::EmptyCache);
                }
                Ok(attend_full_width(q, &s.entries.keys, &s.entries.values, n_heads, head_dim, meter))
            }
            CacheState::Beacon(s) => {
                let n = s.entry_count();
                if n == 0 {
                    return Err(Error::EmptyCache);
                }
                let mut keys = Matrix::zeros(0, d);
                let mut values = Matrix::zeros(0, d);
                for i in 0..n {
                    keys.push_row(s.key_entry(i));
                    values.push_row(s.value_entry(i));
                }
                Ok(attend_full_width(q, &keys, &values, n_heads, head_dim, meter))
            }
            CacheState::Kivi(s) => {
                if s.len() == 0 {
                    return Err(Error::EmptyCache);
                }
                let (keys, values) = materialize_rows(s.len(), d, |t| s.key_row(t), |t| s.value_row(t));
                Ok(attend_full_width(q, &keys, &values, n_heads, head_dim, meter))
            }
            CacheState::Intact(s) => {
                if s.len() == 0 {
                    return Err(Error::EmptyCache);
                }
                let (keys, values) = materialize_rows(s.len(), d, |t| s.key_row(t), |t| s.value_row(t));
                Ok(attend_full_width(q, &keys, &values, n_heads, head_dim, meter))
            }
            CacheState::Rwkv(s) => {
                let decay = self.rwkv_decay.as_ref().expect("derived at construction");
                let bonus = self.rwkv_bonus.as_ref().expect("derived at construction");
                let context = match s.pending.take() {
                    Some((k, v)) => {
                        let out = s.output_with(&k, &v, bonus, meter);
                        s.fold(&k, &v, decay, meter);
                        out
                    }
                    None => s.output_standing(),
                };
                Ok(AttendOutput { context, weights: Vec::new() })
            }
            CacheState::Recompute { .. } => Err(Error::Config(String::from(
                "recompute-mode policies attend at the session level, not per block",
            ))),
        }
    }

    /// Reference path for latent attention: reconstruct every cached K/V row
    /// through the up-projections, then attend over the materialized rows.
    /// Algebraically identical to the absorbed path used by `attend`.
    pub fn attend_latent_materialized(
        &self,
        state: &CacheState,
        q: &[f64],
        meter: &mut MacMeter,
    ) -> Result<AttendOutput> {
        let latents = match state {
            CacheState::Latent { latents } => latents,
            _ => return Err(Error::Config(String::from("state holds no latents"))),
        };
        if latents.rows() == 0 {
            return Err(Error::EmptyCache);
        }
        let up_k = self.latent_up_k.as_ref().expect("derived at construction");
        let up_v = self.latent_up_v.as_ref().expect("derived at construction");
        let keys = latents.matmul(up_k, meter)?;
        let values = latents.matmul(up_v, meter)?;
        let d = self.model.d_model;
        let scale = 1.0 / libm::sqrt(d as f64);
        let mut scores: Vec<f64> =
            (0..keys.rows()).map(|t| dot(q, keys.row(t), meter) * scale).collect();
        softmax_in_place(&mut scores);
        let mut context = alloc::vec![0.0f64; d];
        for (t, &w) in scores.iter().enumerate() {
            for (c, &v) in context.iter_mut().zip(values.row(t).iter()) {
                *c += w * v;
            }
        }
        meter.add((keys.rows() * d) as u64);
        Ok(AttendOutput { context, weights: alloc::vec![scores] })
    }

    /// Exact byte accounting for one block's state, in the policy's modeled
    /// element widths (element counts times element width, no estimates).
    pub fn memory_bytes(&self, state: &CacheState) -> MemoryUse {
        let bpe = self.model.bytes_per_element as u64;
        let d = self.model.d_model as u64;
        match state {
            CacheState::Native(s) => {
                MemoryUse { headline: s.len() as u64 * 2 * d * bpe, overhead: 0 }
            }
            CacheState::Grouped { entries, .. } => MemoryUse {
                headline: entries.len() as u64 * 2 * entries.keys.cols() as u64 * bpe,
                overhead: 0,
            },
            CacheState::Latent { latents } => MemoryUse {
                headline: latents.rows() as u64 * latents.cols() as u64 * bpe,
                overhead: 0,
            },
            CacheState::Evicting(s) => MemoryUse {
                headline: s.len() as u64 * 2 * d * bpe,
                overhead: s.scores.len() as u64 * bpe,
            },
            CacheState::Snap(s) => MemoryUse {
                headline: s.len() as u64 * 2 * d * bpe,
                // One selection flag byte per retained token.
                overhead: s.len() as u64,
            },
            CacheState::Beacon(s) => MemoryUse {
                headline: s.entry_count() as u64 * 2 * d * bpe,
                overhead: 0,
            },
            CacheState::Kivi(s) => {
                let tokens = s.len() as u64;
                let headline = 2 * packed_code_bytes((tokens * d) as usize, s.bits);
                let mut overhead = s.key_residual.rows() as u64 * d * bpe;
                for g in &s.key_groups {
                    overhead += 2 * g.scales.len() as u64 * bpe;
                }
                for v in &s.value_rows {
                    overhead += 2 * v.scales.len() as u64 * bpe;
                }
                MemoryUse { headline, overhead }
            }
            CacheState::Intact(s) => {
                let tokens = s.len() as u64;
                let headline = 2 * packed_code_bytes((tokens * d) as usize, s.bits);
                let mut overhead = s.pivot_keys.rows() as u64 * 2 * d * bpe;
                for q in s.quant_keys.iter().chain(s.quant_values.iter()) {
                    overhead += 2 * q.scales.len() as u64 * bpe;
                }
                MemoryUse { headline, overhead }
            }
            CacheState::Rwkv(s) => MemoryUse {
                headline: 3 * d * bpe,
                overhead: if s.pending.is_some() { 2 * d * bpe } else { 0 },
            },
            CacheState::Recompute { .. } => MemoryUse { headline: 0, overhead: 0 },
        }
    }
}

/// Latent compression of a layer-normalized hidden state.
pub fn mla_compress(hidden: &[f64], down: &Matrix, meter: &mut MacMeter) -> Result<Vec<f64>> {
    if hidden.len() != down.rows() {
        return Err(Error::Shape {
            op: "mla_compress",
            left: (1, hidden.len()),
            right: (down.rows(), down.cols()),
        });
    }
    let mut c = alloc::vec![0.0f64; down.cols()];
    for (r, &h) in hidden.iter().enumerate() {
        for (j, cv) in c.iter_mut().enumerate() {
            *cv += h * down.at(r, j);
        }
    }
    meter.add((down.rows() * down.cols()) as u64);
    Ok(c)
}

/// Reconstructs one token's K and V from its latent row.
pub fn mla_reconstruct(
    latent: &[f64],
    up_k: &Matrix,
    up_v: &Matrix,
    meter: &mut MacMeter,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let project = |up: &Matrix, meter: &mut MacMeter| -> Result<Vec<f64>> {
        if latent.len() != up.rows() {
            return Err(Error::Shape {
                op: "mla_reconstruct",
                left: (1, latent.len()),
                right: (up.rows(), up.cols()),
            });
        }
        let mut out = alloc::vec![0.0f64; up.cols()];
        for (r, &c) in latent.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += c * up.at(r, j);
            }
        }
        meter.add((up.rows() * up.cols()) as u64);
        Ok(out)
    };
    Ok((project(up_k, meter)?, project(up_v, meter)?))
}

/// Mean-pools per-head key/value slices into `groups` shared slices.
/// Group `g` averages the heads `[g * H / G, (g + 1) * H / G)`.
fn pool_heads(x: &[f64], n_heads: usize, head_dim: usize, groups: usize) -> Vec<f64> {
    let heads_per_group = n_heads / groups;
    let mut out = alloc::vec![0.0f64; groups * head_dim];
    for h in 0..n_heads {
        let g = h * groups / n_heads;
        let src = &x[h * head_dim..(h + 1) * head_dim];
        let dst = &mut out[g * head_dim..(g + 1) * head_dim];
        for (o, &v) in dst.iter_mut().zip(src.iter()) {
            *o += v;
        }
    }
    let inv = 1.0 / heads_per_group as f64;
    for o in &mut out {
        *o *= inv;
    }
    out
}

/// Multi-head attention of one query over full-width key/value rows.
fn attend_full_width(
    q: &[f64],
    keys: &Matrix,
    values: &Matrix,
    n_heads: usize,
    head_dim: usize,
    meter: &mut MacMeter,
) -> AttendOutput {
    let t = keys.rows();
    let scale = 1.0 / libm::sqrt(head_dim as f64);
    let mut context = alloc::vec![0.0f64; n_heads * head_dim];
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let qh = &q[lo..hi];
        let mut scores: Vec<f64> =
            (0..t).map(|i| dot(qh, &keys.row(i)[lo..hi], meter) * scale).collect();
        softmax_in_place(&mut scores);
        let ctx = &mut context[lo..hi];
        for (i, &w) in scores.iter().enumerate() {
            for (c, &v) in ctx.iter_mut().zip(values.row(i)[lo..hi].iter()) {
                *c += w * v;
            }
        }
        meter.add((t * head_dim) as u64);
        weights.push(scores);
    }
    AttendOutput { context, weights }
}

/// Multi-head attention where query head `h` reads the shared K/V slice of
/// group `h * G / H`.
fn attend_grouped(
    q: &[f64],
    keys: &Matrix,
    values: &Matrix,
    n_heads: usize,
    head_dim: usize,
    groups: usize,
    meter: &mut MacMeter,
) -> AttendOutput {
    let t = keys.rows();
    let scale = 1.0 / libm::sqrt(head_dim as f64);
    let mut context = alloc::vec![0.0f64; n_heads * head_dim];
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let g = h * groups / n_heads;
        let glo = g * head_dim;
        let ghi = glo + head_dim;
        let qh = &q[h * head_dim..(h + 1) * head_dim];
        let mut scores: Vec<f64> =
            (0..t).map(|i| dot(qh, &keys.row(i)[glo..ghi], meter) * scale).collect();
        softmax_in_place(&mut scores);
        let ctx = &mut context[h * head_dim..(h + 1) * head_dim];
        for (i, &w) in scores.iter().enumerate() {
            for (c, &v) in ctx.iter_mut().zip(values.row(i)[glo..ghi].iter()) {
                *c += w * v;
            }
        }
        meter.add((t * head_dim) as u64);
        weights.push(scores);
    }
    AttendOutput { context, weights }
}

/// Latent-space attention with the up-projections absorbed into the query
/// and the context: `q (c W_k)^T = (q W_k^T) c^T`, so scores cost
/// `latent_dim` per cached token instead of reconstructing full rows.
fn attend_latent_absorbed(
    q: &[f64],
    latents: &Matrix,
    up_k: &Matrix,
    up_v: &Matrix,
    meter: &mut MacMeter,
) -> AttendOutput {
    let t = latents.rows();
    let d = up_k.cols();
    let latent_dim = up_k.rows();
    let scale = 1.0 / libm::sqrt(d as f64);
    let q_tilde: Vec<f64> = (0..latent_dim).map(|j| dot(q, up_k.row(j), meter)).collect();
    let mut scores: Vec<f64> =
        (0..t).map(|i| dot(&q_tilde, latents.row(i), meter) * scale).collect();
    softmax_in_place(&mut scores);
    let mut latent_ctx = alloc::vec![0.0f64; latent_dim];
    for (i, &w) in scores.iter().enumerate() {
        for (c, &l) in latent_ctx.iter_mut().zip(latents.row(i).iter()) {
            *c += w * l;
        }
    }
    meter.add((t * latent_dim) as u64);
    let mut context = alloc::vec![0.0f64; d];
    for (r, &c) in latent_ctx.iter().enumerate() {
        for (j, o) in context.iter_mut().enumerate() {
            *o += c * up_v.at(r, j);
        }
    }
    meter.add((latent_dim * d) as u64);
    AttendOutput { context, weights: alloc::vec![scores] }
}

fn materialize_rows(
    n: usize,
    width: usize,
    key_row: impl Fn(usize) -> Vec<f64>,
    value_row: impl Fn(usize) -> Vec<f64>,
) -> (Matrix, Matrix) {
    let mut keys = Matrix::zeros(0, width);
    let mut values = Matrix::zeros(0, width);
    for t in 0..n {
        keys.push_row(&key_row(t));
        values.push_row(&value_row(t));
    }
    (keys, values)
}

/// Max-pools the vote vector with a centered width-`pool_width` window, then
/// returns the indices of the `keep` highest pooled scores in chronological
/// order. Ties prefer earlier positions.
pub fn snap_select(votes: &[f64], pool_width: usize, keep: usize) -> Vec<usize> {
    let n = votes.len();
    let half = pool_width / 2;
    let pooled: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            votes[lo..=hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        pooled[b].partial_cmp(&pooled[a]).expect("votes are finite").then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    kept
}
