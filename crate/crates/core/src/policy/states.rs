//! Concrete cache-state containers for the cached-mode policies. Each state
//! owns the per-block storage for one sequence; the `BlockPolicy` operator
//! drives them through prefill/append/attend.

use alloc::vec::Vec;

use crate::numerics::Matrix;
use crate::policy::quantize::{quantize_lowbit, QuantizedVec};
use crate::policy::rwkv::WkvState;

/// Full-width key/value rows, one per retained token, chronological order.
#[derive(Debug, Clone)]
pub struct FullState {
    pub keys: Matrix,
    pub values: Matrix,
}

impl FullState {
    pub fn new(width: usize) -> Self {
        Self { keys: Matrix::zeros(0, width), values: Matrix::zeros(0, width) }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, k: &[f64], v: &[f64]) {
        self.keys.push_row(k);
        self.values.push_row(v);
    }
}

/// Score-based eviction state: every retained token carries the cumulative
/// attention mass it has received; when over budget the lowest-scoring token
/// outside the protected recent window is dropped.
#[derive(Debug, Clone)]
pub struct EvictState {
    pub entries: FullState,
    pub scores: Vec<f64>,
    pub budget: usize,
    pub recent_window: usize,
}

impl EvictState {
    pub fn new(width: usize, budget: usize, recent_window: usize) -> Self {
        Self { entries: FullState::new(width), scores: Vec::new(), budget, recent_window }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub(crate) fn push_raw(&mut self, k: &[f64], v: &[f64]) {
        self.entries.push(k, v);
        self.scores.push(0.0);
    }

    /// Evicts lowest-cumulative-score tokens (oldest wins ties) until the
    /// budget holds. The newest `recent_window` tokens are never candidates.
    pub(crate) fn evict_to_budget(&mut self) {
        while self.len() > self.budget {
            let protected_from = self.len().saturating_sub(self.recent_window);
            let victim = self.scores[..protected_from]
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).expect("scores are finite"))
                .map(|(i, _)| i)
                .expect("recent window is at most the budget");
            self.entries.keys.remove_row(victim);
            self.entries.values.remove_row(victim);
            self.scores.remove(victim);
        }
    }

    pub fn push(&mut self, k: &[f64], v: &[f64]) {
        self.push_raw(k, v);
        self.evict_to_budget();
    }

    /// Adds the attention mass each retained token just received.
    pub fn record_attention(&mut self, mass_per_entry: &[f64]) {
        for (s, m) in self.scores.iter_mut().zip(mass_per_entry.iter()) {
            *s += m;
        }
    }
}

/// Prefill-anchored state: tokens chosen at prefill time are preserved;
/// post-prefill tokens rotate FIFO within the remaining budget.
#[derive(Debug, Clone)]
pub struct SnapState {
    pub entries: FullState,
    pub prefill_selected: Vec<bool>,
    pub budget: usize,
}

impl SnapState {
    pub fn new(width: usize, budget: usize) -> Self {
        Self { entries: FullState::new(width), prefill_selected: Vec::new(), budget }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn push_selected(&mut self, k: &[f64], v: &[f64]) {
        self.entries.push(k, v);
        self.prefill_selected.push(true);
    }

    /// Appends a post-prefill token. When over budget, evicts the oldest
    /// token that was not selected at prefill (never the one just pushed);
    /// if every older token is prefill-selected, the oldest of those goes.
    pub fn push(&mut self, k: &[f64], v: &[f64]) {
        self.entries.push(k, v);
        self.prefill_selected.push(false);
        if self.len() > self.budget {
            let last = self.len() - 1;
            let victim = (0..last).find(|&i| !self.prefill_selected[i]).unwrap_or(0);
            self.entries.keys.remove_row(victim);
            self.entries.values.remove_row(victim);
            self.prefill_selected.remove(victim);
        }
    }
}

/// Pooled-segment state: tokens buffer until `ratio` of them merge into a
/// single mean-pooled row. Attention runs over merged rows followed by the
/// still-unmerged buffer.
#[derive(Debug, Clone)]
pub struct BeaconState {
    pub merged: FullState,
    pub buffer: FullState,
    pub ratio: usize,
    pub tokens_seen: usize,
}

impl BeaconState {
    pub fn new(width: usize, ratio: usize) -> Self {
        Self {
            merged: FullState::new(width),
            buffer: FullState::new(width),
            ratio,
            tokens_seen: 0,
        }
    }

    pub fn entry_count(&self) -> usize {
        self.merged.len() + self.buffer.len()
    }

    pub fn push(&mut self, k: &[f64], v: &[f64]) {
        self.buffer.push(k, v);
        self.tokens_seen += 1;
        if self.buffer.len() == self.ratio {
            let k_mean = mean_rows(&self.buffer.keys);
            let v_mean = mean_rows(&self.buffer.values);
            self.merged.push(&k_mean, &v_mean);
            let width = self.buffer.keys.cols();
            self.buffer = FullState::new(width);
        }
    }

    /// Entry `i` in chronological order across merged rows then buffer rows.
    pub fn key_entry(&self, i: usize) -> &[f64] {
        if i < self.merged.len() {
            self.merged.keys.row(i)
        } else {
            self.buffer.keys.row(i - self.merged.len())
        }
    }

    pub fn value_entry(&self, i: usize) -> &[f64] {
        if i < self.merged.len() {
            self.merged.values.row(i)
        } else {
            self.buffer.values.row(i - self.merged.len())
        }
    }
}

fn mean_rows(m: &Matrix) -> Vec<f64> {
    let mut out = alloc::vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, &x) in out.iter_mut().zip(m.row(r).iter()) {
            *o += x;
        }
    }
    let inv = 1.0 / m.rows() as f64;
    for o in &mut out {
        *o *= inv;
    }
    out
}

/// Two-sided low-bit state: keys quantized per channel across token groups
/// (with a raw residual until a group fills), values quantized per token
/// across channel groups.
#[derive(Debug, Clone)]
pub struct KiviState {
    /// One `QuantizedVec` per full token group; each holds `group_size`
    /// values per channel, channel-major.
    pub key_groups: Vec<QuantizedVec>,
    /// Keys of the unfilled trailing group, kept raw.
    pub key_residual: Matrix,
    /// One per-token quantized value row.
    pub value_rows: Vec<QuantizedVec>,
    pub bits: u32,
    pub group_size: usize,
    pub width: usize,
}

impl KiviState {
    pub fn new(width: usize, bits: u32, group_size: usize) -> Self {
        Self {
            key_groups: Vec::new(),
            key_residual: Matrix::zeros(0, width),
            value_rows: Vec::new(),
            bits,
            group_size,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.value_rows.len()
    }

    pub fn push(&mut self, k: &[f64], v: &[f64]) {
        self.key_residual.push_row(k);
        if self.key_residual.rows() == self.group_size {
            // Channel-major layout: group_size consecutive values per channel
            // quantize together, giving per-channel scale/zero pairs.
            let mut channel_major = Vec::with_capacity(self.group_size * self.width);
            for c in 0..self.width {
                for t in 0..self.group_size {
                    channel_major.push(self.key_residual.at(t, c));
                }
            }
            let q = quantize_lowbit(&channel_major, self.bits, self.group_size)
                .expect("bits validated at policy construction");
            self.key_groups.push(q);
            self.key_residual = Matrix::zeros(0, self.width);
        }
        let qv = quantize_lowbit(v, self.bits, self.group_size)
            .expect("bits validated at policy construction");
        self.value_rows.push(qv);
    }

    /// Dequantized key row for token `t` (chronological index).
    pub fn key_row(&self, t: usize) -> Vec<f64> {
        let group = t / self.group_size;
        if group < self.key_groups.len() {
            let offset = t % self.group_size;
            let q = &self.key_groups[group];
            (0..self.width).map(|c| q.dequantize_at(c * self.group_size + offset)).collect()
        } else {
            self.key_residual.row(t - self.key_groups.len() * self.group_size).to_vec()
        }
    }

    pub fn value_row(&self, t: usize) -> Vec<f64> {
        self.value_rows[t].dequantize()
    }
}

/// Pivot-protected low-bit state: the first `pivots` tokens stay raw, later
/// tokens are quantized per token with one scale/zero per row.
#[derive(Debug, Clone)]
pub struct IntactState {
    pub pivot_keys: Matrix,
    pub pivot_values: Matrix,
    pub quant_keys: Vec<QuantizedVec>,
    pub quant_values: Vec<QuantizedVec>,
    pub bits: u32,
    pub pivots: usize,
    pub width: usize,
}

impl IntactState {
    pub fn new(width: usize, bits: u32, pivots: usize) -> Self {
        Self {
            pivot_keys: Matrix::zeros(0, width),
            pivot_values: Matrix::zeros(0, width),
            quant_keys: Vec::new(),
            quant_values: Vec::new(),
            bits,
            pivots,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.pivot_keys.rows() + self.quant_keys.len()
    }

    pub fn push(&mut self, k: &[f64], v: &[f64]) {
        if self.pivot_keys.rows() < self.pivots {
            self.pivot_keys.push_row(k);
            self.pivot_values.push_row(v);
        } else {
            let width = self.width;
            self.quant_keys.push(
                quantize_lowbit(k, self.bits, width).expect("bits validated at construction"),
            );
            self.quant_values.push(
                quantize_lowbit(v, self.bits, width).expect("bits validated at construction"),
            );
        }
    }

    pub fn key_row(&self, t: usize) -> Vec<f64> {
        if t < self.pivot_keys.rows() {
            self.pivot_keys.row(t).to_vec()
        } else {
            self.quant_keys[t - self.pivot_keys.rows()].dequantize()
        }
    }

    pub fn value_row(&self, t: usize) -> Vec<f64> {
        if t < self.pivot_values.rows() {
            self.pivot_values.row(t).to_vec()
        } else {
            self.quant_values[t - self.pivot_values.rows()].dequantize()
        }
    }
}

/// Storage for one block under a given policy.
#[derive(Debug, Clone)]
pub enum CacheState {
    /// Uncompressed rows (also used by the eviction-free fast path).
    Native(FullState),
    /// Head-shared rows of width `groups * head_dim`.
    Grouped { entries: FullState, groups: usize },
    /// Low-rank latent rows of width `latent_dim`.
    Latent { latents: Matrix },
    Evicting(EvictState),
    Snap(SnapState),
    Beacon(BeaconState),
    Kivi(KiviState),
    Intact(IntactState),
    Rwkv(WkvState),
    /// Recompute-mode policies hold no per-block tensors, only the count of
    /// tokens the session has retained at input level.
    Recompute { len: usize },
}

impl CacheState {
    /// Number of retained entries (token rows, merged rows, or recurrent
    /// token count) currently backing attention.
    pub fn token_count(&self) -> usize {
        match self {
            CacheState::Native(s) => s.len(),
            CacheState::Grouped { entries, .. } => entries.len(),
            CacheState::Latent { latents } => latents.rows(),
            CacheState::Evicting(s) => s.len(),
            CacheState::Snap(s) => s.len(),
            CacheState::Beacon(s) => s.entry_count(),
            CacheState::Kivi(s) => s.len(),
            CacheState::Intact(s) => s.len(),
            CacheState::Rwkv(s) => s.tokens + s.pending.iter().count(),
            CacheState::Recompute { len } => *len,
        }
    }
}
