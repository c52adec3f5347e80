//! Learnable weights: embedding tables plus per-block projection matrices.
//! The flat iteration order here is the canonical order for checkpoints,
//! optimizer state, and gradient checks.

use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::ModelConfig;
use crate::numerics::{Matrix, Rng};

/// Projections of one gated-attention block, each `d_model x d_model`.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// Gate projection; its SiLU modulates the attention output.
    pub w_u: Matrix,
    pub w_o: Matrix,
}

/// All trainable state. The prediction head is weight-tied to `item_emb`,
/// so scoring a candidate item is a dot product against its embedding row.
#[derive(Debug, Clone)]
pub struct Parameters {
    /// `n_items x d_model`.
    pub item_emb: Matrix,
    /// `label_vocab x d_model`; added onto the item embedding per token.
    pub label_emb: Matrix,
    pub blocks: Vec<BlockParams>,
}

impl Parameters {
    /// Seeded uniform init in `[-1/sqrt(d), 1/sqrt(d)]` for every matrix,
    /// drawn in canonical order so a seed pins every weight.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let d = config.d_model;
        let s = 1.0 / libm::sqrt(d as f64);
        let mut rng = Rng::new(seed);
        let item_emb = Matrix::random_uniform(config.n_items, d, -s, s, &mut rng);
        let label_emb = Matrix::random_uniform(config.label_vocab, d, -s, s, &mut rng);
        let blocks = (0..config.n_blocks)
            .map(|_| BlockParams {
                w_q: Matrix::random_uniform(d, d, -s, s, &mut rng),
                w_k: Matrix::random_uniform(d, d, -s, s, &mut rng),
                w_v: Matrix::random_uniform(d, d, -s, s, &mut rng),
                w_u: Matrix::random_uniform(d, d, -s, s, &mut rng),
                w_o: Matrix::random_uniform(d, d, -s, s, &mut rng),
            })
            .collect();
        Self { item_emb, label_emb, blocks }
    }

    /// Same shapes, all zeros; the gradient container.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            item_emb: z(&self.item_emb),
            label_emb: z(&self.label_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    w_q: z(&b.w_q),
                    w_k: z(&b.w_k),
                    w_v: z(&b.w_v),
                    w_u: z(&b.w_u),
                    w_o: z(&b.w_o),
                })
                .collect(),
        }
    }

    /// Canonical order: embeddings, then each block's Q, K, V, U, O.
    pub fn flat(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(2 + 5 * self.blocks.len());
        out.push(&self.item_emb);
        out.push(&self.label_emb);
        for b in &self.blocks {
            out.push(&b.w_q);
            out.push(&b.w_k);
            out.push(&b.w_v);
            out.push(&b.w_u);
            out.push(&b.w_o);
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(2 + 5 * self.blocks.len());
        out.push(&mut self.item_emb);
        out.push(&mut self.label_emb);
        for b in &mut self.blocks {
            out.push(&mut b.w_q);
            out.push(&mut b.w_k);
            out.push(&mut b.w_v);
            out.push(&mut b.w_u);
            out.push(&mut b.w_o);
        }
        out
    }

    /// Matrix names in canonical order, for diagnostics and test reports.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(2 + 5 * self.blocks.len());
        out.push(String::from("item_emb"));
        out.push(String::from("label_emb"));
        for (i, _) in self.blocks.iter().enumerate() {
            for suffix in ["w_q", "w_k", "w_v", "w_u", "w_o"] {
                out.push(alloc::format!("block{i}.{suffix}"));
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.flat().iter().all(|m| m.is_finite())
    }
}
