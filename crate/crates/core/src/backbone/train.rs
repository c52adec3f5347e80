//! Adam training of the gated-attention backbone on the next-interaction
//! objective.
//!
//! Position `t` scores the item at `t+1` with the tied embedding head; the
//! per-user loss is the mean binary cross-entropy over those predictions,
//! and a batch averages the per-user losses. The backward pass is written
//! out by hand (residual stream, output gate, per-head softmax attention,
//! layer norm, tied embeddings) so it can be checked against central finite
//! differences.

use alloc::vec::Vec;

use crate::backbone::forward::{
    forward_full, layer_norm_rows, predict_ctr, sigmoid, silu, silu_prime, LAYER_NORM_EPS,
};
use crate::backbone::params::Parameters;
use crate::backbone::ModelConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::LOGLOSS_EPS;
use crate::numerics::{MacMeter, Matrix, Rng};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_users: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 3, lr: 5e-4, batch_users: 8, seed: 1 }
    }
}

/// Everything the backward pass needs from one block's forward computation.
struct BlockCache {
    input: Matrix,
    normed: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    u: Matrix,
    /// Row-softmax causal attention weights, one `L x L` matrix per head.
    weights: Vec<Matrix>,
    /// Concatenated per-head attention outputs (`L x d`).
    context: Matrix,
}

/// Full-causal forward pass retaining intermediates. Mirrors the inference
/// path operation for operation so the two produce identical hiddens.
fn train_forward(
    tokens: &Matrix,
    params: &Parameters,
    model: &ModelConfig,
) -> Result<(Vec<BlockCache>, Matrix)> {
    let d = model.d_model;
    let dh = model.head_dim();
    let len = tokens.rows();
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut scratch = MacMeter::new();
    let mut x = tokens.clone();
    let mut caches = Vec::with_capacity(model.n_blocks);

    for block in &params.blocks {
        let normed = layer_norm_rows(&x);
        let q = normed.matmul(&block.w_q, &mut scratch)?;
        let k = normed.matmul(&block.w_k, &mut scratch)?;
        let v = normed.matmul(&block.w_v, &mut scratch)?;
        let u = normed.matmul(&block.w_u, &mut scratch)?;

        let mut weights = Vec::with_capacity(model.n_heads);
        let mut context = Matrix::zeros(len, d);
        for h in 0..model.n_heads {
            let off = h * dh;
            let mut w = Matrix::zeros(len, len);
            for i in 0..len {
                let qi = &q.row(i)[off..off + dh];
                let row = w.row_mut(i);
                for (j, slot) in row.iter_mut().enumerate() {
                    if j <= i {
                        let kj = &k.row(j)[off..off + dh];
                        let mut s = 0.0;
                        for (a, b) in qi.iter().zip(kj.iter()) {
                            s += a * b;
                        }
                        *slot = s * scale;
                    } else {
                        *slot = f64::NEG_INFINITY;
                    }
                }
                crate::numerics::softmax_in_place(row);
            }
            for i in 0..len {
                for j in 0..=i {
                    let wij = w.at(i, j);
                    if wij == 0.0 {
                        continue;
                    }
                    let vj = &v.row(j)[off..off + dh];
                    let out = &mut context.row_mut(i)[off..off + dh];
                    for (o, &vv) in out.iter_mut().zip(vj.iter()) {
                        *o += wij * vv;
                    }
                }
            }
            weights.push(w);
        }

        let mut gate = context.clone();
        for (g, &uv) in gate.data_mut().iter_mut().zip(u.data().iter()) {
            *g *= silu(uv);
        }
        let proj = gate.matmul(&block.w_o, &mut scratch)?;
        let mut next = x.clone();
        next.add_assign(&proj)?;

        caches.push(BlockCache { input: x, normed, q, k, v, u, weights, context });
        x = next;
    }
    Ok((caches, x))
}

/// Mean next-interaction BCE for one sequence. Needs at least two
/// interactions; shorter sequences carry no prediction targets.
pub fn sequence_loss(
    params: &Parameters,
    model: &ModelConfig,
    items: &[u32],
    labels: &[u8],
) -> Result<f64> {
    if items.len() != labels.len() {
        return Err(Error::Data(alloc::format!(
            "items/labels length mismatch: {} vs {}",
            items.len(),
            labels.len()
        )));
    }
    if items.len() < 2 {
        return Err(Error::Data(alloc::string::String::from(
            "sequence too short for next-interaction loss",
        )));
    }
    let mut scratch = MacMeter::new();
    let tokens = crate::backbone::embed_sequence(items, labels, params, model)?;
    let trace = forward_full(&tokens, params, model, &mut scratch)?;
    let count = items.len() - 1;
    let mut loss = 0.0;
    for t in 0..count {
        let p = predict_ctr(trace.hidden.row(t), items[t + 1], params, &mut scratch)?;
        let p = p.clamp(LOGLOSS_EPS, 1.0 - LOGLOSS_EPS);
        let y = labels[t + 1] as f64;
        loss -= y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p);
    }
    Ok(loss / count as f64)
}

/// Loss plus analytic gradients for one sequence, for external gradient
/// verification and custom optimizers.
pub fn sequence_gradients(
    params: &Parameters,
    model: &ModelConfig,
    items: &[u32],
    labels: &[u8],
) -> Result<(f64, Parameters)> {
    if items.len() != labels.len() {
        return Err(Error::Data(alloc::format!(
            "items/labels length mismatch: {} vs {}",
            items.len(),
            labels.len()
        )));
    }
    if items.len() < 2 {
        return Err(Error::Data(alloc::string::String::from(
            "sequence too short for next-interaction loss",
        )));
    }
    let mut grads = params.zeros_like();
    let loss = sequence_backward(items, labels, params, model, &mut grads, 1.0)?;
    Ok((loss, grads))
}

/// Computes the loss for one sequence and accumulates `scale` times its
/// parameter gradients into `grads`.
fn sequence_backward(
    items: &[u32],
    labels: &[u8],
    params: &Parameters,
    model: &ModelConfig,
    grads: &mut Parameters,
    scale: f64,
) -> Result<f64> {
    let d = model.d_model;
    let dh = model.head_dim();
    let len = items.len();
    let count = len - 1;
    let att_scale = 1.0 / libm::sqrt(dh as f64);
    let mut scratch = MacMeter::new();

    let tokens = crate::backbone::embed_sequence(items, labels, params, model)?;
    let (caches, hidden) = train_forward(&tokens, params, model)?;

    // Scoring head: z_t = h_t . e[item_{t+1}], p = sigmoid(z).
    let mut loss = 0.0;
    let mut d_hidden = Matrix::zeros(len, d);
    for t in 0..count {
        let cand = items[t + 1] as usize;
        let h = hidden.row(t);
        let e = params.item_emb.row(cand);
        let mut z = 0.0;
        for (a, b) in h.iter().zip(e.iter()) {
            z += a * b;
        }
        let p = sigmoid(z);
        let clamped = p.clamp(LOGLOSS_EPS, 1.0 - LOGLOSS_EPS);
        let y = labels[t + 1] as f64;
        loss -= y * libm::log(clamped) + (1.0 - y) * libm::log(1.0 - clamped);
        let dz = (p - y) / count as f64;
        let dh_row = d_hidden.row_mut(t);
        for (slot, &ev) in dh_row.iter_mut().zip(e.iter()) {
            *slot += dz * ev;
        }
        let ge = grads.item_emb.row_mut(cand);
        for (slot, &hv) in ge.iter_mut().zip(h.iter()) {
            *slot += scale * dz * hv;
        }
    }
    loss /= count as f64;

    // Blocks, last to first.
    let mut d_out = d_hidden;
    for (b, cache) in caches.iter().enumerate().rev() {
        let block = &params.blocks[b];
        let gblock = &mut grads.blocks[b];

        // out = input + gate . w_o, gate = silu(u) * context.
        let mut gate = cache.context.clone();
        for (g, &uv) in gate.data_mut().iter_mut().zip(cache.u.data().iter()) {
            *g *= silu(uv);
        }
        let mut gw_o = gate.transposed().matmul(&d_out, &mut scratch)?;
        gw_o.scale(scale);
        gblock.w_o.add_assign(&gw_o)?;
        let d_gate = d_out.matmul(&block.w_o.transposed(), &mut scratch)?;

        let mut d_context = d_gate.clone();
        for (g, &uv) in d_context.data_mut().iter_mut().zip(cache.u.data().iter()) {
            *g *= silu(uv);
        }
        let mut d_u = d_gate;
        for ((g, &av), &uv) in d_u
            .data_mut()
            .iter_mut()
            .zip(cache.context.data().iter())
            .zip(cache.u.data().iter())
        {
            *g *= av * silu_prime(uv);
        }

        // Attention: context_h = weights_h . v_h.
        let mut d_q = Matrix::zeros(len, d);
        let mut d_k = Matrix::zeros(len, d);
        let mut d_v = Matrix::zeros(len, d);
        for h in 0..model.n_heads {
            let off = h * dh;
            let w = &cache.weights[h];
            let d_ctx_h = copy_cols(&d_context, off, dh);
            let v_h = copy_cols(&cache.v, off, dh);
            let d_w = d_ctx_h.matmul(&v_h.transposed(), &mut scratch)?;
            let d_v_h = w.transposed().matmul(&d_ctx_h, &mut scratch)?;
            add_cols(&mut d_v, off, &d_v_h);

            // Row softmax backward: ds_j = w_j (dw_j - sum_k dw_k w_k).
            let mut d_score = Matrix::zeros(len, len);
            for i in 0..len {
                let wr = w.row(i);
                let dwr = d_w.row(i);
                let mut inner = 0.0;
                for (wv, dv) in wr.iter().zip(dwr.iter()) {
                    inner += wv * dv;
                }
                let out = d_score.row_mut(i);
                for ((slot, &wv), &dv) in out.iter_mut().zip(wr.iter()).zip(dwr.iter()) {
                    *slot = wv * (dv - inner);
                }
            }

            let q_h = copy_cols(&cache.q, off, dh);
            let k_h = copy_cols(&cache.k, off, dh);
            let mut d_q_h = d_score.matmul(&k_h, &mut scratch)?;
            d_q_h.scale(att_scale);
            add_cols(&mut d_q, off, &d_q_h);
            let mut d_k_h = d_score.transposed().matmul(&q_h, &mut scratch)?;
            d_k_h.scale(att_scale);
            add_cols(&mut d_k, off, &d_k_h);
        }

        // Projections from the normed input.
        let normed_t = cache.normed.transposed();
        for (w_grad, d_proj) in [
            (&mut gblock.w_q, &d_q),
            (&mut gblock.w_k, &d_k),
            (&mut gblock.w_v, &d_v),
            (&mut gblock.w_u, &d_u),
        ] {
            let mut g = normed_t.matmul(d_proj, &mut scratch)?;
            g.scale(scale);
            w_grad.add_assign(&g)?;
        }
        let mut d_normed = d_q.matmul(&block.w_q.transposed(), &mut scratch)?;
        d_normed.add_assign(&d_k.matmul(&block.w_k.transposed(), &mut scratch)?)?;
        d_normed.add_assign(&d_v.matmul(&block.w_v.transposed(), &mut scratch)?)?;
        d_normed.add_assign(&d_u.matmul(&block.w_u.transposed(), &mut scratch)?)?;

        // Layer norm backward, then the residual skip.
        let mut d_in = layer_norm_backward(&cache.input, &cache.normed, &d_normed);
        d_in.add_assign(&d_out)?;
        d_out = d_in;
    }

    // Embedding table rows (additive item + label embedding).
    for t in 0..len {
        let g = d_out.row(t);
        let ge = grads.item_emb.row_mut(items[t] as usize);
        for (slot, &gv) in ge.iter_mut().zip(g.iter()) {
            *slot += scale * gv;
        }
        let gl = grads.label_emb.row_mut(labels[t] as usize);
        for (slot, &gv) in gl.iter_mut().zip(g.iter()) {
            *slot += scale * gv;
        }
    }
    Ok(loss)
}

/// dx = (dn - mean(dn) - n * mean(dn * n)) / s, rowwise.
fn layer_norm_backward(input: &Matrix, normed: &Matrix, d_normed: &Matrix) -> Matrix {
    let d = input.cols();
    let mut out = Matrix::zeros(input.rows(), d);
    for r in 0..input.rows() {
        let x = input.row(r);
        let n = normed.row(r);
        let dn = d_normed.row(r);
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = libm::sqrt(var + LAYER_NORM_EPS);
        let dn_mean = dn.iter().sum::<f64>() / d as f64;
        let dn_n_mean = dn.iter().zip(n.iter()).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
        let o = out.row_mut(r);
        for ((slot, (&dnv, &nv)), _) in o.iter_mut().zip(dn.iter().zip(n.iter())).zip(x.iter()) {
            *slot = (dnv - dn_mean - nv * dn_n_mean) / s;
        }
    }
    out
}

fn copy_cols(m: &Matrix, off: usize, width: usize) -> Matrix {
    Matrix::from_fn(m.rows(), width, |r, c| m.at(r, off + c))
}

fn add_cols(dst: &mut Matrix, off: usize, src: &Matrix) {
    for r in 0..src.rows() {
        let row = dst.row_mut(r);
        for (c, &v) in src.row(r).iter().enumerate() {
            row[off + c] += v;
        }
    }
}

struct AdamState {
    m: Parameters,
    v: Parameters,
    t: u64,
}

fn adam_step(params: &mut Parameters, grads: &Parameters, state: &mut AdamState, lr: f64) {
    state.t += 1;
    let bc1 = 1.0 - libm::pow(ADAM_BETA1, state.t as f64);
    let bc2 = 1.0 - libm::pow(ADAM_BETA2, state.t as f64);
    let mut ps = params.flat_mut();
    let mut ms = state.m.flat_mut();
    let mut vs = state.v.flat_mut();
    let gs = grads.flat();
    for i in 0..ps.len() {
        let p = ps[i].data_mut();
        let m = ms[i].data_mut();
        let v = vs[i].data_mut();
        let g = gs[i].data();
        for j in 0..p.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPS);
        }
    }
}

/// Trains from a fresh deterministic initialization; `cfg.seed` drives both
/// the initialization and the per-epoch shuffles, so retraining with the
/// same inputs reproduces parameters bit for bit.
pub fn train(dataset: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<Parameters> {
    model.validate()?;
    if cfg.batch_users == 0 {
        return Err(Error::Config(alloc::string::String::from("batch_users must be positive")));
    }
    let mut params = Parameters::init(model, cfg.seed);
    for seq in &dataset.sequences {
        if seq.len() > model.max_seq_len {
            return Err(Error::Data(alloc::format!(
                "sequence of length {} exceeds max_seq_len {}",
                seq.len(),
                model.max_seq_len
            )));
        }
        if let Some(&bad) = seq.items.iter().find(|&&i| i as usize >= model.n_items) {
            return Err(Error::Data(alloc::format!(
                "item id {bad} outside model vocabulary {}",
                model.n_items
            )));
        }
    }
    let trainable: Vec<usize> = (0..dataset.sequences.len())
        .filter(|&i| dataset.sequences[i].len() >= 2)
        .collect();
    if cfg.epochs == 0 || trainable.is_empty() {
        return Ok(params);
    }

    let mut adam = AdamState { m: params.zeros_like(), v: params.zeros_like(), t: 0 };
    for epoch in 0..cfg.epochs {
        let mut order = trainable.clone();
        let mut rng = Rng::new(cfg.seed).derive(epoch as u64 + 1);
        for i in (1..order.len()).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            order.swap(i, j);
        }
        for (step, batch) in order.chunks(cfg.batch_users).enumerate() {
            let mut grads = params.zeros_like();
            let user_scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &ui in batch {
                let loss = sequence_backward(
                    &dataset.sequences[ui].items,
                    &dataset.sequences[ui].labels,
                    &params,
                    model,
                    &mut grads,
                    user_scale,
                )?;
                batch_loss += loss * user_scale;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            adam_step(&mut params, &grads, &mut adam, cfg.lr);
            if !params.all_finite() {
                return Err(Error::Diverged { epoch, step });
            }
        }
    }
    Ok(params)
}
