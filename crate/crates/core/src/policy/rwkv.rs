//! Constant-size recurrent replacement for attention. Each channel keeps a
//! decayed weighted sum (numerator `p`, denominator `q`) of past values in a
//! max-shifted exponential representation, so arbitrarily long sequences
//! stream without overflow. The current token receives a one-step bonus `u`
//! instead of the standing decay `w`.

use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::MacMeter;

/// Per-channel streaming state. `m` tracks the running exponent maximum so
/// `p` and `q` stay scaled near 1.
#[derive(Debug, Clone)]
pub struct WkvState {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub m: Vec<f64>,
    /// Token accepted by `append` but not yet folded by `attend`.
    pub pending: Option<(Vec<f64>, Vec<f64>)>,
    pub tokens: usize,
}

impl WkvState {
    pub fn new(channels: usize) -> Self {
        Self {
            p: vec![0.0; channels],
            q: vec![0.0; channels],
            m: vec![f64::NEG_INFINITY; channels],
            pending: None,
            tokens: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.p.len()
    }

    /// Absorbs one token into the recurrence without emitting an output
    /// (used when prefilling a history).
    pub fn fold(&mut self, k: &[f64], v: &[f64], decay: &[f64], meter: &mut MacMeter) {
        for c in 0..self.p.len() {
            let m_decayed = self.m[c] - decay[c];
            let m_new = if m_decayed >= k[c] { m_decayed } else { k[c] };
            let a = libm::exp(m_decayed - m_new);
            let b = libm::exp(k[c] - m_new);
            self.p[c] = self.p[c] * a + b * v[c];
            self.q[c] = self.q[c] * a + b;
            self.m[c] = m_new;
        }
        // Three multiplies per channel: p*a, b*v, q*a.
        meter.add(3 * self.p.len() as u64);
        self.tokens += 1;
    }

    /// Output for the current token (bonus-weighted) without mutating the
    /// state: `(p e^{m-m'} + e^{u+k} v) / (q e^{m-m'} + e^{u+k})` with
    /// `m' = max(m, u + k)`.
    pub fn output_with(&self, k: &[f64], v: &[f64], bonus: &[f64], meter: &mut MacMeter) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.p.len());
        for c in 0..self.p.len() {
            let bonus_exp = bonus[c] + k[c];
            let m_new = if self.m[c] >= bonus_exp { self.m[c] } else { bonus_exp };
            let a = libm::exp(self.m[c] - m_new);
            let b = libm::exp(bonus_exp - m_new);
            out.push((self.p[c] * a + b * v[c]) / (self.q[c] * a + b));
        }
        meter.add(3 * self.p.len() as u64);
        out
    }

    /// Output for tokens already folded, with no current-token bonus term.
    /// Returns zeros for a state that has absorbed nothing.
    pub fn output_standing(&self) -> Vec<f64> {
        self.p
            .iter()
            .zip(self.q.iter())
            .map(|(&p, &q)| if q == 0.0 { 0.0 } else { p / q })
            .collect()
    }
}

/// One full streaming step: emit the bonus-weighted output for token
/// `(k, v)`, then fold the token into the state under decay `w`.
pub fn rwkv_step(
    state: &mut WkvState,
    k: &[f64],
    v: &[f64],
    decay: &[f64],
    bonus: &[f64],
    meter: &mut MacMeter,
) -> Vec<f64> {
    let out = state.output_with(k, v, bonus, meter);
    state.fold(k, v, decay, meter);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    /// O(L^2) reference computed directly from the definition, one channel:
    /// out_t = (sum_{i<t} e^{-(t-1-i) w + k_i} v_i + e^{u + k_t} v_t)
    ///       / (sum_{i<t} e^{-(t-1-i) w + k_i}     + e^{u + k_t}).
    fn wkv_oracle(ks: &[f64], vs: &[f64], w: f64, u: f64) -> Vec<f64> {
        let mut outs = Vec::new();
        for t in 0..ks.len() {
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for i in 0..t {
                let weight = libm::exp(-((t - 1 - i) as f64) * w + ks[i]);
                num += weight * vs[i];
                den += weight;
            }
            let bonus = libm::exp(u + ks[t]);
            outs.push((num + bonus * vs[t]) / (den + bonus));
        }
        outs
    }

    #[test]
    fn streaming_matches_quadratic_oracle() {
        let mut rng = Rng::new(41);
        for trial in 0..20 {
            let len = rng.below(64) as usize + 1;
            let w = rng.uniform_in(0.05, 2.0);
            let u = rng.uniform_in(-1.0, 1.0);
            let ks: Vec<f64> = (0..len).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
            let vs: Vec<f64> = (0..len).map(|_| rng.uniform_in(-2.0, 2.0)).collect();

            let want = wkv_oracle(&ks, &vs, w, u);
            let mut state = WkvState::new(1);
            let mut meter = MacMeter::new();
            for t in 0..len {
                let got = rwkv_step(&mut state, &[ks[t]], &[vs[t]], &[w], &[u], &mut meter);
                let rel = (got[0] - want[t]).abs() / want[t].abs().max(1e-12);
                assert!(rel <= 1e-5, "trial {trial} t {t}: got {} want {}", got[0], want[t]);
            }
        }
    }

    #[test]
    fn first_token_output_is_its_value() {
        let mut state = WkvState::new(2);
        let mut meter = MacMeter::new();
        let out = rwkv_step(&mut state, &[0.3, -1.0], &[2.0, -3.0], &[0.5, 0.5], &[0.1, 0.2], &mut meter);
        assert!((out[0] - 2.0).abs() < 1e-12);
        assert!((out[1] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn state_size_is_constant_in_sequence_length() {
        let mut state = WkvState::new(4);
        let mut meter = MacMeter::new();
        let before = (state.p.len(), state.q.len(), state.m.len());
        for t in 0..100 {
            let x = t as f64 / 10.0;
            rwkv_step(&mut state, &[x; 4], &[x; 4], &[0.3; 4], &[0.1; 4], &mut meter);
        }
        assert_eq!((state.p.len(), state.q.len(), state.m.len()), before);
        assert_eq!(state.tokens, 100);
    }

    #[test]
    fn survives_large_magnitude_keys() {
        // Without max-tracking, e^{400} overflows; the shifted form must not.
        let ks = [300.0, 400.0, -350.0, 380.0];
        let vs = [1.0, 2.0, 3.0, 4.0];
        let mut state = WkvState::new(1);
        let mut meter = MacMeter::new();
        for t in 0..ks.len() {
            let out = rwkv_step(&mut state, &[ks[t]], &[vs[t]], &[0.5], &[0.1], &mut meter);
            assert!(out[0].is_finite(), "t {t} produced {}", out[0]);
        }
    }

    #[test]
    fn standing_output_of_empty_state_is_zero() {
        let state = WkvState::new(3);
        assert_eq!(state.output_standing(), vec![0.0; 3]);
    }
}
