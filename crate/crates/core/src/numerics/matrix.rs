use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{MacMeter, Rng};

/// Dense row-major matrix of f64 values.
///
/// The invariant `data.len() == rows * cols` holds for every constructed
/// value; `from_vec` is the only fallible constructor and enforces it.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape { op: "from_vec", left: (rows, cols), right: (data.len(), 1) });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Matrix with entries drawn uniformly from `[lo, hi)` in row-major order.
    pub fn random_uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.uniform_in(lo, hi))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies of the first `n` rows.
    pub fn top_rows(&self, n: usize) -> Matrix {
        assert!(n <= self.rows);
        Matrix { rows: n, cols: self.cols, data: self.data[..n * self.cols].to_vec() }
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn remove_row(&mut self, r: usize) {
        assert!(r < self.rows);
        self.data.drain(r * self.cols..(r + 1) * self.cols);
        self.rows -= 1;
    }

    /// Matrix product. Adds exactly `m * k * n` multiply-accumulates to the
    /// meter for an `m x k` by `k x n` product.
    pub fn matmul(&self, rhs: &Matrix, meter: &mut MacMeter) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: (self.rows, self.cols),
                right: (rhs.rows, rhs.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = rhs.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        meter.add((self.rows * self.cols * rhs.cols) as u64);
        Ok(out)
    }

    pub fn transposed(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.at(c, r))
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape {
                op: "add_assign",
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            });
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with metering; both slices must have equal length.
#[inline]
pub fn dot(a: &[f64], b: &[f64], meter: &mut MacMeter) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    meter.add(a.len() as u64);
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// Numerically stable in-place softmax over a slice. Entries equal to
/// `f64::NEG_INFINITY` receive weight zero; at least one entry must be finite.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(max.is_finite(), "softmax over fully masked slice");
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent reference product: plain i-j-k loop with scalar indexing.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.at(i, k) * b.at(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn from_vec_enforces_length() {
        assert!(Matrix::from_vec(2, 3, vec![0.0; 6]).is_ok());
        assert!(matches!(
            Matrix::from_vec(2, 3, vec![0.0; 5]),
            Err(Error::Shape { op: "from_vec", .. })
        ));
    }

    #[test]
    fn matmul_matches_reference_on_random_shapes() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let m = rng.below(8) as usize + 1;
            let k = rng.below(8) as usize + 1;
            let n = rng.below(8) as usize + 1;
            let a = Matrix::random_uniform(m, k, -2.0, 2.0, &mut rng);
            let b = Matrix::random_uniform(k, n, -2.0, 2.0, &mut rng);
            let mut meter = MacMeter::new();
            let got = a.matmul(&b, &mut meter).unwrap();
            let want = matmul_oracle(&a, &b);
            for (g, w) in got.data().iter().zip(want.data().iter()) {
                assert!((g - w).abs() <= 1e-12, "got {g}, want {w}");
            }
            assert_eq!(meter.count(), (m * k * n) as u64);
        }
    }

    #[test]
    fn matmul_by_identity_is_identity() {
        let mut rng = Rng::new(5);
        let a = Matrix::random_uniform(4, 4, -1.0, 1.0, &mut rng);
        let mut meter = MacMeter::new();
        let out = a.matmul(&Matrix::identity(4), &mut meter).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let mut meter = MacMeter::new();
        assert!(matches!(a.matmul(&b, &mut meter), Err(Error::Shape { op: "matmul", .. })));
        assert_eq!(meter.count(), 0);
    }

    #[test]
    fn meter_counts_are_exact_for_chained_products() {
        let mut meter = MacMeter::new();
        let a = Matrix::zeros(3, 5);
        let b = Matrix::zeros(5, 2);
        let c = a.matmul(&b, &mut meter).unwrap();
        let d = Matrix::zeros(2, 7);
        let _ = c.matmul(&d, &mut meter).unwrap();
        assert_eq!(meter.count(), (3 * 5 * 2 + 3 * 2 * 7) as u64);
    }

    #[test]
    fn transpose_round_trips() {
        let mut rng = Rng::new(13);
        let a = Matrix::random_uniform(3, 7, -1.0, 1.0, &mut rng);
        assert_eq!(a.transposed().transposed(), a);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_survive_large_magnitudes() {
        let mut xs = vec![1000.0, 1000.1, 999.9];
        softmax_in_place(&mut xs);
        let sum: f64 = xs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(xs.iter().all(|x| x.is_finite() && *x > 0.0));
    }

    #[test]
    fn softmax_respects_neg_infinity_mask() {
        let mut xs = vec![0.3, f64::NEG_INFINITY, 0.1];
        softmax_in_place(&mut xs);
        assert_eq!(xs[1], 0.0);
        assert!((xs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn operations_on_finite_inputs_stay_finite() {
        let mut rng = Rng::new(23);
        let a = Matrix::random_uniform(6, 6, -100.0, 100.0, &mut rng);
        let b = Matrix::random_uniform(6, 6, -100.0, 100.0, &mut rng);
        let mut meter = MacMeter::new();
        let prod = a.matmul(&b, &mut meter).unwrap();
        assert!(prod.is_finite());
        let mut sum = prod.clone();
        sum.add_assign(&b).unwrap();
        assert!(sum.is_finite());
    }
}
