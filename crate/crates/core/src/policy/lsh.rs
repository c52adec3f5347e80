//! Random-rotation locality-sensitive hashing for bucketed attention.
//! A vector is projected through a fixed random rotation and assigned the
//! bucket of its strongest (signed) direction, so nearby vectors tend to
//! share buckets and a vector and its negation land half the bucket count
//! apart.

use crate::error::{Error, Result};
use crate::numerics::{dot, MacMeter, Matrix};

/// Assigns `x` to one of `2 * rotation.cols()` buckets: the argmax over the
/// concatenated projections `[x R; -x R]`. Ties resolve to the lowest index.
pub fn lsh_bucket(x: &[f64], rotation: &Matrix, meter: &mut MacMeter) -> Result<usize> {
    if x.len() != rotation.rows() {
        return Err(Error::Shape {
            op: "lsh_bucket",
            left: (1, x.len()),
            right: (rotation.rows(), rotation.cols()),
        });
    }
    let half = rotation.cols();
    let mut best = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    for j in 0..half {
        let col: alloc::vec::Vec<f64> = (0..rotation.rows()).map(|r| rotation.at(r, j)).collect();
        let proj = dot(x, &col, meter);
        if proj > best_val {
            best_val = proj;
            best = j;
        }
        if -proj > best_val {
            best_val = -proj;
            best = j + half;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn negated_vectors_land_half_the_buckets_apart() {
        let mut rng = Rng::new(31);
        let n_buckets = 8;
        let rotation = Matrix::random_uniform(16, n_buckets / 2, -1.0, 1.0, &mut rng);
        let mut meter = MacMeter::new();
        for _ in 0..50 {
            let x: alloc::vec::Vec<f64> = (0..16).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let neg: alloc::vec::Vec<f64> = x.iter().map(|v| -v).collect();
            let a = lsh_bucket(&x, &rotation, &mut meter).unwrap();
            let b = lsh_bucket(&neg, &rotation, &mut meter).unwrap();
            assert_eq!((a + n_buckets / 2) % n_buckets, b);
        }
    }

    #[test]
    fn buckets_cover_the_full_range() {
        let mut rng = Rng::new(33);
        let rotation = Matrix::random_uniform(8, 4, -1.0, 1.0, &mut rng);
        let mut meter = MacMeter::new();
        let mut seen = [false; 8];
        for _ in 0..500 {
            let x: alloc::vec::Vec<f64> = (0..8).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let b = lsh_bucket(&x, &rotation, &mut meter).unwrap();
            assert!(b < 8);
            seen[b] = true;
        }
        assert!(seen.iter().all(|&s| s), "500 random draws should hit all 8 buckets");
    }

    #[test]
    fn bucket_assignment_is_deterministic() {
        let mut rng = Rng::new(35);
        let rotation = Matrix::random_uniform(8, 4, -1.0, 1.0, &mut rng);
        let x: alloc::vec::Vec<f64> = (0..8).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mut meter = MacMeter::new();
        let a = lsh_bucket(&x, &rotation, &mut meter).unwrap();
        let b = lsh_bucket(&x, &rotation, &mut meter).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let rotation = Matrix::zeros(8, 4);
        let mut meter = MacMeter::new();
        assert!(lsh_bucket(&[0.0; 7], &rotation, &mut meter).is_err());
    }
}
