//! Structured causal attention masks for the recompute-mode policies.

use alloc::vec;
use alloc::vec::Vec;

/// Causal sliding-window mask with global anchor tokens: position `t` may
/// attend to the last `window` positions (itself included) and to the first
/// `n_global` positions. Entry `[i][j]` says whether query `i` attends key `j`.
pub fn longformer_mask(len: usize, window: usize, n_global: usize) -> Vec<Vec<bool>> {
    let mut mask = vec![vec![false; len]; len];
    for (i, row) in mask.iter_mut().enumerate() {
        let lo = (i + 1).saturating_sub(window);
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = j <= i && (j >= lo || j < n_global);
        }
    }
    mask
}

/// Causal same-bucket mask: query `i` attends key `j` when `j <= i` and the
/// two tokens hash to the same bucket. The diagonal is always allowed so
/// every token attends at least to itself.
pub fn bucket_mask(buckets: &[usize]) -> Vec<Vec<bool>> {
    let len = buckets.len();
    let mut mask = vec![vec![false; len]; len];
    for (i, row) in mask.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = j <= i && (buckets[i] == buckets[j] || i == j);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    fn allowed(row: &[bool]) -> Vec<usize> {
        row.iter().enumerate().filter(|&(_, &a)| a).map(|(j, _)| j).collect()
    }

    #[test]
    fn window_plus_global_hand_example() {
        // Five positions, window 2, one global anchor: the last row sees the
        // anchor plus its two most recent positions.
        let mask = longformer_mask(5, 2, 1);
        assert_eq!(allowed(&mask[4]), [0, 3, 4]);
        assert_eq!(allowed(&mask[1]), [0, 1]);
        assert_eq!(allowed(&mask[0]), [0]);
    }

    #[test]
    fn wide_window_degenerates_to_full_causal() {
        let mask = longformer_mask(6, 6, 0);
        for (i, row) in mask.iter().enumerate() {
            assert_eq!(allowed(row), (0..=i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn mask_is_never_anticausal() {
        let mask = longformer_mask(10, 3, 2);
        for (i, row) in mask.iter().enumerate() {
            for (j, &a) in row.iter().enumerate() {
                if j > i {
                    assert!(!a);
                }
            }
        }
    }

    #[test]
    fn bucket_mask_restricts_to_matching_buckets() {
        let buckets = [0usize, 1, 0, 1, 0];
        let mask = bucket_mask(&buckets);
        assert_eq!(allowed(&mask[4]), [0, 2, 4]);
        assert_eq!(allowed(&mask[3]), [1, 3]);
    }

    #[test]
    fn every_token_attends_to_itself() {
        let buckets = [0usize, 1, 2, 3];
        let mask = bucket_mask(&buckets);
        for (i, row) in mask.iter().enumerate() {
            assert!(row[i]);
        }
    }
}
