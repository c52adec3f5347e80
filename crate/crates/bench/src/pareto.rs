//! Pareto frontier over the accuracy/compute/memory objective tuple.

/// One candidate: ranking accuracy to maximize, then MACs and cache bytes
/// to minimize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParetoPoint {
    pub gauc: f64,
    pub macs: u64,
    pub bytes: u64,
}

/// `b` dominates `a` when it is at least as good on every objective and
/// strictly better on at least one.
fn dominates(b: &ParetoPoint, a: &ParetoPoint) -> bool {
    let as_good = b.gauc >= a.gauc && b.macs <= a.macs && b.bytes <= a.bytes;
    let strictly = b.gauc > a.gauc || b.macs < a.macs || b.bytes < a.bytes;
    as_good && strictly
}

/// Flags each point that no other point dominates. Duplicated points keep
/// each other on the frontier (neither dominates the other), so the flags
/// are idempotent under duplication.
pub fn pareto_flags(points: &[ParetoPoint]) -> Vec<bool> {
    points
        .iter()
        .map(|a| !points.iter().any(|b| dominates(b, a)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(gauc: f64, macs: u64, bytes: u64) -> ParetoPoint {
        ParetoPoint { gauc, macs, bytes }
    }

    #[test]
    fn single_point_is_on_the_frontier() {
        assert_eq!(pareto_flags(&[p(0.5, 10, 10)]), [true]);
    }

    #[test]
    fn totally_dominated_point_is_flagged_off() {
        assert_eq!(pareto_flags(&[p(0.8, 10, 10), p(0.7, 20, 20)]), [true, false]);
    }

    #[test]
    fn trade_offs_keep_both_points() {
        // Better accuracy but more compute: incomparable.
        assert_eq!(pareto_flags(&[p(0.8, 20, 10), p(0.7, 10, 10)]), [true, true]);
    }

    #[test]
    fn exact_ties_keep_both_points() {
        assert_eq!(pareto_flags(&[p(0.7, 10, 10), p(0.7, 10, 10)]), [true, true]);
    }

    #[test]
    fn duplication_is_idempotent() {
        let pts = [p(0.8, 10, 30), p(0.7, 5, 50), p(0.6, 50, 5), p(0.5, 100, 100)];
        let base = pareto_flags(&pts);
        let doubled: Vec<ParetoPoint> = pts.iter().chain(pts.iter()).copied().collect();
        let twice = pareto_flags(&doubled);
        assert_eq!(&twice[..pts.len()], &base[..]);
        assert_eq!(&twice[pts.len()..], &base[..]);
    }

    #[test]
    fn dominance_needs_a_strict_edge() {
        // Second point equals the first on two axes and is worse on one.
        assert_eq!(pareto_flags(&[p(0.7, 10, 10), p(0.7, 10, 11)]), [true, false]);
    }
}
