/// Counter for multiply-accumulate operations.
///
/// The meter is threaded through compute kernels as a value rather than kept
/// in global state, so concurrent scenarios never share counts. Kernels add
/// exactly the number of scalar multiply-accumulates they perform: a matrix
/// product of an `m x k` by a `k x n` adds `m * k * n`. Elementwise scaling,
/// normalization, and activation functions are not counted, matching the
/// convention that embedding lookups and non-linear operations are excluded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacMeter {
    count: u64,
}

impl MacMeter {
    pub fn new() -> Self {
        Self { count: 0 }
    }

    /// Records `n` multiply-accumulate operations.
    #[inline]
    pub fn add(&mut self, n: u64) {
        self.count += n;
    }

    /// Total multiply-accumulates recorded since construction or last reset.
    #[inline]
    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn reset(&mut self) {
        self.count = 0;
    }
}
