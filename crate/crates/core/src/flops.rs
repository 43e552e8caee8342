//! Exact multiply-add counters for the feature-weight contraction.
//!
//! Each forward kernel adds the number of `φ·w` products it performed to a
//! thread-local tally. Counting happens once per example row, not per
//! product, so the overhead is negligible next to the arithmetic itself.

use std::cell::Cell;

thread_local! {
    static MADDS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn add(n: u64) {
    MADDS.with(|c| c.set(c.get() + n));
}

/// Zeroes this thread's counter.
pub fn reset() {
    MADDS.with(|c| c.set(0));
}

/// Current count on this thread.
pub fn count() -> u64 {
    MADDS.with(Cell::get)
}

/// Runs `f` and returns its result together with the multiply-adds it performed.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = count();
    let out = f();
    (out, count() - before)
}
