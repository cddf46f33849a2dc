//! Per-thread matmul FLOP counter.
//!
//! Every forward matmul adds `2·m·k·n`. Backward kernels are not counted.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add_matmul(m: usize, k: usize, n: usize) {
    let f = 2 * (m as u64) * (k as u64) * (n as u64);
    COUNTER.with(|c| c.set(c.get() + f));
}

/// Current count for this thread.
pub fn read() -> u64 {
    COUNTER.with(|c| c.get())
}

pub fn reset() {
    COUNTER.with(|c| c.set(0));
}

/// Runs `f` and returns its result with the matmul FLOPs it performed.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = read();
    let out = f();
    (out, read() - before)
}
