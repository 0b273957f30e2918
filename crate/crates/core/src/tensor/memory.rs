//! Allocation accounting for tensor buffers.
//!
//! Every [`Tensor`](super::Tensor) reports its buffer sizes here on creation
//! and release. Counters are thread-local, so concurrent trials on separate
//! threads never see each other's allocations.

use std::cell::Cell;

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn record_alloc(bytes: usize) {
    CURRENT.with(|c| {
        let now = c.get() + bytes;
        c.set(now);
        PEAK.with(|p| {
            if now > p.get() {
                p.set(now);
            }
        });
    });
}

pub(crate) fn record_free(bytes: usize) {
    CURRENT.with(|c| c.set(c.get().saturating_sub(bytes)));
}

/// Bytes currently held by live tensors on this thread.
pub fn current_bytes() -> usize {
    CURRENT.with(Cell::get)
}

/// Result of [`measure`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryUsage {
    /// Highest tracked level reached during the call, relative to the level on entry.
    pub peak_bytes: usize,
    /// Tracked bytes still alive when the call returned (typically the output).
    pub retained_bytes: usize,
}

impl MemoryUsage {
    /// Peak working set that was neither an input nor part of the returned value.
    pub fn transient_bytes(&self) -> usize {
        self.peak_bytes.saturating_sub(self.retained_bytes)
    }
}

/// Runs `f` and reports the tensor memory it allocated.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, MemoryUsage) {
    let base = current_bytes();
    let saved_peak = PEAK.with(|p| p.replace(base));
    let out = f();
    let peak = PEAK.with(Cell::get);
    let end = current_bytes();
    PEAK.with(|p| p.set(saved_peak.max(peak)));
    (
        out,
        MemoryUsage {
            peak_bytes: peak - base,
            retained_bytes: end.saturating_sub(base),
        },
    )
}
