//! Allocation instrumentation.
//!
//! [`CountingAlloc`] wraps the system allocator and tracks live bytes, the
//! peak since the last reset, and the largest single allocation. A binary
//! opts in with
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: gppvae::memtrack::CountingAlloc = gppvae::memtrack::CountingAlloc;
//! ```
//!
//! When it is not installed every probe reports zeros and [`installed`]
//! returns `false`.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static LARGEST: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

pub struct CountingAlloc;

fn record_alloc(size: usize) {
    INSTALLED.store(true, Ordering::Relaxed);
    let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
    PEAK.fetch_max(now, Ordering::Relaxed);
    LARGEST.fetch_max(size, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            record_alloc(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            record_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            record_alloc(new_size);
        }
        p
    }
}

pub fn installed() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// Memory observed between [`Probe::start`] and [`Probe::finish`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemReport {
    /// Peak live bytes above the level at `start`.
    pub peak_extra_bytes: usize,
    /// Largest single allocation in bytes.
    pub largest_alloc_bytes: usize,
}

/// Measures one region. Probes do not nest; starting a probe resets the
/// global peak and largest-allocation counters.
pub struct Probe {
    baseline: usize,
}

impl Probe {
    pub fn start() -> Self {
        let baseline = CURRENT.load(Ordering::Relaxed);
        PEAK.store(baseline, Ordering::Relaxed);
        LARGEST.store(0, Ordering::Relaxed);
        Probe { baseline }
    }

    pub fn finish(self) -> MemReport {
        MemReport {
            peak_extra_bytes: PEAK.load(Ordering::Relaxed).saturating_sub(self.baseline),
            largest_alloc_bytes: LARGEST.load(Ordering::Relaxed),
        }
    }
}
