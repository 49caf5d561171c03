//! Per-thread heap accounting.
//!
//! Install [`CountingAlloc`] as the global allocator of a binary or test,
//! then wrap the code of interest in [`measure`]:
//!
//! ```
//! use tinyreptile::instrument::{measure, CountingAlloc};
//!
//! #[global_allocator]
//! static ALLOC: CountingAlloc = CountingAlloc;
//!
//! fn main() {
//!     let (v, stats) = measure(|| vec![0u8; 4096]);
//!     assert_eq!(v.len(), 4096);
//!     assert!(stats.peak_bytes >= 4096);
//! }
//! ```
//!
//! Only allocations made by the measuring thread are counted.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

static INSTALLED: AtomicBool = AtomicBool::new(false);

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static LIVE: Cell<i64> = const { Cell::new(0) };
    static PEAK: Cell<i64> = const { Cell::new(0) };
    static TOTAL: Cell<u64> = const { Cell::new(0) };
    static COUNT: Cell<u64> = const { Cell::new(0) };
}

/// System allocator that records the calling thread's live bytes while a
/// [`measure`] call is running on it.
#[derive(Debug, Default, Clone, Copy)]
pub struct CountingAlloc;

fn grow(bytes: usize) {
    let _ = ACTIVE.try_with(|active| {
        if active.get() {
            let live = LIVE.with(|l| {
                let v = l.get() + bytes as i64;
                l.set(v);
                v
            });
            PEAK.with(|p| p.set(p.get().max(live)));
            TOTAL.with(|t| t.set(t.get() + bytes as u64));
            COUNT.with(|c| c.set(c.get() + 1));
        }
    });
}

fn shrink(bytes: usize) {
    let _ = ACTIVE.try_with(|active| {
        if active.get() {
            LIVE.with(|l| l.set(l.get() - bytes as i64));
        }
    });
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = System.alloc(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        shrink(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            // Both blocks may be live while the contents move.
            grow(new_size);
            shrink(layout.size());
        }
        p
    }
}

/// Heap traffic of one measured call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AllocStats {
    /// Largest number of bytes live at once, counted from the start of the
    /// call.
    pub peak_bytes: u64,
    /// Bytes still live when the call returned (the result included).
    pub retained_bytes: i64,
    pub allocated_bytes: u64,
    pub allocations: u64,
}

/// Whether [`CountingAlloc`] is the global allocator of this process.
pub fn is_installed() -> bool {
    drop(Box::new(0u8));
    INSTALLED.load(Ordering::Relaxed)
}

/// Runs `f` and reports the heap activity it caused on this thread. Returns
/// zeroed statistics when [`CountingAlloc`] is not installed.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, AllocStats) {
    let outer = ACTIVE.with(|a| a.replace(true));
    let saved = (
        LIVE.with(|l| l.replace(0)),
        PEAK.with(|p| p.replace(0)),
        TOTAL.with(|t| t.replace(0)),
        COUNT.with(|c| c.replace(0)),
    );
    let out = f();
    let stats = AllocStats {
        peak_bytes: PEAK.with(|p| p.get()).max(0) as u64,
        retained_bytes: LIVE.with(|l| l.get()),
        allocated_bytes: TOTAL.with(|t| t.get()),
        allocations: COUNT.with(|c| c.get()),
    };
    // Fold the inner call into an enclosing measurement.
    LIVE.with(|l| l.set(saved.0 + stats.retained_bytes));
    PEAK.with(|p| p.set(saved.1.max(saved.0 + stats.peak_bytes as i64)));
    TOTAL.with(|t| t.set(saved.2 + stats.allocated_bytes));
    COUNT.with(|c| c.set(saved.3 + stats.allocations));
    ACTIVE.with(|a| a.set(outer));
    (out, stats)
}
