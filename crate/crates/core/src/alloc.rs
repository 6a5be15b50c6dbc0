//! A counting wrapper around the system allocator.
//!
//! Binaries that want memory figures register it:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: ripple_core::alloc::CountingAllocator = ripple_core::alloc::CountingAllocator;
//! ```
//!
//! Counters are per thread, so a measurement only sees allocations made by
//! the calling thread. Run measured code single-threaded.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

static INSTALLED: AtomicBool = AtomicBool::new(false);

pub struct CountingAllocator;

#[inline]
fn grow(n: usize) {
    // try_with: the thread-local may already be torn down during thread exit.
    let _ = LIVE.try_with(|l| {
        let v = l.get() + n;
        l.set(v);
        let _ = PEAK.try_with(|p| {
            if v > p.get() {
                p.set(v)
            }
        });
    });
}

#[inline]
fn shrink(n: usize) {
    let _ = LIVE.try_with(|l| l.set(l.get().saturating_sub(n)));
}

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        shrink(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size > layout.size() {
                grow(new_size - layout.size());
            } else {
                shrink(layout.size() - new_size);
            }
        }
        p
    }
}

/// Whether [`CountingAllocator`] is the global allocator of this process.
pub fn is_installed() -> bool {
    drop(std::hint::black_box(Box::new(0u8)));
    INSTALLED.load(Ordering::Relaxed)
}

/// Runs `f` and reports the peak bytes it held above what was live before
/// the call, excluding whatever is still live once it returns (its result).
/// `None` when the counting allocator is not installed.
pub fn peak_transient<R>(f: impl FnOnce() -> R) -> (R, Option<usize>) {
    if !is_installed() {
        return (f(), None);
    }
    let before = LIVE.with(|l| l.get());
    PEAK.with(|p| p.set(before));
    let out = f();
    let after = LIVE.with(|l| l.get());
    let peak = PEAK.with(|p| p.get());
    (out, Some(peak.saturating_sub(after.max(before))))
}
