//! Process-level tuning for training runs.

use std::sync::Once;

/// Keeps freed heap memory mapped instead of returning it to the OS.
///
/// Training allocates and frees the same large activation buffers every
/// step; with glibc's defaults each of them is a fresh `mmap`, and the page
/// faults on first touch cost more than the arithmetic at the stem layers.
/// Idempotent; a no-op on platforms without glibc.
pub fn retain_heap_memory() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds; it is called once,
        // before the allocations it affects.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
            libc::mallopt(libc::M_TOP_PAD, 256 << 20);
        }
    });
}
