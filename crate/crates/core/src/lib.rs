//! Sequential multi-dimensional self-supervised learning for multimodal
//! trajectories.

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod models;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Keep glibc from returning large training buffers to the OS after every
/// step. Each PT step allocates and frees tens of megabytes, and with the
/// default thresholds each of those becomes a fresh `mmap` and page faults.
/// No effect on other platforms.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}
