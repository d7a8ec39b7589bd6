//! Flush-to-zero for subnormal floats.
//!
//! Late in training, gradients and recurrent state pick up subnormal values
//! and x86 GEMM kernels slow down by an order of magnitude on them.

/// Sets FTZ and DAZ for the current thread while alive; restores the
/// previous mode on drop. A no-op off x86_64.
pub struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
#[allow(deprecated)]
impl FlushDenormals {
    const FTZ_DAZ: u32 = 0x8040;

    pub fn new() -> Self {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        // SAFETY: SSE is baseline on x86_64; only the FTZ and DAZ bits change.
        unsafe {
            let saved = _mm_getcsr();
            _mm_setcsr(saved | Self::FTZ_DAZ);
            FlushDenormals { saved }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[allow(deprecated)]
impl Drop for FlushDenormals {
    fn drop(&mut self) {
        // SAFETY: restores the value read in `new`.
        unsafe { std::arch::x86_64::_mm_setcsr(self.saved) }
    }
}

#[cfg(not(target_arch = "x86_64"))]
impl FlushDenormals {
    pub fn new() -> Self {
        FlushDenormals {}
    }
}

impl Default for FlushDenormals {
    fn default() -> Self {
        Self::new()
    }
}
