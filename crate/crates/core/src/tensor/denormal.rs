//! Flush-to-zero mode for hot loops.
//!
//! Gradients of very confident logits shrink into the subnormal range and
//! propagate back through every convolution, where each subnormal operand
//! costs the CPU a microcode assist. A training step on such a graph can be
//! an order of magnitude slower. Inside [`flush_denormals`] subnormal inputs
//! read as zero and subnormal results are written as zero; values that small
//! never move an f32 weight.

/// Runs `f` with subnormal floats flushed to zero on this thread, restoring
/// the previous mode afterwards (also on unwind). A no-op off x86-64.
pub fn flush_denormals<R>(f: impl FnOnce() -> R) -> R {
    let _guard = Guard::enter();
    f()
}

#[cfg(target_arch = "x86_64")]
struct Guard(u32);

#[cfg(target_arch = "x86_64")]
impl Guard {
    const FTZ: u32 = 1 << 15;
    const DAZ: u32 = 1 << 6;

    fn enter() -> Self {
        let old = mxcsr::get();
        mxcsr::set(old | Self::FTZ | Self::DAZ);
        Self(old)
    }
}

#[cfg(target_arch = "x86_64")]
impl Drop for Guard {
    fn drop(&mut self) {
        mxcsr::set(self.0);
    }
}

#[cfg(target_arch = "x86_64")]
mod mxcsr {
    use std::arch::asm;

    pub fn get() -> u32 {
        let mut v = 0u32;
        // SAFETY: stores the control register into a live local.
        unsafe { asm!("stmxcsr [{}]", in(reg) &mut v, options(nostack, preserves_flags)) };
        v
    }

    pub fn set(v: u32) {
        // SAFETY: only rounding/exception/denormal bits read back from `get`
        // are ever written.
        unsafe { asm!("ldmxcsr [{}]", in(reg) &v, options(nostack, preserves_flags, readonly)) };
    }
}

#[cfg(not(target_arch = "x86_64"))]
struct Guard;

#[cfg(not(target_arch = "x86_64"))]
impl Guard {
    fn enter() -> Self {
        Guard
    }
}
