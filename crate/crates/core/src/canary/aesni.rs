//! AES-NI block encryption for x86_64.

use core::arch::x86_64::{
    __m128i, _mm_aesenc_si128, _mm_aesenclast_si128, _mm_loadu_si128, _mm_storeu_si128,
    _mm_xor_si128,
};

use super::aes::{Block, RoundKeys};

pub(crate) fn available() -> bool {
    // CPUID.01H:ECX.AES[bit 25]
    #[allow(unused_unsafe)]
    let leaf = unsafe { core::arch::x86_64::__cpuid(1) };
    leaf.ecx & (1 << 25) != 0
}

/// # Safety
///
/// The CPU must support AES-NI (see [`available`]).
#[target_feature(enable = "aes")]
pub(crate) unsafe fn encrypt_block(keys: &RoundKeys, block: &Block) -> Block {
    // SAFETY: unaligned loads/stores of 16-byte arrays; AES support is the
    // caller's obligation.
    unsafe {
        let load = |b: &Block| _mm_loadu_si128(b.as_ptr() as *const __m128i);
        let mut state = _mm_xor_si128(load(block), load(&keys[0]));
        for rk in &keys[1..10] {
            state = _mm_aesenc_si128(state, load(rk));
        }
        state = _mm_aesenclast_si128(state, load(&keys[10]));
        let mut out = [0u8; 16];
        _mm_storeu_si128(out.as_mut_ptr() as *mut __m128i, state);
        out
    }
}
