//! Keyed, address-bound canaries.
//!
//! Both heap canaries and free block canaries are prefixes of
//! CMAC-AES-128 over the slot address. The address is encoded as 16 bytes:
//! its little-endian 64-bit value followed by eight zero bytes, which makes the
//! message exactly one complete CMAC block.

mod aes;
#[cfg(target_arch = "x86_64")]
mod aesni;

use core::fmt;

use aes::{Block, RoundKeys};

/// Longest canary that can be taken from one MAC tag.
pub const MAX_CANARY_LEN: usize = 16;

/// 128-bit secret MAC key.
#[derive(Clone, PartialEq, Eq)]
pub struct MacKey([u8; 16]);

impl MacKey {
    pub const fn from_bytes(bytes: [u8; 16]) -> Self {
        MacKey(bytes)
    }

    /// Deterministic key for seeded test runs. Not secret.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = crate::rng::Pcg32::new(seed, 0x006b_6579);
        let mut bytes = [0u8; 16];
        for chunk in bytes.chunks_mut(4) {
            chunk.copy_from_slice(&rng.next_u32().to_le_bytes());
        }
        MacKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Debug for MacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MacKey(..)")
    }
}

/// Which block cipher implementation a [`CanaryMac`] uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    Software,
    /// x86_64 AES-NI; only constructed when the CPU supports it.
    AesNi,
}

impl Backend {
    /// Fastest backend available on this CPU.
    pub fn detect() -> Backend {
        #[cfg(target_arch = "x86_64")]
        if aesni::available() {
            return Backend::AesNi;
        }
        Backend::Software
    }

    pub fn is_available(self) -> bool {
        match self {
            Backend::Software => true,
            #[cfg(target_arch = "x86_64")]
            Backend::AesNi => aesni::available(),
            #[cfg(not(target_arch = "x86_64"))]
            Backend::AesNi => false,
        }
    }
}

/// A canary value: up to 16 bytes of MAC output.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Canary {
    bytes: [u8; MAX_CANARY_LEN],
    len: u8,
}

impl Canary {
    pub fn from_slice(bytes: &[u8]) -> Self {
        assert!(bytes.len() <= MAX_CANARY_LEN);
        let mut out = [0u8; MAX_CANARY_LEN];
        out[..bytes.len()].copy_from_slice(bytes);
        Canary {
            bytes: out,
            len: bytes.len() as u8,
        }
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len <= MAX_CANARY_LEN);
        Canary {
            bytes: [0; MAX_CANARY_LEN],
            len: len as u8,
        }
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.bytes[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl fmt::Debug for Canary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(self, f)
    }
}

impl fmt::LowerHex for Canary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.as_slice() {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// CMAC-AES-128 with precomputed round keys and subkeys.
#[derive(Clone)]
pub struct CanaryMac {
    backend: Backend,
    round_keys: RoundKeys,
    k1: Block,
    k2: Block,
}

impl fmt::Debug for CanaryMac {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CanaryMac")
            .field("backend", &self.backend)
            .finish_non_exhaustive()
    }
}

fn double(block: &Block) -> Block {
    let mut out = [0u8; 16];
    let mut carry = 0u8;
    for i in (0..16).rev() {
        out[i] = (block[i] << 1) | carry;
        carry = block[i] >> 7;
    }
    if carry != 0 {
        out[15] ^= 0x87;
    }
    out
}

fn xor_into(dst: &mut Block, src: &[u8]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d ^= s;
    }
}

impl CanaryMac {
    pub fn new(key: &MacKey) -> Self {
        Self::with_backend(key, Backend::detect())
    }

    /// # Panics
    ///
    /// If `backend` is not supported by this CPU.
    pub fn with_backend(key: &MacKey, backend: Backend) -> Self {
        assert!(backend.is_available(), "{backend:?} not supported here");
        let round_keys = aes::expand_key(&key.0);
        let mut mac = CanaryMac {
            backend,
            round_keys,
            k1: [0; 16],
            k2: [0; 16],
        };
        let l = mac.encrypt(&[0u8; 16]);
        mac.k1 = double(&l);
        mac.k2 = double(&mac.k1);
        mac
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    #[inline]
    fn encrypt(&self, block: &Block) -> Block {
        match self.backend {
            Backend::Software => aes::encrypt_block(&self.round_keys, block),
            #[cfg(target_arch = "x86_64")]
            // SAFETY: `with_backend` only accepts AesNi when the CPU has it.
            Backend::AesNi => unsafe { aesni::encrypt_block(&self.round_keys, block) },
            #[cfg(not(target_arch = "x86_64"))]
            Backend::AesNi => unreachable!(),
        }
    }

    /// Full CMAC tag over an arbitrary message.
    pub fn tag(&self, message: &[u8]) -> [u8; 16] {
        let blocks = message.len().div_ceil(16).max(1);
        let mut state = [0u8; 16];
        for chunk in message.chunks(16).take(blocks - 1) {
            xor_into(&mut state, chunk);
            state = self.encrypt(&state);
        }
        let tail = &message[(blocks - 1) * 16..];
        let mut last = [0u8; 16];
        last[..tail.len()].copy_from_slice(tail);
        if tail.len() == 16 {
            xor_into(&mut last, &self.k1);
        } else {
            last[tail.len()] = 0x80;
            xor_into(&mut last, &self.k2);
        }
        xor_into(&mut state, &last);
        self.encrypt(&state)
    }

    /// Tag of the address encoding; one block cipher call.
    #[inline]
    pub fn address_tag(&self, address: u64) -> [u8; 16] {
        let mut block = self.k1;
        xor_into(&mut block, &address.to_le_bytes());
        self.encrypt(&block)
    }

    /// First `len` bytes of the address tag.
    ///
    /// # Panics
    ///
    /// If `len` is zero or above 16.
    #[inline]
    pub fn compute_canary(&self, address: u64, len: usize) -> Canary {
        assert!((1..=MAX_CANARY_LEN).contains(&len), "canary length {len}");
        Canary::from_slice(&self.address_tag(address)[..len])
    }
}
