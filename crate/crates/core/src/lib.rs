//! Core of `s2alloc`, a BIBOP heap allocator that makes use-after-free
//! writes risky for the attacker.
//!
//! Three mechanisms combine:
//!
//! * **Randomized in-slot offsets.** An object starts a random, 16-byte
//!   aligned distance into its slot, so a stale pointer cannot predict where
//!   the fields of the next occupant live.
//! * **Free block canaries.** Every free slot carries a canary: the whole slot
//!   reads zero for blocks smaller than a page, and a keyed MAC of the slot
//!   address sits at a random position in larger ones. Canaries of the chosen
//!   slot and its neighbours are verified on every allocation.
//! * **Random bag layout.** Bags are built from 256-slot sub-bags carved out of
//!   one shared pool, and each sub-bag may receive a guard page.
//!
//! Heap canaries (a truncated CMAC-AES-128 of the slot address placed right
//! after the object) catch contiguous overflows at `free` time.
//!
//! The crate also carries the closed-form model of the attacker/defender game
//! ([`model`]) so protection rates can be computed for any configuration.
//!
//! Everything here is `no_std` + `alloc`; the page source is abstracted by
//! [`os_mem::MemorySource`] with a simulated backend for tests and, behind the
//! `mmap` feature, a real one.

#![no_std]
#![deny(unsafe_op_in_unsafe_fn)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod canary;
pub mod config;
pub mod heap;
pub mod model;
pub mod os_mem;
pub mod rng;

mod fenwick;
mod latch;

pub use canary::{CanaryMac, MacKey};
pub use config::{load_config, AllocatorConfig, ConfigError, SizeClass, SizeClassTable};
pub use heap::{
    AllocError, Allocator, DetectionKind, DetectionReport, Resolution, ThreadHeap,
};
pub use os_mem::{MemError, MemorySource, SimulatedBacking};
pub use rng::Pcg32;
