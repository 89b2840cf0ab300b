//! The allocator: bags of 256-slot sub-bags, randomized placement, heap
//! canaries, free block canaries and guard pages.
//!
//! An [`Allocator`] owns the shared pool and the huge-block list. Each thread
//! allocates through its own [`ThreadHeap`], which holds one bag per size
//! class and a private generator. Frees may come from any thread: the owning
//! bag is found through the pool's address map and mutated under its latch.
//!
//! Slot layout while taken (offsets relative to the slot base):
//!
//! ```text
//! 0 ........ p ........ p+size ...... p+size+iota ...... b
//!  (unused)   object data   heap canary    (unused)
//! ```
//!
//! While free, a slot smaller than a page must read all zero. A larger slot
//! carries `c` MAC bytes at a random position recorded in the offset table.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use crate::canary::{Canary, CanaryMac, MAX_CANARY_LEN};
use crate::config::{
    AllocatorConfig, ConfigError, SizeClass, SizeClassTable, ALIGNMENT, NUM_CLASSES,
    SLOTS_PER_SUBBAG,
};
use crate::fenwick::Fenwick;
use crate::latch::Latch;
use crate::os_mem::{round_up, MemError, MemorySource};
use crate::rng::Pcg32;

/// Which check caught a tampering attempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DetectionKind {
    FbcTamper,
    HeapCanaryTamper,
    DoubleFree,
    InvalidFree,
}

impl DetectionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectionKind::FbcTamper => "FBC_TAMPER",
            DetectionKind::HeapCanaryTamper => "HEAP_CANARY_TAMPER",
            DetectionKind::DoubleFree => "DOUBLE_FREE",
            DetectionKind::InvalidFree => "INVALID_FREE",
        }
    }
}

impl fmt::Display for DetectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A tamper event. `slot` is the slot (or huge block) base; for frees of
/// unknown addresses it is the pointer itself and `class` is zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetectionReport {
    pub kind: DetectionKind,
    pub slot: usize,
    pub class: usize,
    /// Pointer passed to `free`/`realloc`, when one was involved.
    pub pointer: Option<usize>,
    /// Position in the slot where the compared bytes start.
    pub position: usize,
    pub expected: Canary,
    pub found: Canary,
}

impl fmt::Display for DetectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "s2alloc: {} slot={:#x} class={} detail=",
            self.kind, self.slot, self.class
        )?;
        match self.kind {
            DetectionKind::FbcTamper | DetectionKind::HeapCanaryTamper => write!(
                f,
                "offset={},expected={:x},found={:x}",
                self.position, self.expected, self.found
            ),
            DetectionKind::DoubleFree => write!(
                f,
                "pointer={:#x},slot-already-free",
                self.pointer.unwrap_or(0)
            ),
            DetectionKind::InvalidFree if self.class == 0 => write!(
                f,
                "pointer={:#x},not-owned",
                self.pointer.unwrap_or(0)
            ),
            DetectionKind::InvalidFree => write!(
                f,
                "pointer={:#x},expected-offset={}",
                self.pointer.unwrap_or(0),
                self.position
            ),
        }
    }
}

impl DetectionReport {
    fn free_error(kind: DetectionKind, slot: usize, class: usize, pointer: usize, position: usize) -> Self {
        DetectionReport {
            kind,
            slot,
            class,
            pointer: Some(pointer),
            position,
            expected: Canary::zeros(0),
            found: Canary::zeros(0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AllocError {
    OutOfMemory,
    /// `calloc` element count times size overflowed.
    Overflow,
    Detected(DetectionReport),
    /// The memory source refused an access the allocator believed valid.
    Memory(MemError),
}

impl From<MemError> for AllocError {
    fn from(e: MemError) -> Self {
        match e {
            MemError::OutOfMemory => AllocError::OutOfMemory,
            other => AllocError::Memory(other),
        }
    }
}

impl From<DetectionReport> for AllocError {
    fn from(r: DetectionReport) -> Self {
        AllocError::Detected(r)
    }
}

impl fmt::Display for AllocError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AllocError::OutOfMemory => f.write_str("out of memory"),
            AllocError::Overflow => f.write_str("size computation overflowed"),
            AllocError::Detected(r) => r.fmt(f),
            AllocError::Memory(e) => write!(f, "memory source error: {e}"),
        }
    }
}

/// Where an address lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    Slot {
        subbag_base: usize,
        slot_index: usize,
        slot_base: usize,
        block_size: usize,
    },
    Huge {
        base: usize,
        len: usize,
    },
    Unknown,
}

/// Snapshot of one slot's metadata.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotInfo {
    pub slot_base: usize,
    pub block_size: usize,
    pub index: usize,
    pub taken: bool,
    /// Slot overlaps the sub-bag's guard page.
    pub guarded: bool,
    /// RIO offset when taken, FBC position when free.
    pub offset: usize,
    /// Requested size when taken.
    pub size: usize,
}

/// Outcome of checking a free slot's canary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FbcCheck {
    Intact,
    Tampered(DetectionReport),
    /// The address is not a free slot.
    NotFree,
}

type Bits = [u64; SLOTS_PER_SUBBAG / 64];

#[inline]
fn bit(bits: &Bits, i: usize) -> bool {
    bits[i / 64] >> (i % 64) & 1 == 1
}

#[inline]
fn set_bit(bits: &mut Bits, i: usize, on: bool) {
    if on {
        bits[i / 64] |= 1 << (i % 64);
    } else {
        bits[i / 64] &= !(1 << (i % 64));
    }
}

/// Index of the `k`-th clear bit.
fn select_clear(bits: &Bits, mut k: u64) -> usize {
    for (w, &word) in bits.iter().enumerate() {
        let free = u64::from(word.count_zeros());
        if k < free {
            let mut inv = !word;
            for _ in 0..k {
                inv &= inv - 1;
            }
            return w * 64 + inv.trailing_zeros() as usize;
        }
        k -= free;
    }
    unreachable!("rank beyond free slots")
}

struct SubBag {
    base: usize,
    /// 1 = taken or unusable.
    bitmap: Bits,
    guard: Bits,
    /// Large free slots never freed since creation; their FBC bytes are zero.
    pristine: Bits,
    offsets: [u16; SLOTS_PER_SUBBAG],
    sizes: [u16; SLOTS_PER_SUBBAG],
    free: u16,
}

struct BagState {
    subbags: Vec<SubBag>,
    free_index: Fenwick,
    total_free: usize,
}

struct BagShared {
    class: usize,
    block: usize,
    state: Latch<BagState>,
}

struct MapEntry {
    bag: Arc<BagShared>,
    index: usize,
    len: usize,
    /// First slot; past the region start when a guard page leads.
    slots: usize,
}

struct HugeRecord {
    len: usize,
    requested: usize,
}

struct PoolState {
    chunks: Vec<(usize, usize)>,
    cursor: usize,
    end: usize,
    subbags: BTreeMap<usize, MapEntry>,
    huge: BTreeMap<usize, HugeRecord>,
}

enum Owner {
    Slot(Arc<BagShared>, usize, usize),
    Huge(usize, usize),
    Unknown,
}

/// Process-wide allocator state: configuration, MAC, page source, pool.
pub struct Allocator<M: MemorySource> {
    cfg: AllocatorConfig,
    table: SizeClassTable,
    mac: CanaryMac,
    mem: M,
    pool: Latch<PoolState>,
    seed_base: u64,
    heaps: AtomicU64,
    subbags_created: AtomicUsize,
    subbags_guarded: AtomicUsize,
}

impl<M: MemorySource> fmt::Debug for Allocator<M> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Allocator")
            .field("cfg", &self.cfg)
            .field("subbags", &self.subbag_count())
            .finish_non_exhaustive()
    }
}

impl<M: MemorySource> Allocator<M> {
    /// `entropy` seeds the per-thread generators unless `cfg.seed` is set.
    pub fn new(cfg: AllocatorConfig, mem: M, entropy: u64) -> Result<Self, ConfigError> {
        cfg.validate()?;
        if mem.page_size() != cfg.page_size {
            return Err(ConfigError {
                key: "page_size".into(),
                value: alloc::format!("{}", cfg.page_size),
                reason: "does not match the memory source",
            });
        }
        let mac = CanaryMac::new(&cfg.mac_key);
        Ok(Allocator {
            seed_base: cfg.seed.unwrap_or(entropy),
            table: SizeClassTable::new(),
            mac,
            mem,
            cfg,
            pool: Latch::new(PoolState {
                chunks: Vec::new(),
                cursor: 0,
                end: 0,
                subbags: BTreeMap::new(),
                huge: BTreeMap::new(),
            }),
            heaps: AtomicU64::new(0),
            subbags_created: AtomicUsize::new(0),
            subbags_guarded: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &AllocatorConfig {
        &self.cfg
    }

    pub fn size_classes(&self) -> &SizeClassTable {
        &self.table
    }

    pub fn memory(&self) -> &M {
        &self.mem
    }

    pub fn mac(&self) -> &CanaryMac {
        &self.mac
    }

    /// A new per-thread heap. Heaps are numbered in creation order; with a
    /// fixed seed, heap `i` always gets the same generator stream.
    pub fn thread_heap(&self) -> ThreadHeap<'_, M> {
        let id = self.heaps.fetch_add(1, Ordering::Relaxed);
        let bags = (0..NUM_CLASSES)
            .map(|class| {
                Arc::new(BagShared {
                    class,
                    block: self.table.block_size(class),
                    state: Latch::new(BagState {
                        subbags: Vec::new(),
                        free_index: Fenwick::new(),
                        total_free: 0,
                    }),
                })
            })
            .collect();
        ThreadHeap {
            alloc: self,
            bags,
            rng: Pcg32::new(self.seed_base, id),
        }
    }

    pub fn subbag_count(&self) -> usize {
        self.subbags_created.load(Ordering::Relaxed)
    }

    pub fn guarded_subbag_count(&self) -> usize {
        self.subbags_guarded.load(Ordering::Relaxed)
    }

    pub fn huge_count(&self) -> usize {
        self.pool.lock().huge.len()
    }

    fn owner(&self, addr: usize) -> Owner {
        let pool = self.pool.lock();
        if let Some((&base, rec)) = pool.huge.range(..=addr).next_back() {
            if addr < base + rec.len {
                return Owner::Huge(base, rec.len);
            }
        }
        if let Some((&base, e)) = pool.subbags.range(..=addr).next_back() {
            if addr >= e.slots && addr < base + e.len {
                return Owner::Slot(e.bag.clone(), e.index, e.slots);
            }
        }
        Owner::Unknown
    }

    pub fn resolve(&self, addr: usize) -> Resolution {
        match self.owner(addr) {
            Owner::Huge(base, len) => Resolution::Huge { base, len },
            Owner::Slot(bag, _, base) => {
                let slot_index = (addr - base) / bag.block;
                if slot_index >= SLOTS_PER_SUBBAG {
                    return Resolution::Unknown;
                }
                Resolution::Slot {
                    subbag_base: base,
                    slot_index,
                    slot_base: base + slot_index * bag.block,
                    block_size: bag.block,
                }
            }
            Owner::Unknown => Resolution::Unknown,
        }
    }

    /// Metadata of the slot containing `addr`.
    pub fn slot_info(&self, addr: usize) -> Option<SlotInfo> {
        let Owner::Slot(bag, index, base) = self.owner(addr) else {
            return None;
        };
        let slot = (addr - base) / bag.block;
        let st = bag.state.lock();
        let sb = st.subbags.get(index).filter(|_| slot < SLOTS_PER_SUBBAG)?;
        let taken = bit(&sb.bitmap, slot);
        Some(SlotInfo {
            slot_base: base + slot * bag.block,
            block_size: bag.block,
            index: slot,
            taken,
            guarded: bit(&sb.guard, slot),
            offset: sb.offsets[slot] as usize,
            size: if taken { sb.sizes[slot] as usize } else { 0 },
        })
    }

    /// Checks the canary of the free slot containing `addr`.
    pub fn check_fbc(&self, addr: usize) -> Result<FbcCheck, AllocError> {
        let Owner::Slot(bag, index, base) = self.owner(addr) else {
            return Ok(FbcCheck::NotFree);
        };
        let slot = (addr - base) / bag.block;
        let st = bag.state.lock();
        match st.subbags.get(index) {
            Some(sb) if slot < SLOTS_PER_SUBBAG && !bit(&sb.bitmap, slot) => {
                Ok(match self.fbc_status(sb, slot, bag.block)? {
                    None => FbcCheck::Intact,
                    Some(r) => FbcCheck::Tampered(r),
                })
            }
            _ => Ok(FbcCheck::NotFree),
        }
    }

    /// Usable bytes at `addr`: the requested size for slots, the mapping
    /// length for huge blocks.
    pub fn usable_size(&self, addr: usize) -> Option<usize> {
        match self.owner(addr) {
            Owner::Huge(base, len) => (addr == base).then_some(len),
            Owner::Slot(..) => self
                .slot_info(addr)
                .filter(|i| i.taken && !i.guarded && i.slot_base + i.offset == addr)
                .map(|i| i.size),
            Owner::Unknown => None,
        }
    }

    /// Fault injection for self-tests: toggles the bitmap bit of the slot
    /// holding `addr` while keeping free counts consistent. Returns the new
    /// bit value.
    #[doc(hidden)]
    pub fn debug_flip_bitmap(&self, addr: usize) -> Option<bool> {
        let Owner::Slot(bag, index, base) = self.owner(addr) else {
            return None;
        };
        let slot = (addr - base) / bag.block;
        let mut guard = bag.state.lock();
        let st = &mut *guard;
        let sb = st.subbags.get_mut(index).filter(|_| slot < SLOTS_PER_SUBBAG)?;
        let now = !bit(&sb.bitmap, slot);
        set_bit(&mut sb.bitmap, slot, now);
        let delta: i64 = if now { -1 } else { 1 };
        sb.free = (i64::from(sb.free) + delta) as u16;
        st.free_index.add(index, delta);
        st.total_free = (st.total_free as i64 + delta) as usize;
        Some(now)
    }

    fn is_large(&self, block: usize) -> bool {
        block >= self.cfg.page_size
    }

    /// First mismatch of a free slot's canary, if any.
    fn fbc_status(&self, sb: &SubBag, slot: usize, block: usize) -> Result<Option<DetectionReport>, MemError> {
        let slot_base = sb.base + slot * block;
        let report = |position, expected, found| DetectionReport {
            kind: DetectionKind::FbcTamper,
            slot: slot_base,
            class: block,
            pointer: None,
            position,
            expected,
            found,
        };
        if !self.is_large(block) {
            // SAFETY: the slot lies inside this sub-bag's reserved region and
            // is not on its guard page (only free slots are checked).
            if unsafe { self.mem.is_zero(slot_base, block)? } {
                return Ok(None);
            }
            let mut buf = [0u8; 16];
            for chunk_start in (0..block).step_by(16) {
                // SAFETY: as above; `block` is a multiple of 16.
                unsafe { self.mem.read(slot_base + chunk_start, &mut buf)? };
                if let Some(i) = buf.iter().position(|&b| b != 0) {
                    let n = (16 - i).min(MAX_CANARY_LEN);
                    return Ok(Some(report(
                        chunk_start + i,
                        Canary::zeros(n),
                        Canary::from_slice(&buf[i..i + n]),
                    )));
                }
            }
            return Ok(None);
        }
        let c = self.cfg.fbc_len;
        let f = sb.offsets[slot] as usize;
        let expected = if bit(&sb.pristine, slot) {
            Canary::zeros(c)
        } else {
            self.mac.compute_canary(slot_base as u64, c)
        };
        let mut found = [0u8; MAX_CANARY_LEN];
        // SAFETY: f + c <= block, inside the slot.
        unsafe { self.mem.read(slot_base + f, &mut found[..c])? };
        Ok((expected.as_slice() != &found[..c])
            .then(|| report(f, expected, Canary::from_slice(&found[..c]))))
    }

    /// Takes `len` bytes of pool address space and maps it to the sub-bag.
    fn carve(&self, len: usize, lead: usize, bag: &Arc<BagShared>, index: usize) -> Result<usize, AllocError> {
        let mut pool = self.pool.lock();
        let base = if len > self.cfg.pool_reservation {
            let base = self.mem.reserve(len)?;
            pool.chunks.push((base, len));
            base
        } else {
            if pool.end - pool.cursor < len {
                let base = self.mem.reserve(self.cfg.pool_reservation)?;
                pool.chunks.push((base, self.cfg.pool_reservation));
                pool.cursor = base;
                pool.end = base + self.cfg.pool_reservation;
            }
            let base = pool.cursor;
            pool.cursor += len;
            base
        };
        pool.subbags.insert(
            base,
            MapEntry {
                bag: bag.clone(),
                index,
                len,
                slots: base + lead,
            },
        );
        Ok(base)
    }

    fn huge_alloc(&self, size: usize) -> Result<usize, AllocError> {
        let len = round_up(size, self.cfg.page_size);
        let base = self.mem.reserve(len)?;
        self.pool.lock().huge.insert(
            base,
            HugeRecord {
                len,
                requested: size,
            },
        );
        Ok(base)
    }

    fn huge_free(&self, addr: usize, base: usize) -> Result<(), AllocError> {
        if addr != base {
            let mut r = DetectionReport::free_error(DetectionKind::InvalidFree, base, 0, addr, 0);
            r.class = self.pool.lock().huge.get(&base).map_or(0, |h| h.len);
            return Err(r.into());
        }
        let Some(rec) = self.pool.lock().huge.remove(&base) else {
            return Err(DetectionReport::free_error(DetectionKind::DoubleFree, base, 0, addr, 0).into());
        };
        self.mem.release(base, rec.len)?;
        Ok(())
    }

    fn unknown_free(addr: usize) -> AllocError {
        DetectionReport::free_error(DetectionKind::InvalidFree, addr, 0, addr, 0).into()
    }

    /// Validates a taken slot for release: bitmap, offset, heap canary.
    /// Returns (slot index, slot base, requested size).
    fn validate_taken(
        &self,
        sb: &SubBag,
        block: usize,
        addr: usize,
    ) -> Result<(usize, usize, usize), AllocError> {
        let slot = (addr - sb.base) / block;
        let slot_base = sb.base + slot * block;
        if slot >= SLOTS_PER_SUBBAG || bit(&sb.guard, slot) {
            return Err(DetectionReport::free_error(DetectionKind::InvalidFree, slot_base, block, addr, 0).into());
        }
        if !bit(&sb.bitmap, slot) {
            return Err(DetectionReport::free_error(DetectionKind::DoubleFree, slot_base, block, addr, 0).into());
        }
        let p = sb.offsets[slot] as usize;
        if addr - slot_base != p {
            return Err(DetectionReport::free_error(DetectionKind::InvalidFree, slot_base, block, addr, p).into());
        }
        let size = sb.sizes[slot] as usize;
        let iota = self.cfg.heap_canary_len;
        let expected = self.mac.compute_canary(slot_base as u64, iota);
        let mut found = [0u8; MAX_CANARY_LEN];
        // SAFETY: p + size + iota <= block by construction at allocation.
        unsafe { self.mem.read(slot_base + p + size, &mut found[..iota])? };
        if expected.as_slice() != &found[..iota] {
            return Err(AllocError::Detected(DetectionReport {
                kind: DetectionKind::HeapCanaryTamper,
                slot: slot_base,
                class: block,
                pointer: Some(addr),
                position: p + size,
                expected,
                found: Canary::from_slice(&found[..iota]),
            }));
        }
        Ok((slot, slot_base, size))
    }

    fn write_heap_canary(&self, slot_base: usize, at: usize) -> Result<(), MemError> {
        let canary = self.mac.compute_canary(slot_base as u64, self.cfg.heap_canary_len);
        // SAFETY: `at + iota <= block`; the slot is in a live sub-bag.
        unsafe { self.mem.write(slot_base + at, canary.as_slice()) }
    }

    /// Releases every reservation. Outstanding pointers become invalid.
    fn release_all(&mut self) {
        let pool = self.pool.get_mut();
        for (&base, rec) in &pool.huge {
            let _ = self.mem.release(base, rec.len);
        }
        for &(base, len) in &pool.chunks {
            let _ = self.mem.release(base, len);
        }
        pool.huge.clear();
        pool.chunks.clear();
        pool.subbags.clear();
    }
}

impl<M: MemorySource> Drop for Allocator<M> {
    fn drop(&mut self) {
        self.release_all();
    }
}

/// Per-thread allocation front end.
pub struct ThreadHeap<'a, M: MemorySource> {
    alloc: &'a Allocator<M>,
    bags: Vec<Arc<BagShared>>,
    rng: Pcg32,
}

impl<M: MemorySource> fmt::Debug for ThreadHeap<'_, M> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ThreadHeap").field("rng", &self.rng).finish_non_exhaustive()
    }
}

impl<'a, M: MemorySource> ThreadHeap<'a, M> {
    pub fn allocator(&self) -> &'a Allocator<M> {
        self.alloc
    }

    pub fn malloc(&mut self, size: usize) -> Result<usize, AllocError> {
        let cfg = &self.alloc.cfg;
        match self.alloc.table.size_class_for(size, cfg) {
            SizeClass::Huge => self.alloc.huge_alloc(size.max(1)),
            SizeClass::Class { index, .. } => self.slot_alloc(index, size.max(1)),
        }
    }

    pub fn calloc(&mut self, n: usize, size: usize) -> Result<usize, AllocError> {
        let total = n.checked_mul(size).ok_or(AllocError::Overflow)?;
        let addr = self.malloc(total)?;
        // Small free slots are verified all-zero before reuse and huge blocks
        // are fresh mappings; only large slots may hold stale bytes.
        if total > 0 && matches!(self.alloc.resolve(addr), Resolution::Slot { block_size, .. } if self.alloc.is_large(block_size)) {
            // SAFETY: `addr..addr + total` is the object just allocated.
            unsafe { self.alloc.mem.fill(addr, total, 0)? };
        }
        Ok(addr)
    }

    /// Frees `addr`. Null is a no-op.
    pub fn free(&mut self, addr: usize) -> Result<(), AllocError> {
        if addr == 0 {
            return Ok(());
        }
        match self.alloc.owner(addr) {
            Owner::Huge(base, _) => self.alloc.huge_free(addr, base),
            Owner::Unknown => Err(Allocator::<M>::unknown_free(addr)),
            Owner::Slot(bag, index, _) => {
                let mut guard = bag.state.lock();
                let st = &mut *guard;
                let Some(sb) = st.subbags.get_mut(index) else {
                    return Err(Allocator::<M>::unknown_free(addr));
                };
                let (slot, slot_base, _) = self.alloc.validate_taken(sb, bag.block, addr)?;
                self.plant_fbc(sb, slot, slot_base, bag.block)?;
                set_bit(&mut sb.bitmap, slot, false);
                sb.free += 1;
                st.free_index.add(index, 1);
                st.total_free += 1;
                Ok(())
            }
        }
    }

    pub fn realloc(&mut self, addr: usize, new_size: usize) -> Result<usize, AllocError> {
        if addr == 0 {
            return self.malloc(new_size);
        }
        if new_size == 0 {
            self.free(addr)?;
            return Ok(0);
        }
        let old_size = match self.alloc.owner(addr) {
            Owner::Unknown => return Err(Allocator::<M>::unknown_free(addr)),
            Owner::Huge(base, _) => {
                if addr != base {
                    return self.alloc.huge_free(addr, base).map(|_| 0);
                }
                self.alloc.pool.lock().huge.get(&base).map_or(0, |h| h.requested)
            }
            Owner::Slot(bag, index, _) => {
                let mut guard = bag.state.lock();
                let Some(sb) = guard.subbags.get_mut(index) else {
                    return Err(Allocator::<M>::unknown_free(addr));
                };
                let (slot, slot_base, size) = self.alloc.validate_taken(sb, bag.block, addr)?;
                let same_class = matches!(
                    self.alloc.table.size_class_for(new_size, &self.alloc.cfg),
                    SizeClass::Class { index, .. } if index == bag.class
                );
                let p = sb.offsets[slot] as usize;
                if same_class && p + new_size + self.alloc.cfg.heap_canary_len <= bag.block {
                    if new_size > size {
                        // The old canary position becomes object data.
                        // SAFETY: inside the slot, below the new canary.
                        unsafe { self.alloc.mem.fill(slot_base + p + size, new_size - size, 0)? };
                    }
                    self.alloc.write_heap_canary(slot_base, p + new_size)?;
                    sb.sizes[slot] = new_size as u16;
                    return Ok(addr);
                }
                size
            }
        };
        let new = self.malloc(new_size)?;
        // SAFETY: both ranges are live objects of at least this length, and
        // distinct objects never overlap.
        unsafe { self.alloc.mem.copy(new, addr, old_size.min(new_size))? };
        self.free(addr)?;
        Ok(new)
    }

    fn plant_fbc(&mut self, sb: &mut SubBag, slot: usize, slot_base: usize, block: usize) -> Result<(), MemError> {
        if !self.alloc.is_large(block) {
            // SAFETY: the whole slot is inside the sub-bag and not guarded.
            return unsafe { self.alloc.mem.fill(slot_base, block, 0) };
        }
        let c = self.alloc.cfg.fbc_len;
        let f = self.rng.uniform_below((block - c + 1) as u64) as usize;
        let fbc = self.alloc.mac.compute_canary(slot_base as u64, c);
        // SAFETY: f + c <= block.
        unsafe { self.alloc.mem.write(slot_base + f, fbc.as_slice())? };
        sb.offsets[slot] = f as u16;
        set_bit(&mut sb.pristine, slot, false);
        Ok(())
    }

    fn slot_alloc(&mut self, class: usize, size: usize) -> Result<usize, AllocError> {
        let r = self.alloc.cfg.min_free();
        let bag = self.bags[class].clone();
        loop {
            let (free, next) = {
                let st = bag.state.lock();
                (st.total_free, st.subbags.len())
            };
            if free >= r.max(1) {
                break;
            }
            self.grow(&bag, next)?;
        }

        let block = bag.block;
        let mut guard = bag.state.lock();
        let st = &mut *guard;
        let k = self.rng.uniform_below(st.total_free as u64);
        let (sbi, rank) = st.free_index.find(k);
        let sb = &mut st.subbags[sbi];
        let slot = select_clear(&sb.bitmap, rank);

        let d = self.alloc.cfg.nearby_check;
        let lo = slot.saturating_sub(d);
        let hi = (slot + d).min(SLOTS_PER_SUBBAG - 1);
        for j in core::iter::once(slot).chain((lo..=hi).filter(|&j| j != slot)) {
            if !bit(&sb.bitmap, j) {
                if let Some(report) = self.alloc.fbc_status(sb, j, block)? {
                    return Err(report.into());
                }
            }
        }

        let iota = self.alloc.cfg.heap_canary_len;
        let choices = (block - size - iota) / ALIGNMENT + 1;
        let p = ALIGNMENT * self.rng.uniform_below(choices as u64) as usize;
        let slot_base = sb.base + slot * block;
        self.alloc.write_heap_canary(slot_base, p + size)?;

        sb.offsets[slot] = p as u16;
        sb.sizes[slot] = size as u16;
        set_bit(&mut sb.bitmap, slot, true);
        set_bit(&mut sb.pristine, slot, false);
        sb.free -= 1;
        st.free_index.add(sbi, -1);
        st.total_free -= 1;
        Ok(slot_base + p)
    }

    /// Adds one sub-bag to `bag`. Only the owning heap grows a bag, so the
    /// new sub-bag's index is known before the bag latch is re-taken.
    fn grow(&mut self, bag: &Arc<BagShared>, index: usize) -> Result<(), AllocError> {
        let a = self.alloc;
        let block = bag.block;
        let page = a.cfg.page_size;
        let slots_len = round_up(SLOTS_PER_SUBBAG * block, page);
        let guarded = self.rng.bernoulli(a.cfg.guard_page_rate);
        // A guard inside a one-page sub-bag would leave no usable slot, so
        // such sub-bags get an extra page before or after the slots instead.
        let single = slots_len == page;
        let (len, lead) = match (guarded && single, self.rng_flag(guarded && single)) {
            (true, true) => (2 * page, page),
            (true, false) => (2 * page, 0),
            (false, _) => (slots_len, 0),
        };
        let region = a.carve(len, lead, bag, index)?;
        let base = region + lead;

        let mut bitmap = [0u64; 4];
        let mut guard = [0u64; 4];
        if guarded {
            let gp = if single {
                if lead == page { region } else { region + page }
            } else {
                base + page * self.rng.uniform_below((slots_len / page) as u64) as usize
            };
            a.mem.protect(gp)?;
            if !single {
                let first = (gp - base) / block;
                let last = ((gp - base + page - 1) / block).min(SLOTS_PER_SUBBAG - 1);
                for s in first..=last {
                    set_bit(&mut guard, s, true);
                    set_bit(&mut bitmap, s, true);
                }
            }
            a.subbags_guarded.fetch_add(1, Ordering::Relaxed);
        }
        a.subbags_created.fetch_add(1, Ordering::Relaxed);

        let mut offsets = [0u16; SLOTS_PER_SUBBAG];
        let mut pristine = [0u64; 4];
        if a.is_large(block) {
            let c = a.cfg.fbc_len;
            for (s, off) in offsets.iter_mut().enumerate() {
                if !bit(&guard, s) {
                    *off = self.rng.uniform_below((block - c + 1) as u64) as u16;
                    set_bit(&mut pristine, s, true);
                }
            }
        }
        let free = bitmap.iter().map(|w| w.count_zeros() as u16).sum();
        let mut st = bag.state.lock();
        debug_assert_eq!(st.subbags.len(), index);
        st.subbags.push(SubBag {
            base,
            bitmap,
            guard,
            pristine,
            offsets,
            sizes: [0; SLOTS_PER_SUBBAG],
            free,
        });
        st.free_index.push(u64::from(free));
        st.total_free += free as usize;
        Ok(())
    }

    fn rng_flag(&mut self, needed: bool) -> bool {
        needed && self.rng.next_u32() & 1 == 1
    }

    /// Generator state, for reproducibility checks.
    pub fn rng(&self) -> &Pcg32 {
        &self.rng
    }
}
