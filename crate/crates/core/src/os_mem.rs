//! Page-granular memory sources.
//!
//! The allocator never dereferences addresses itself; every byte it reads or
//! writes goes through a [`MemorySource`]. [`SimulatedBacking`] keeps pages in
//! a sparse map so tests can run the full allocator without touching the real
//! address space, and it reports accesses to protected pages as traps instead
//! of faulting. [`mmap::MmapSource`] is the real thing.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use crate::latch::Latch;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemError {
    OutOfMemory,
    /// A page argument was not page-aligned.
    Unaligned { addr: usize },
    /// The address is not inside any live reservation.
    OutsideRegion { addr: usize },
    /// Access touched a protected page.
    Trap { addr: usize },
}

impl fmt::Display for MemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemError::OutOfMemory => f.write_str("out of memory"),
            MemError::Unaligned { addr } => write!(f, "address {addr:#x} is not page-aligned"),
            MemError::OutsideRegion { addr } => write!(f, "address {addr:#x} is outside any region"),
            MemError::Trap { addr } => write!(f, "access to protected page at {addr:#x}"),
        }
    }
}

/// Source of demand-zero pages.
///
/// Reservation management (`reserve`, `release`, `protect`, `unprotect`) is
/// serialized by the caller. The byte-access methods are `unsafe` because a
/// real backend dereferences the address: callers must only pass ranges that
/// lie inside a live reservation.
pub trait MemorySource: Send + Sync {
    fn page_size(&self) -> usize;

    /// Reserves `len` bytes (rounded up to whole pages), reading as zero.
    fn reserve(&self, len: usize) -> Result<usize, MemError>;

    fn release(&self, base: usize, len: usize) -> Result<(), MemError>;

    fn protect(&self, page: usize) -> Result<(), MemError>;

    fn unprotect(&self, page: usize) -> Result<(), MemError>;

    /// # Safety
    ///
    /// `addr..addr + buf.len()` must lie in a live reservation.
    unsafe fn read(&self, addr: usize, buf: &mut [u8]) -> Result<(), MemError>;

    /// # Safety
    ///
    /// `addr..addr + data.len()` must lie in a live reservation.
    unsafe fn write(&self, addr: usize, data: &[u8]) -> Result<(), MemError>;

    /// # Safety
    ///
    /// `addr..addr + len` must lie in a live reservation.
    unsafe fn fill(&self, addr: usize, len: usize, byte: u8) -> Result<(), MemError>;

    /// # Safety
    ///
    /// `addr..addr + len` must lie in a live reservation.
    unsafe fn is_zero(&self, addr: usize, len: usize) -> Result<bool, MemError>;

    /// # Safety
    ///
    /// Both ranges must lie in live reservations and must not overlap.
    unsafe fn copy(&self, dst: usize, src: usize, len: usize) -> Result<(), MemError>;
}

pub(crate) fn round_up(len: usize, page: usize) -> usize {
    len.div_ceil(page) * page
}

// Simulated regions start here; one unmapped page separates reservations.
const SIM_BASE: usize = 0x0000_1000_0000_0000;

#[derive(Default)]
struct SimState {
    regions: BTreeMap<usize, usize>,
    pages: BTreeMap<usize, Box<[u8]>>,
    protected: BTreeSet<usize>,
    next: usize,
    traps: Vec<usize>,
    accesses: u64,
}

impl SimState {
    fn region_of(&self, addr: usize) -> Option<(usize, usize)> {
        self.regions
            .range(..=addr)
            .next_back()
            .map(|(&b, &l)| (b, l))
            .filter(|&(b, l)| addr < b + l)
    }

    fn check(&mut self, addr: usize, len: usize, page: usize) -> Result<(), MemError> {
        self.accesses += 1;
        if len == 0 {
            return Ok(());
        }
        let end = addr.checked_add(len).ok_or(MemError::OutsideRegion { addr })?;
        match self.region_of(addr) {
            Some((b, l)) if end <= b + l => {}
            _ => return Err(MemError::OutsideRegion { addr }),
        }
        let first = addr / page * page;
        if let Some(&p) = self.protected.range(first..end).next() {
            let hit = p.max(addr);
            self.traps.push(hit);
            return Err(MemError::Trap { addr: hit });
        }
        Ok(())
    }

    /// Visits `addr..addr + len` page by page as (page base, offset, length).
    fn chunks(addr: usize, len: usize, page: usize) -> impl Iterator<Item = (usize, usize, usize)> {
        let end = addr + len;
        let mut cur = addr;
        core::iter::from_fn(move || {
            (cur < end).then(|| {
                let base = cur / page * page;
                let off = cur - base;
                let n = (page - off).min(end - cur);
                cur += n;
                (base, off, n)
            })
        })
    }

    fn page_mut(&mut self, base: usize, page: usize) -> &mut [u8] {
        self.pages
            .entry(base)
            .or_insert_with(|| alloc::vec![0u8; page].into_boxed_slice())
    }
}

/// In-memory stand-in for the OS: sparse demand-zero pages, protection
/// bookkeeping and a log of trapped accesses.
pub struct SimulatedBacking {
    page: usize,
    state: Latch<SimState>,
}

impl Default for SimulatedBacking {
    fn default() -> Self {
        Self::new(4096)
    }
}

impl fmt::Debug for SimulatedBacking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let st = self.state.lock();
        f.debug_struct("SimulatedBacking")
            .field("page", &self.page)
            .field("regions", &st.regions.len())
            .field("resident_pages", &st.pages.len())
            .finish()
    }
}

impl SimulatedBacking {
    pub fn new(page_size: usize) -> Self {
        assert!(page_size.is_power_of_two());
        SimulatedBacking {
            page: page_size,
            state: Latch::new(SimState {
                next: SIM_BASE,
                ..SimState::default()
            }),
        }
    }

    /// Checked read honouring protection.
    pub fn read_checked(&self, addr: usize, buf: &mut [u8]) -> Result<(), MemError> {
        let mut st = self.state.lock();
        st.check(addr, buf.len(), self.page)?;
        let mut done = 0;
        for (base, off, n) in SimState::chunks(addr, buf.len(), self.page) {
            match st.pages.get(&base) {
                Some(p) => buf[done..done + n].copy_from_slice(&p[off..off + n]),
                None => buf[done..done + n].fill(0),
            }
            done += n;
        }
        Ok(())
    }

    /// Checked write honouring protection.
    pub fn write_checked(&self, addr: usize, data: &[u8]) -> Result<(), MemError> {
        let mut st = self.state.lock();
        st.check(addr, data.len(), self.page)?;
        let mut done = 0;
        for (base, off, n) in SimState::chunks(addr, data.len(), self.page) {
            st.page_mut(base, self.page)[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
        Ok(())
    }

    fn fill_checked(&self, addr: usize, len: usize, byte: u8) -> Result<(), MemError> {
        let mut st = self.state.lock();
        st.check(addr, len, self.page)?;
        for (base, off, n) in SimState::chunks(addr, len, self.page) {
            if byte == 0 && !st.pages.contains_key(&base) {
                continue;
            }
            st.page_mut(base, self.page)[off..off + n].fill(byte);
        }
        Ok(())
    }

    fn is_zero_checked(&self, addr: usize, len: usize) -> Result<bool, MemError> {
        let mut st = self.state.lock();
        st.check(addr, len, self.page)?;
        Ok(SimState::chunks(addr, len, self.page).all(|(base, off, n)| {
            st.pages
                .get(&base)
                .is_none_or(|p| p[off..off + n].iter().all(|&b| b == 0))
        }))
    }

    /// Reads bytes ignoring protection; for tests and inspection only.
    pub fn peek(&self, addr: usize, len: usize) -> Vec<u8> {
        let st = self.state.lock();
        let mut out = alloc::vec![0u8; len];
        let mut done = 0;
        for (base, off, n) in SimState::chunks(addr, len, self.page) {
            if let Some(p) = st.pages.get(&base) {
                out[done..done + n].copy_from_slice(&p[off..off + n]);
            }
            done += n;
        }
        out
    }

    /// Writes bytes ignoring protection; for tests and fault injection only.
    pub fn poke(&self, addr: usize, data: &[u8]) {
        let mut st = self.state.lock();
        let mut done = 0;
        for (base, off, n) in SimState::chunks(addr, data.len(), self.page) {
            st.page_mut(base, self.page)[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
    }

    pub fn is_protected(&self, page: usize) -> bool {
        self.state.lock().protected.contains(&(page / self.page * self.page))
    }

    pub fn protected_pages(&self) -> Vec<usize> {
        self.state.lock().protected.iter().copied().collect()
    }

    /// Addresses of every trapped access so far.
    pub fn trap_log(&self) -> Vec<usize> {
        self.state.lock().traps.clone()
    }

    pub fn access_count(&self) -> u64 {
        self.state.lock().accesses
    }

    pub fn live_regions(&self) -> usize {
        self.state.lock().regions.len()
    }

    pub fn resident_pages(&self) -> usize {
        self.state.lock().pages.len()
    }

    fn page_op(&self, page: usize, protect: bool) -> Result<(), MemError> {
        if page % self.page != 0 {
            return Err(MemError::Unaligned { addr: page });
        }
        let mut st = self.state.lock();
        if st.region_of(page).is_none() {
            return Err(MemError::OutsideRegion { addr: page });
        }
        if protect {
            st.protected.insert(page);
        } else {
            st.protected.remove(&page);
        }
        Ok(())
    }
}

impl MemorySource for SimulatedBacking {
    fn page_size(&self) -> usize {
        self.page
    }

    fn reserve(&self, len: usize) -> Result<usize, MemError> {
        if len == 0 {
            return Err(MemError::OutOfMemory);
        }
        let len = round_up(len, self.page);
        let mut st = self.state.lock();
        let base = st.next;
        st.next = base
            .checked_add(len + self.page)
            .ok_or(MemError::OutOfMemory)?;
        st.regions.insert(base, len);
        Ok(base)
    }

    fn release(&self, base: usize, len: usize) -> Result<(), MemError> {
        let mut st = self.state.lock();
        let Some(&have) = st.regions.get(&base) else {
            return Err(MemError::OutsideRegion { addr: base });
        };
        debug_assert_eq!(have, round_up(len, self.page));
        st.regions.remove(&base);
        let end = base + have;
        let doomed: Vec<usize> = st.pages.range(base..end).map(|(&k, _)| k).collect();
        for p in doomed {
            st.pages.remove(&p);
        }
        let prot: Vec<usize> = st.protected.range(base..end).copied().collect();
        for p in prot {
            st.protected.remove(&p);
        }
        Ok(())
    }

    fn protect(&self, page: usize) -> Result<(), MemError> {
        self.page_op(page, true)
    }

    fn unprotect(&self, page: usize) -> Result<(), MemError> {
        self.page_op(page, false)
    }

    unsafe fn read(&self, addr: usize, buf: &mut [u8]) -> Result<(), MemError> {
        self.read_checked(addr, buf)
    }

    unsafe fn write(&self, addr: usize, data: &[u8]) -> Result<(), MemError> {
        self.write_checked(addr, data)
    }

    unsafe fn fill(&self, addr: usize, len: usize, byte: u8) -> Result<(), MemError> {
        self.fill_checked(addr, len, byte)
    }

    unsafe fn is_zero(&self, addr: usize, len: usize) -> Result<bool, MemError> {
        self.is_zero_checked(addr, len)
    }

    unsafe fn copy(&self, dst: usize, src: usize, len: usize) -> Result<(), MemError> {
        let mut buf = alloc::vec![0u8; len];
        self.read_checked(src, &mut buf)?;
        self.write_checked(dst, &buf)
    }
}

#[cfg(all(feature = "mmap", unix))]
pub mod mmap {
    //! Anonymous-mapping page source.

    use super::{round_up, MemError, MemorySource};

    /// Pages from `mmap(MAP_ANONYMOUS)`, protected with `mprotect`.
    #[derive(Debug)]
    pub struct MmapSource {
        page: usize,
    }

    impl Default for MmapSource {
        fn default() -> Self {
            Self::new()
        }
    }

    impl MmapSource {
        pub fn new() -> Self {
            // SAFETY: sysconf has no preconditions.
            let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
            MmapSource {
                page: if page > 0 { page as usize } else { 4096 },
            }
        }
    }

    impl MemorySource for MmapSource {
        fn page_size(&self) -> usize {
            self.page
        }

        fn reserve(&self, len: usize) -> Result<usize, MemError> {
            if len == 0 {
                return Err(MemError::OutOfMemory);
            }
            let len = round_up(len, self.page);
            // SAFETY: fresh anonymous private mapping; no existing memory is affected.
            let p = unsafe {
                libc::mmap(
                    core::ptr::null_mut(),
                    len,
                    libc::PROT_READ | libc::PROT_WRITE,
                    libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
                    -1,
                    0,
                )
            };
            if p == libc::MAP_FAILED {
                Err(MemError::OutOfMemory)
            } else {
                Ok(p as usize)
            }
        }

        fn release(&self, base: usize, len: usize) -> Result<(), MemError> {
            // SAFETY: the caller hands back a mapping obtained from `reserve`.
            let rc = unsafe { libc::munmap(base as *mut libc::c_void, round_up(len, self.page)) };
            if rc == 0 {
                Ok(())
            } else {
                Err(MemError::OutsideRegion { addr: base })
            }
        }

        fn protect(&self, page: usize) -> Result<(), MemError> {
            self.set_prot(page, libc::PROT_NONE)
        }

        fn unprotect(&self, page: usize) -> Result<(), MemError> {
            self.set_prot(page, libc::PROT_READ | libc::PROT_WRITE)
        }

        unsafe fn read(&self, addr: usize, buf: &mut [u8]) -> Result<(), MemError> {
            // SAFETY: the caller guarantees the source range is mapped.
            unsafe { core::ptr::copy_nonoverlapping(addr as *const u8, buf.as_mut_ptr(), buf.len()) };
            Ok(())
        }

        unsafe fn write(&self, addr: usize, data: &[u8]) -> Result<(), MemError> {
            // SAFETY: the caller guarantees the destination range is mapped.
            unsafe { core::ptr::copy_nonoverlapping(data.as_ptr(), addr as *mut u8, data.len()) };
            Ok(())
        }

        unsafe fn fill(&self, addr: usize, len: usize, byte: u8) -> Result<(), MemError> {
            // SAFETY: the caller guarantees the range is mapped.
            unsafe { core::ptr::write_bytes(addr as *mut u8, byte, len) };
            Ok(())
        }

        unsafe fn is_zero(&self, addr: usize, len: usize) -> Result<bool, MemError> {
            // SAFETY: the caller guarantees the range is mapped and readable.
            let bytes = unsafe { core::slice::from_raw_parts(addr as *const u8, len) };
            let (head, words, tail) = unsafe { bytes.align_to::<u64>() };
            Ok(head.iter().all(|&b| b == 0)
                && words.iter().all(|&w| w == 0)
                && tail.iter().all(|&b| b == 0))
        }

        unsafe fn copy(&self, dst: usize, src: usize, len: usize) -> Result<(), MemError> {
            // SAFETY: the caller guarantees both ranges are mapped and disjoint.
            unsafe { core::ptr::copy_nonoverlapping(src as *const u8, dst as *mut u8, len) };
            Ok(())
        }
    }

    impl MmapSource {
        fn set_prot(&self, page: usize, prot: libc::c_int) -> Result<(), MemError> {
            if page % self.page != 0 {
                return Err(MemError::Unaligned { addr: page });
            }
            // SAFETY: changes protection of one page the caller owns.
            let rc = unsafe { libc::mprotect(page as *mut libc::c_void, self.page, prot) };
            if rc == 0 {
                Ok(())
            } else {
                Err(MemError::OutsideRegion { addr: page })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_memory_reads_zero() {
        let sim = SimulatedBacking::default();
        let base = sim.reserve(4096).unwrap();
        let mut buf = [0xffu8; 64];
        sim.read_checked(base + 100, &mut buf).unwrap();
        assert!(buf.iter().all(|&b| b == 0));
        assert_eq!(base % 4096, 0);
    }

    #[test]
    fn reserve_one_byte_gives_one_page() {
        let sim = SimulatedBacking::default();
        let base = sim.reserve(1).unwrap();
        assert!(sim.write_checked(base + 4095, &[1]).is_ok());
        assert_eq!(
            sim.write_checked(base + 4096, &[1]),
            Err(MemError::OutsideRegion { addr: base + 4096 })
        );
    }

    #[test]
    fn reserves_are_disjoint() {
        let sim = SimulatedBacking::default();
        let a = sim.reserve(3 * 4096).unwrap();
        let b = sim.reserve(4096).unwrap();
        assert!(a + 3 * 4096 <= b || b + 4096 <= a);
    }

    #[test]
    fn protection_traps_and_round_trips() {
        let sim = SimulatedBacking::default();
        let base = sim.reserve(2 * 4096).unwrap();
        let page = base + 4096;
        sim.protect(page).unwrap();
        let mut buf = [0u8; 4];
        assert_eq!(
            sim.read_checked(page + 8, &mut buf),
            Err(MemError::Trap { addr: page + 8 })
        );
        // A range straddling into the protected page traps at the page start.
        assert_eq!(
            sim.write_checked(page - 2, &[1, 2, 3, 4]),
            Err(MemError::Trap { addr: page })
        );
        assert_eq!(sim.trap_log(), [page + 8, page]);
        sim.unprotect(page).unwrap();
        sim.read_checked(page + 8, &mut buf).unwrap();
        assert_eq!(buf, [0; 4]);
    }

    #[test]
    fn protect_contract_violations() {
        let sim = SimulatedBacking::default();
        let base = sim.reserve(4096).unwrap();
        assert_eq!(sim.protect(base + 8), Err(MemError::Unaligned { addr: base + 8 }));
        assert_eq!(
            sim.protect(base + 8192),
            Err(MemError::OutsideRegion { addr: base + 8192 })
        );
    }

    #[test]
    fn release_forgets_contents() {
        let sim = SimulatedBacking::default();
        let base = sim.reserve(4096).unwrap();
        sim.write_checked(base, &[9; 16]).unwrap();
        assert_eq!(sim.resident_pages(), 1);
        sim.release(base, 4096).unwrap();
        assert_eq!(sim.resident_pages(), 0);
        assert!(sim.read_checked(base, &mut [0u8; 1]).is_err());
    }

    #[test]
    fn zero_fill_does_not_materialize_pages() {
        let sim = SimulatedBacking::default();
        let base = sim.reserve(8 * 4096).unwrap();
        unsafe { sim.fill(base, 8 * 4096, 0).unwrap() };
        assert_eq!(sim.resident_pages(), 0);
        unsafe { assert!(sim.is_zero(base, 8 * 4096).unwrap()) };
        sim.poke(base + 5000, &[1]);
        unsafe { assert!(!sim.is_zero(base, 8 * 4096).unwrap()) };
    }

    #[cfg(all(feature = "mmap", unix))]
    #[test]
    fn mmap_source_basics() {
        let src = mmap::MmapSource::new();
        let base = src.reserve(1).unwrap();
        assert_eq!(base % src.page_size(), 0);
        unsafe {
            assert!(src.is_zero(base, src.page_size()).unwrap());
            src.write(base + 3, &[7]).unwrap();
            let mut b = [0u8; 1];
            src.read(base + 3, &mut b).unwrap();
            assert_eq!(b, [7]);
        }
        assert!(src.protect(base + 1).is_err());
        src.protect(base).unwrap();
        src.unprotect(base).unwrap();
        src.release(base, 1).unwrap();
    }
}
