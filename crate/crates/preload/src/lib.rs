//! C ABI allocation entry points backed by s2alloc, for use with
//! `LD_PRELOAD=libs2alloc_preload.so`.
//!
//! The allocator is configured from the `S2_*` environment variables on the
//! first call. Threads share a fixed set of heaps picked by thread identity,
//! so no thread-local destructors are needed. Detections are written to
//! stderr as one line and abort the process unless `S2_ABORT_ON_TAMPER=0`.
//!
//! Requests with an alignment above 16 bytes are served from the page-aligned
//! huge path.

pub mod meta;

use core::cell::UnsafeCell;
use core::ffi::{c_int, c_void, CStr};
use core::fmt::Write as _;
use core::mem::MaybeUninit;
use core::ptr;
use core::sync::atomic::{AtomicBool, AtomicU8, Ordering};

use s2alloc_core::heap::ThreadHeap;
use s2alloc_core::os_mem::mmap::MmapSource;
use s2alloc_core::{load_config, AllocError, Allocator, AllocatorConfig, MacKey, MemorySource};

#[cfg(not(test))]
#[global_allocator]
static META: meta::MetaAlloc = meta::MetaAlloc::new();

const ALIGN: usize = 16;
const HEAPS: usize = 64;

const UNINIT: u8 = 0;
const BUSY: u8 = 1;
const READY: u8 = 2;

struct Global {
    state: AtomicU8,
    alloc: UnsafeCell<MaybeUninit<Allocator<MmapSource>>>,
}

// SAFETY: `alloc` is written once before `state` becomes READY and only read after.
unsafe impl Sync for Global {}

static GLOBAL: Global = Global {
    state: AtomicU8::new(UNINIT),
    alloc: UnsafeCell::new(MaybeUninit::uninit()),
};

struct HeapSlot {
    busy: AtomicBool,
    heap: UnsafeCell<Option<ThreadHeap<'static, MmapSource>>>,
}

// SAFETY: `heap` is only touched while `busy` is held.
unsafe impl Sync for HeapSlot {}

static SLOTS: [HeapSlot; HEAPS] = [const {
    HeapSlot {
        busy: AtomicBool::new(false),
        heap: UnsafeCell::new(None),
    }
}; HEAPS];

/// Fixed-size line buffer; formatting must not allocate.
struct Line {
    buf: [u8; 256],
    len: usize,
}

impl core::fmt::Write for Line {
    fn write_str(&mut self, s: &str) -> core::fmt::Result {
        let room = self.buf.len() - self.len;
        let n = s.len().min(room);
        self.buf[self.len..self.len + n].copy_from_slice(&s.as_bytes()[..n]);
        self.len += n;
        Ok(())
    }
}

fn emit(args: core::fmt::Arguments<'_>) {
    let mut line = Line { buf: [0; 256], len: 0 };
    let _ = line.write_fmt(args);
    let _ = line.write_str("\n");
    // SAFETY: writing an initialized buffer to stderr.
    unsafe { libc::write(2, line.buf.as_ptr().cast(), line.len) };
}

fn die(args: core::fmt::Arguments<'_>) -> ! {
    emit(args);
    // SAFETY: abort has no preconditions.
    unsafe { libc::abort() }
}

fn getenv(key: &CStr) -> Option<&'static str> {
    // SAFETY: `key` is NUL-terminated; the result lives in the environment block.
    let v = unsafe { libc::getenv(key.as_ptr()) };
    if v.is_null() {
        return None;
    }
    // SAFETY: getenv returns a NUL-terminated string.
    unsafe { CStr::from_ptr(v) }.to_str().ok()
}

fn os_random(buf: &mut [u8]) {
    let mut filled = 0;
    while filled < buf.len() {
        // SAFETY: the destination range lies inside `buf`.
        let n = unsafe { libc::getrandom(buf[filled..].as_mut_ptr().cast(), buf.len() - filled, 0) };
        if n <= 0 {
            die(format_args!("s2alloc: OS entropy source unavailable"));
        }
        filled += n as usize;
    }
}

const KEYS: [&CStr; 7] = [
    c"S2_ENTROPY_BITS",
    c"S2_NEARBY_D",
    c"S2_FBC_LEN",
    c"S2_RIO_FRACTION",
    c"S2_GUARD_RATE",
    c"S2_SEED",
    c"S2_ABORT_ON_TAMPER",
];

fn config(page: usize) -> AllocatorConfig {
    let vars = KEYS
        .iter()
        .filter_map(|k| Some((k.to_str().ok()?, getenv(k)?)));
    let mut cfg = match load_config(vars, MacKey::from_bytes([0; 16])) {
        Ok(c) => c,
        Err(e) => die(format_args!("s2alloc: {e}")),
    };
    cfg.mac_key = match cfg.seed {
        Some(seed) => MacKey::from_seed(seed),
        None => {
            let mut key = [0; 16];
            os_random(&mut key);
            MacKey::from_bytes(key)
        }
    };
    cfg.page_size = page;
    cfg
}

fn allocator() -> &'static Allocator<MmapSource> {
    if GLOBAL.state.load(Ordering::Acquire) != READY {
        init();
    }
    // SAFETY: READY is only published after the allocator is written.
    unsafe { (*GLOBAL.alloc.get()).assume_init_ref() }
}

#[cold]
fn init() {
    match GLOBAL
        .state
        .compare_exchange(UNINIT, BUSY, Ordering::Acquire, Ordering::Acquire)
    {
        Ok(_) => {
            let src = MmapSource::new();
            let cfg = config(src.page_size());
            let mut seed = [0; 8];
            os_random(&mut seed);
            let a = Allocator::new(cfg, src, u64::from_le_bytes(seed))
                .unwrap_or_else(|e| die(format_args!("s2alloc: {e}")));
            // SAFETY: only the thread that won the exchange writes.
            unsafe { (*GLOBAL.alloc.get()).write(a) };
            GLOBAL.state.store(READY, Ordering::Release);
        }
        Err(_) => {
            while GLOBAL.state.load(Ordering::Acquire) != READY {
                core::hint::spin_loop();
            }
        }
    }
}

/// Runs `f` on a heap, preferring the slot this thread hashes to.
fn with_heap<R>(f: impl FnOnce(&mut ThreadHeap<'static, MmapSource>) -> R) -> R {
    let alloc = allocator();
    // SAFETY: pthread_self has no preconditions.
    let me = unsafe { libc::pthread_self() } as u64;
    let start = (me.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 58) as usize;
    let mut i = start;
    let slot = loop {
        let s = &SLOTS[i];
        if s
            .busy
            .compare_exchange_weak(false, true, Ordering::Acquire, Ordering::Relaxed)
            .is_ok()
        {
            break s;
        }
        i = (i + 1) % HEAPS;
        if i == start {
            core::hint::spin_loop();
        }
    };
    // SAFETY: the slot lock is held.
    let heap = unsafe { &mut *slot.heap.get() }.get_or_insert_with(|| alloc.thread_heap());
    let r = f(heap);
    slot.busy.store(false, Ordering::Release);
    r
}

fn set_errno(e: c_int) {
    // SAFETY: errno is thread-local and always writable.
    unsafe { *libc::__errno_location() = e };
}

/// Maps an allocator error to a C return value, reporting detections.
fn fail(e: AllocError) {
    match e {
        AllocError::Detected(report) => {
            emit(format_args!("{report}"));
            if allocator().config().abort_on_tamper {
                // SAFETY: abort has no preconditions.
                unsafe { libc::abort() };
            }
        }
        AllocError::OutOfMemory | AllocError::Overflow => set_errno(libc::ENOMEM),
        AllocError::Memory(m) => {
            emit(format_args!("s2alloc: memory error: {m}"));
            set_errno(libc::ENOMEM);
        }
    }
}

fn to_ptr(r: Result<usize, AllocError>) -> *mut c_void {
    match r {
        Ok(a) => a as *mut c_void,
        Err(e) => {
            fail(e);
            ptr::null_mut()
        }
    }
}

/// Page-aligned block of at least `size` bytes from the huge path.
fn aligned(align: usize, size: usize) -> Result<usize, AllocError> {
    let a = allocator();
    if align <= ALIGN {
        return with_heap(|h| h.malloc(size));
    }
    if align > a.config().page_size {
        return Err(AllocError::OutOfMemory);
    }
    let size = size.max(a.config().huge_threshold + 1);
    with_heap(|h| h.malloc(size))
}

#[cfg_attr(not(test), no_mangle)]
pub extern "C" fn malloc(size: usize) -> *mut c_void {
    to_ptr(with_heap(|h| h.malloc(size)))
}

#[cfg_attr(not(test), no_mangle)]
pub extern "C" fn calloc(n: usize, size: usize) -> *mut c_void {
    to_ptr(with_heap(|h| h.calloc(n, size)))
}

/// # Safety
/// `p` must be null or a pointer returned by this library and not yet freed.
#[cfg_attr(not(test), no_mangle)]
pub unsafe extern "C" fn free(p: *mut c_void) {
    if p.is_null() {
        return;
    }
    if let Err(e) = with_heap(|h| h.free(p as usize)) {
        fail(e);
    }
}

/// # Safety
/// `p` must be null or a live pointer returned by this library.
#[cfg_attr(not(test), no_mangle)]
pub unsafe extern "C" fn realloc(p: *mut c_void, size: usize) -> *mut c_void {
    if p.is_null() {
        return malloc(size);
    }
    if size == 0 {
        // SAFETY: forwarded caller contract.
        unsafe { free(p) };
        return ptr::null_mut();
    }
    to_ptr(with_heap(|h| h.realloc(p as usize, size)))
}

/// # Safety
/// `p` must be null or a live pointer returned by this library.
#[cfg_attr(not(test), no_mangle)]
pub unsafe extern "C" fn malloc_usable_size(p: *mut c_void) -> usize {
    if p.is_null() {
        return 0;
    }
    allocator().usable_size(p as usize).unwrap_or(0)
}

/// # Safety
/// `out` must be valid for a pointer-sized write.
#[cfg_attr(not(test), no_mangle)]
pub unsafe extern "C" fn posix_memalign(out: *mut *mut c_void, align: usize, size: usize) -> c_int {
    if !align.is_power_of_two() || align % core::mem::size_of::<usize>() != 0 {
        return libc::EINVAL;
    }
    match aligned(align, size) {
        Ok(a) => {
            // SAFETY: caller contract.
            unsafe { *out = a as *mut c_void };
            0
        }
        Err(e) => {
            fail(e);
            libc::ENOMEM
        }
    }
}

#[cfg_attr(not(test), no_mangle)]
pub extern "C" fn aligned_alloc(align: usize, size: usize) -> *mut c_void {
    if !align.is_power_of_two() {
        set_errno(libc::EINVAL);
        return ptr::null_mut();
    }
    to_ptr(aligned(align, size))
}

#[cfg_attr(not(test), no_mangle)]
pub extern "C" fn memalign(align: usize, size: usize) -> *mut c_void {
    aligned_alloc(align, size)
}

#[cfg_attr(not(test), no_mangle)]
pub extern "C" fn valloc(size: usize) -> *mut c_void {
    to_ptr(aligned(allocator().config().page_size, size))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Symbols are not exported in unit tests, so these exercise the library's
    // own allocator without interposing on the test harness.

    #[test]
    fn round_trip_through_c_entry_points() {
        let p = malloc(24);
        assert!(!p.is_null());
        assert_eq!(p as usize % ALIGN, 0);
        assert!(unsafe { malloc_usable_size(p) } >= 24);
        let q = unsafe { realloc(p, 5000) };
        assert!(!q.is_null());
        let z = calloc(10, 400);
        let bytes = unsafe { core::slice::from_raw_parts(z as *const u8, 4000) };
        assert!(bytes.iter().all(|&b| b == 0));
        unsafe {
            free(q);
            free(z);
            free(ptr::null_mut());
        }
        assert!(unsafe { realloc(malloc(8), 0) }.is_null());
    }

    #[test]
    fn aligned_requests() {
        for align in [8usize, 16, 64, 4096] {
            let p = aligned_alloc(align, 100);
            assert_eq!(p as usize % align, 0);
            unsafe { free(p) };
            let mut out = ptr::null_mut();
            assert_eq!(unsafe { posix_memalign(&mut out, align, 100) }, 0);
            assert_eq!(out as usize % align, 0);
            unsafe { free(out) };
        }
        let mut out = ptr::null_mut();
        assert_eq!(unsafe { posix_memalign(&mut out, 24, 8) }, libc::EINVAL);
        assert!(aligned_alloc(1 << 20, 8).is_null());
    }

    #[test]
    fn threads_share_heaps() {
        let handles: Vec<_> = (0..16)
            .map(|t| {
                std::thread::spawn(move || {
                    let ptrs: Vec<usize> = (0..500).map(|i| malloc(16 + (i + t) % 300) as usize).collect();
                    ptrs
                })
            })
            .collect();
        // Free on a different thread from the one that allocated.
        for h in handles {
            for p in h.join().unwrap() {
                unsafe { free(p as *mut c_void) };
            }
        }
    }
}
