//! Allocator for the library's own bookkeeping (sub-bag tables, page maps).
//!
//! It must not call back into `malloc`, so it carves power-of-two blocks out
//! of anonymous mappings and keeps one free list per size. Blocks above
//! [`MAX_SMALL`] get their own mapping.

use core::alloc::{GlobalAlloc, Layout};
use core::ptr;
use core::sync::atomic::{AtomicBool, Ordering};

const MIN_SHIFT: usize = 4;
const MAX_SHIFT: usize = 15;
/// Largest block served from a free list.
pub const MAX_SMALL: usize = 1 << MAX_SHIFT;
const CHUNK: usize = 1 << 20;
const LISTS: usize = MAX_SHIFT - MIN_SHIFT + 1;

struct Lists {
    heads: [*mut u8; LISTS],
    cursor: usize,
    end: usize,
}

pub struct MetaAlloc {
    busy: AtomicBool,
    lists: core::cell::UnsafeCell<Lists>,
}

// SAFETY: `lists` is only touched while `busy` is held.
unsafe impl Sync for MetaAlloc {}

impl MetaAlloc {
    pub const fn new() -> Self {
        MetaAlloc {
            busy: AtomicBool::new(false),
            lists: core::cell::UnsafeCell::new(Lists {
                heads: [ptr::null_mut(); LISTS],
                cursor: 0,
                end: 0,
            }),
        }
    }

    fn lock(&self) {
        while self
            .busy
            .compare_exchange_weak(false, true, Ordering::Acquire, Ordering::Relaxed)
            .is_err()
        {
            core::hint::spin_loop();
        }
    }

    fn unlock(&self) {
        self.busy.store(false, Ordering::Release);
    }
}

impl Default for MetaAlloc {
    fn default() -> Self {
        Self::new()
    }
}

/// Free-list index for a layout, or `None` for a dedicated mapping.
fn list_index(layout: Layout) -> Option<usize> {
    let need = layout.size().max(layout.align()).max(1 << MIN_SHIFT);
    if need > MAX_SMALL {
        return None;
    }
    Some(need.next_power_of_two().trailing_zeros() as usize - MIN_SHIFT)
}

fn map(len: usize) -> *mut u8 {
    // SAFETY: fresh anonymous private mapping.
    let p = unsafe {
        libc::mmap(
            ptr::null_mut(),
            len,
            libc::PROT_READ | libc::PROT_WRITE,
            libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
            -1,
            0,
        )
    };
    if p == libc::MAP_FAILED {
        ptr::null_mut()
    } else {
        p.cast()
    }
}

fn page_size() -> usize {
    // SAFETY: sysconf has no preconditions.
    let p = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if p > 0 {
        p as usize
    } else {
        4096
    }
}

unsafe impl GlobalAlloc for MetaAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let Some(i) = list_index(layout) else {
            if layout.align() > page_size() {
                return ptr::null_mut();
            }
            return map(layout.size());
        };
        let size = 1usize << (i + MIN_SHIFT);
        self.lock();
        // SAFETY: lock held.
        let l = unsafe { &mut *self.lists.get() };
        let head = l.heads[i];
        let out = if !head.is_null() {
            // SAFETY: free blocks store the next pointer in their first word.
            l.heads[i] = unsafe { head.cast::<*mut u8>().read() };
            head
        } else {
            // Chunks are page aligned and blocks are carved at multiples of
            // their own size, so every block is size-aligned.
            let mut start = l.cursor.next_multiple_of(size);
            if l.cursor == 0 || start + size > l.end {
                let c = map(CHUNK);
                if c.is_null() {
                    self.unlock();
                    return ptr::null_mut();
                }
                l.cursor = c as usize;
                l.end = l.cursor + CHUNK;
                start = l.cursor;
            }
            l.cursor = start + size;
            start as *mut u8
        };
        self.unlock();
        out
    }

    unsafe fn dealloc(&self, p: *mut u8, layout: Layout) {
        let Some(i) = list_index(layout) else {
            // SAFETY: `p` came from `map` with this size.
            unsafe { libc::munmap(p.cast(), layout.size()) };
            return;
        };
        self.lock();
        // SAFETY: lock held; `p` is a block of list `i` no longer in use.
        unsafe {
            let l = &mut *self.lists.get();
            p.cast::<*mut u8>().write(l.heads[i]);
            l.heads[i] = p;
        }
        self.unlock();
    }
}
