//! malloc/free micro-benchmark: allocate `N = total / size` blocks, then free
//! them all, timing the two phases separately.

use std::time::Instant;

use s2alloc_core::{AllocError, Allocator, MemorySource, SizeClass};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub size: usize,
    pub total_bytes: usize,
    pub reps: usize,
    pub threads: usize,
}

/// Default workload: 1000 MiB in total per repetition.
pub const DEFAULT_TOTAL_BYTES: usize = 1000 << 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RepTiming {
    pub malloc_ns_per_op: f64,
    pub free_ns_per_op: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub size: usize,
    /// Block size serving `size`; zero for huge requests.
    pub block: usize,
    pub ops: usize,
    pub reps: Vec<RepTiming>,
}

impl BenchResult {
    pub fn mean(&self) -> RepTiming {
        let n = self.reps.len().max(1) as f64;
        RepTiming {
            malloc_ns_per_op: self.reps.iter().map(|r| r.malloc_ns_per_op).sum::<f64>() / n,
            free_ns_per_op: self.reps.iter().map(|r| r.free_ns_per_op).sum::<f64>() / n,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,block,ops,rep,malloc_ns_per_op,free_ns_per_op\n");
        for (i, r) in self.reps.iter().enumerate() {
            out += &format!(
                "{},{},{},{},{:.2},{:.2}\n",
                self.size,
                self.block,
                self.ops,
                i + 1,
                r.malloc_ns_per_op,
                r.free_ns_per_op
            );
        }
        let m = self.mean();
        out += &format!(
            "{},{},{},mean,{:.2},{:.2}\n",
            self.size, self.block, self.ops, m.malloc_ns_per_op, m.free_ns_per_op
        );
        out
    }
}

/// One thread's share: returns (malloc ns, free ns).
fn run_share<M: MemorySource>(alloc: &Allocator<M>, size: usize, n: usize) -> Result<(u128, u128), AllocError> {
    let mut heap = alloc.thread_heap();
    let mut ptrs = Vec::with_capacity(n);
    let t0 = Instant::now();
    for _ in 0..n {
        ptrs.push(heap.malloc(size)?);
    }
    let t1 = Instant::now();
    for p in ptrs.drain(..) {
        heap.free(p)?;
    }
    let t2 = Instant::now();
    Ok(((t1 - t0).as_nanos(), (t2 - t1).as_nanos()))
}

pub fn run_bench<M: MemorySource>(alloc: &Allocator<M>, cfg: &BenchConfig) -> Result<BenchResult, AllocError> {
    assert!(cfg.size > 0, "size must be positive");
    let ops = cfg.total_bytes / cfg.size;
    let threads = cfg.threads.max(1);
    let block = match alloc.size_classes().size_class_for(cfg.size, alloc.config()) {
        SizeClass::Class { block_size, .. } => block_size,
        SizeClass::Huge => 0,
    };
    let mut reps = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps.max(1) {
        let shares: Vec<usize> = (0..threads)
            .map(|t| ops / threads + usize::from(t < ops % threads))
            .collect();
        let times: Vec<Result<(u128, u128), AllocError>> = if threads == 1 {
            vec![run_share(alloc, cfg.size, ops)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = shares
                    .iter()
                    .map(|&n| s.spawn(move || run_share(alloc, cfg.size, n)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("bench thread panicked")).collect()
            })
        };
        let mut malloc_ns = 0u128;
        let mut free_ns = 0u128;
        for t in times {
            let (m, f) = t?;
            // Threads run concurrently; the slowest one bounds the phase.
            malloc_ns = malloc_ns.max(m);
            free_ns = free_ns.max(f);
        }
        let per = ops.max(1) as f64;
        reps.push(RepTiming {
            malloc_ns_per_op: malloc_ns as f64 / per,
            free_ns_per_op: free_ns as f64 / per,
        });
    }
    Ok(BenchResult {
        size: cfg.size,
        block,
        ops,
        reps,
    })
}
