//! Allocator behaviour through the public API on the simulated backend.

use proptest::prelude::*;
use s2alloc_core::heap::FbcCheck;
use s2alloc_core::{
    AllocError, Allocator, AllocatorConfig, DetectionKind, MacKey, Resolution, SimulatedBacking,
};

fn seeded(seed: u64) -> Allocator<SimulatedBacking> {
    let mut c = AllocatorConfig::with_key(MacKey::from_seed(seed));
    c.seed = Some(seed);
    c.abort_on_tamper = false;
    Allocator::new(c, SimulatedBacking::default(), 0).unwrap()
}

fn kind<T: std::fmt::Debug>(r: Result<T, AllocError>) -> Option<DetectionKind> {
    match r {
        Err(AllocError::Detected(rep)) => Some(rep.kind),
        _ => None,
    }
}

#[test]
fn report_line_format() {
    let a = seeded(1);
    let mut h = a.thread_heap();
    let p = h.malloc(24).unwrap();
    h.free(p).unwrap();
    let Err(AllocError::Detected(rep)) = h.free(p) else { panic!("no report") };
    let line = rep.to_string();
    assert!(line.starts_with("s2alloc: DOUBLE_FREE slot=0x"), "{line}");
    assert!(line.contains(" class=32 detail=pointer=0x"), "{line}");
}

#[test]
fn usable_size_round_trips_through_realloc() {
    let a = seeded(2);
    let mut h = a.thread_heap();
    let mut p = h.malloc(10).unwrap();
    a.memory().poke(p, b"0123456789");
    for size in [40, 300, 2000, 9000, 70_000, 20] {
        p = h.realloc(p, size).unwrap();
        let usable = a.usable_size(p).unwrap();
        // Slots report the request exactly; huge blocks the whole mapping.
        match a.resolve(p) {
            Resolution::Huge { len, .. } => assert_eq!(usable, len),
            _ => assert_eq!(usable, size),
        }
        assert!(usable >= size);
        assert_eq!(a.memory().peek(p, 10), b"0123456789");
    }
    h.free(p).unwrap();
}

#[test]
fn heaps_on_other_threads_can_free() {
    let a = seeded(3);
    let ptrs: Vec<usize> = {
        let mut h = a.thread_heap();
        (0..500).map(|i| h.malloc(16 + i % 900).unwrap()).collect()
    };
    std::thread::scope(|s| {
        for chunk in ptrs.chunks(125) {
            let a = &a;
            s.spawn(move || {
                let mut h = a.thread_heap();
                for &p in chunk {
                    h.free(p).unwrap();
                }
            });
        }
    });
    let mut h = a.thread_heap();
    assert_eq!(kind(h.free(ptrs[0])), Some(DetectionKind::DoubleFree));
}

#[test]
fn tampered_free_slot_is_caught_when_reused() {
    let mut c = AllocatorConfig::with_key(MacKey::from_seed(4));
    c.seed = Some(4);
    c.entropy_bits = 0;
    c.nearby_check = 0;
    c.guard_page_rate = 0.0;
    let a = Allocator::new(c, SimulatedBacking::default(), 0).unwrap();
    let mut h = a.thread_heap();
    // With r = 1 and every other slot taken, the freed slot is the only candidate.
    let live: Vec<usize> = (0..256).map(|_| h.malloc(24).unwrap()).collect();
    let victim = live[17];
    let base = a.slot_info(victim).unwrap().slot_base;
    h.free(victim).unwrap();
    a.memory().poke(base + 5, &[0x77]);
    assert!(matches!(a.check_fbc(base), Ok(FbcCheck::Tampered(_))));
    assert_eq!(kind(h.malloc(24)), Some(DetectionKind::FbcTamper));
}

#[test]
fn unknown_pointers_are_invalid_frees() {
    let a = seeded(5);
    let mut h = a.thread_heap();
    assert_eq!(a.resolve(0x1234_5670), Resolution::Unknown);
    assert_eq!(kind(h.free(0x1234_5670)), Some(DetectionKind::InvalidFree));
}

#[derive(Clone, Debug)]
enum Op {
    Malloc(usize),
    Free(usize),
    Realloc(usize, usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (1usize..3000).prop_map(Op::Malloc),
        1 => (60_000usize..80_000).prop_map(Op::Malloc),
        4 => any::<usize>().prop_map(Op::Free),
        2 => (any::<usize>(), 1usize..5000).prop_map(|(i, n)| Op::Realloc(i, n)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Benign traces never report, keep contents, and never overlap.
    #[test]
    fn benign_traces(seed in 0u64..10_000, ops in prop::collection::vec(op(), 1..300)) {
        let a = seeded(seed);
        let mut h = a.thread_heap();
        let mut live: Vec<(usize, usize, u8)> = Vec::new();
        for (n, o) in ops.into_iter().enumerate() {
            let tag = (n % 250) as u8 + 1;
            match o {
                Op::Malloc(size) => {
                    let p = h.malloc(size).unwrap();
                    prop_assert_eq!(p % 16, 0);
                    a.memory().poke(p, &vec![tag; size]);
                    live.push((p, size, tag));
                }
                Op::Free(i) if !live.is_empty() => {
                    let (p, size, t) = live.swap_remove(i % live.len());
                    prop_assert!(a.memory().peek(p, size).iter().all(|&b| b == t));
                    h.free(p).unwrap();
                }
                Op::Realloc(i, size) if !live.is_empty() => {
                    let i = i % live.len();
                    let (p, old, t) = live[i];
                    let q = h.realloc(p, size).unwrap();
                    prop_assert!(a.memory().peek(q, old.min(size)).iter().all(|&b| b == t));
                    a.memory().poke(q, &vec![t; size]);
                    live[i] = (q, size, t);
                }
                _ => {}
            }
        }
        let mut spans: Vec<(usize, usize)> = live.iter().map(|&(p, s, _)| (p, s)).collect();
        spans.sort();
        prop_assert!(spans.windows(2).all(|w| w[0].0 + w[0].1 <= w[1].0));
        for (p, _, _) in live {
            h.free(p).unwrap();
        }
        prop_assert!(a.memory().trap_log().is_empty());
    }
}
