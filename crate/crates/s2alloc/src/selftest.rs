//! Built-in self-test: crypto vectors, table invariants, the overlap formula
//! and detection smoke tests on the simulated backend.

use s2alloc_core::canary::{Backend, CanaryMac};
use s2alloc_core::model::{fbc_overlap_d, overlap_count, Ratio};
use s2alloc_core::{
    AllocError, Allocator, AllocatorConfig, DetectionKind, MacKey, SimulatedBacking, SizeClass,
    SizeClassTable,
};

/// Fault injection switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// Flip the bitmap bit of a live allocation before freeing it.
    pub bitmap: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            out += &format!("{status} {}: {}\n", c.name, c.detail);
        }
        out += if self.passed() { "selftest: ok\n" } else { "selftest: FAILED\n" };
        out
    }
}

pub const RFC4493_KEY: [u8; 16] = [
    0x2b, 0x7e, 0x15, 0x16, 0x28, 0xae, 0xd2, 0xa6, 0xab, 0xf7, 0x15, 0x88, 0x09, 0xcf, 0x4f, 0x3c,
];

const RFC4493_MESSAGE: &str = "6bc1bee22e409f96e93d7e117393172aae2d8a571e03ac9c9eb76fac45af8e5130c81c46a35ce411e5fbc1191a0a52eff69f2445df4f9b17ad2b417be66c3710";

/// (message length, tag) pairs for the RFC 4493 key.
pub const RFC4493_TAGS: [(usize, &str); 4] = [
    (0, "bb1d6929e95937287fa37d129b756746"),
    (16, "070a16b46b4d4144f79bdd9dd04a287c"),
    (40, "dfa66747de9ae63030ca32611497c827"),
    (64, "51f0bebf7e3b9d92fc49741779363cfe"),
];

fn cmac_vectors(backend: Backend) -> Check {
    let mac = CanaryMac::with_backend(&MacKey::from_bytes(RFC4493_KEY), backend);
    let msg = hex::decode(RFC4493_MESSAGE).expect("valid hex");
    let bad: Vec<usize> = RFC4493_TAGS
        .iter()
        .filter(|(len, tag)| hex::encode(mac.tag(&msg[..*len])) != *tag)
        .map(|(len, _)| *len)
        .collect();
    Check {
        name: if backend == Backend::Software { "cmac-rfc4493-software" } else { "cmac-rfc4493-aesni" },
        passed: bad.is_empty(),
        detail: if bad.is_empty() {
            "4/4 vectors".into()
        } else {
            format!("mismatching lengths {bad:?}")
        },
    }
}

fn size_classes() -> Check {
    let table = SizeClassTable::new();
    let cfg = AllocatorConfig::with_key(MacKey::from_seed(0));
    let classes = table.classes();
    let mut ok = classes.len() == 92 && classes.windows(2).all(|w| w[0] < w[1]);
    for req in 0..=70_000usize {
        let req1 = req.max(1);
        let fits = |b: usize| req1 <= cfg.usable_for(b);
        let want = classes.iter().position(|&b| fits(b)).filter(|_| req1 <= cfg.huge_threshold);
        let got = match table.size_class_for(req, &cfg) {
            SizeClass::Class { index, .. } => Some(index),
            SizeClass::Huge => None,
        };
        ok &= want == got;
    }
    Check {
        name: "size-classes",
        passed: ok,
        detail: "92 classes, smallest fitting class for requests 0..=70000".into(),
    }
}

fn overlap_formula() -> Check {
    let mut mismatches = 0;
    for b in 1..=32u64 {
        for l in 1..=b {
            for c in 1..=b {
                let den = u128::from((b - l + 1) * (b - c + 1));
                if fbc_overlap_d(b, l, c).map(|o| o.ratio) != Ok(Ratio::new(overlap_count(b, l, c), den)) {
                    mismatches += 1;
                }
            }
        }
    }
    Check {
        name: "overlap-formula",
        passed: mismatches == 0,
        detail: format!("{mismatches} mismatches against pair counting for b <= 32"),
    }
}

fn detection_smoke(faults: Faults) -> Check {
    let mut cfg = AllocatorConfig::with_key(MacKey::from_seed(7));
    cfg.seed = Some(7);
    cfg.abort_on_tamper = false;
    let alloc = Allocator::new(cfg, SimulatedBacking::default(), 0).expect("valid config");
    let mut h = alloc.thread_heap();
    let kind = |r: Result<(), AllocError>| match r {
        Err(AllocError::Detected(rep)) => Some(rep.kind),
        _ => None,
    };
    let mut failures = Vec::new();

    let p = h.malloc(24).expect("malloc");
    if faults.bitmap {
        alloc.debug_flip_bitmap(p);
    }
    if h.free(p).is_err() {
        failures.push("benign free reported");
    }
    if kind(h.free(p)) != Some(DetectionKind::DoubleFree) {
        failures.push("double free missed");
    }
    let q = h.malloc(100).expect("malloc");
    if kind(h.free(q + 16)) != Some(DetectionKind::InvalidFree) {
        failures.push("interior free missed");
    }
    let canary_at = q + alloc.usable_size(q).unwrap_or(0);
    let old = alloc.memory().peek(canary_at, 1)[0];
    alloc.memory().poke(canary_at, &[!old]);
    if kind(h.free(q)) != Some(DetectionKind::HeapCanaryTamper) {
        failures.push("overflow missed");
    }
    let s = h.malloc(40).expect("malloc");
    let slot = alloc.slot_info(s).expect("slot").slot_base;
    let _ = h.free(s);
    alloc.memory().poke(slot + 3, &[0x41]);
    if !matches!(alloc.check_fbc(slot), Ok(s2alloc_core::heap::FbcCheck::Tampered(_))) {
        failures.push("free-slot write missed");
    }
    Check {
        name: "detection-smoke",
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            "double free, interior free, overflow and free-slot write detected; benign free clean".into()
        } else {
            failures.join("; ")
        },
    }
}

pub fn run_selftest(faults: Faults) -> SelftestReport {
    let mut checks = vec![cmac_vectors(Backend::Software)];
    if Backend::AesNi.is_available() {
        checks.push(cmac_vectors(Backend::AesNi));
    }
    checks.push(size_classes());
    checks.push(overlap_formula());
    checks.push(detection_smoke(faults));
    SelftestReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes() {
        let r = run_selftest(Faults::default());
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn bitmap_fault_fails() {
        let r = run_selftest(Faults { bitmap: true });
        assert!(!r.passed());
        assert!(r.render().contains("FAIL detection-smoke"));
    }
}
