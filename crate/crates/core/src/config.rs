//! Allocator parameters and the size-class table.

use alloc::string::{String, ToString};
use core::fmt;

use crate::canary::{MacKey, MAX_CANARY_LEN};

/// Number of small (16 B step), medium (512 B step) and large (4 KiB step) classes.
pub const SMALL_CLASSES: usize = 64;
pub const MEDIUM_CLASSES: usize = 14;
pub const LARGE_CLASSES: usize = 14;
pub const NUM_CLASSES: usize = SMALL_CLASSES + MEDIUM_CLASSES + LARGE_CLASSES;

/// Slots per sub-bag.
pub const SLOTS_PER_SUBBAG: usize = 256;

/// All in-slot offsets are multiples of this.
pub const ALIGNMENT: usize = 16;

/// Every tunable of the allocator. Immutable once an allocator is built.
#[derive(Clone, Debug)]
pub struct AllocatorConfig {
    /// `n`; a slot is drawn from at least `r = 2^n` free slots.
    pub entropy_bits: u32,
    /// `d`; free neighbours checked on each side of the chosen slot.
    pub nearby_check: usize,
    /// `c`; FBC length in bytes for slots of at least one page.
    pub fbc_len: usize,
    /// `k`; `ceil(b / k)` bytes of every block are reserved for offset entropy.
    pub rio_denominator: usize,
    /// Probability that a new sub-bag receives a guard page.
    pub guard_page_rate: f64,
    /// `iota`; heap canary length.
    pub heap_canary_len: usize,
    pub page_size: usize,
    /// Requests above this always take the huge path.
    pub huge_threshold: usize,
    /// Size of each pool reservation; the pool chains more as needed.
    pub pool_reservation: usize,
    pub mac_key: MacKey,
    pub seed: Option<u64>,
    pub abort_on_tamper: bool,
}

impl AllocatorConfig {
    /// Defaults with the given key.
    pub fn with_key(mac_key: MacKey) -> Self {
        AllocatorConfig {
            entropy_bits: 8,
            nearby_check: 2,
            fbc_len: 8,
            rio_denominator: 4,
            guard_page_rate: 0.10,
            heap_canary_len: 1,
            page_size: 4096,
            huge_threshold: 65536,
            pool_reservation: 1 << 30,
            mac_key,
            seed: None,
            abort_on_tamper: true,
        }
    }

    /// `r`, the minimum number of free candidates per allocation.
    pub fn min_free(&self) -> usize {
        1usize << self.entropy_bits
    }

    /// Bytes of a `block_size` block that never hold object data.
    pub fn reserve_for(&self, block_size: usize) -> usize {
        block_size
            .div_ceil(self.rio_denominator)
            .max(self.heap_canary_len)
    }

    /// Largest request a block of `block_size` bytes accepts.
    pub fn usable_for(&self, block_size: usize) -> usize {
        block_size - self.reserve_for(block_size)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.entropy_bits > 16 {
            return Err(ConfigError::invalid("S2_ENTROPY_BITS", self.entropy_bits, "must be <= 16"));
        }
        if self.rio_denominator < 2 {
            return Err(ConfigError::invalid("S2_RIO_FRACTION", self.rio_denominator, "denominator must be >= 2"));
        }
        if !(1..=MAX_CANARY_LEN).contains(&self.fbc_len) {
            return Err(ConfigError::invalid("S2_FBC_LEN", self.fbc_len, "must be in 1..=16"));
        }
        if !(0.0..=1.0).contains(&self.guard_page_rate) {
            return Err(ConfigError::invalid("S2_GUARD_RATE", self.guard_page_rate, "must be in [0, 1]"));
        }
        if !(1..=MAX_CANARY_LEN).contains(&self.heap_canary_len) {
            return Err(ConfigError::invalid("heap_canary_len", self.heap_canary_len, "must be in 1..=16"));
        }
        if !self.page_size.is_power_of_two() || self.page_size < ALIGNMENT {
            return Err(ConfigError::invalid("page_size", self.page_size, "must be a power of two >= 16"));
        }
        Ok(())
    }
}

/// A rejected configuration value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub value: String,
    pub reason: &'static str,
}

impl ConfigError {
    fn invalid(key: &str, value: impl fmt::Display, reason: &'static str) -> Self {
        ConfigError {
            key: key.to_string(),
            value: value.to_string(),
            reason,
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: invalid value {:?}: {}", self.key, self.value, self.reason)
    }
}

fn parse<T: core::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .trim()
        .parse()
        .map_err(|_| ConfigError::invalid(key, value, "not a valid decimal value"))
}

/// Applies recognized `S2_*` keys on top of the defaults.
///
/// Unrecognized keys are ignored so the whole process environment can be
/// passed in.
pub fn load_config<I, K, V>(environment: I, mac_key: MacKey) -> Result<AllocatorConfig, ConfigError>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut cfg = AllocatorConfig::with_key(mac_key);
    for (key, value) in environment {
        let (key, value) = (key.as_ref(), value.as_ref());
        match key {
            "S2_ENTROPY_BITS" => cfg.entropy_bits = parse(key, value)?,
            "S2_NEARBY_D" => cfg.nearby_check = parse(key, value)?,
            "S2_FBC_LEN" => cfg.fbc_len = parse(key, value)?,
            "S2_RIO_FRACTION" => cfg.rio_denominator = parse(key, value)?,
            "S2_GUARD_RATE" => cfg.guard_page_rate = parse(key, value)?,
            "S2_SEED" => cfg.seed = Some(parse(key, value)?),
            "S2_ABORT_ON_TAMPER" => {
                cfg.abort_on_tamper = match parse::<u8>(key, value)? {
                    0 => false,
                    1 => true,
                    _ => return Err(ConfigError::invalid(key, value, "must be 0 or 1")),
                }
            }
            _ => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Result of mapping a request onto the table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeClass {
    Class { index: usize, block_size: usize },
    Huge,
}

/// The 92 block sizes: 16..=1024 step 16, 1536..=8192 step 512,
/// 12288..=65536 step 4096.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SizeClassTable {
    classes: [usize; NUM_CLASSES],
}

impl Default for SizeClassTable {
    fn default() -> Self {
        Self::new()
    }
}

impl SizeClassTable {
    pub const fn new() -> Self {
        let mut classes = [0usize; NUM_CLASSES];
        let mut i = 0;
        while i < SMALL_CLASSES {
            classes[i] = 16 * (i + 1);
            i += 1;
        }
        while i < SMALL_CLASSES + MEDIUM_CLASSES {
            classes[i] = 1024 + 512 * (i - SMALL_CLASSES + 1);
            i += 1;
        }
        while i < NUM_CLASSES {
            classes[i] = 8192 + 4096 * (i - SMALL_CLASSES - MEDIUM_CLASSES + 1);
            i += 1;
        }
        SizeClassTable { classes }
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn block_size(&self, index: usize) -> usize {
        self.classes[index]
    }

    /// Smallest class whose usable size holds `request`; a zero request is
    /// served as one byte.
    pub fn size_class_for(&self, request: usize, cfg: &AllocatorConfig) -> SizeClass {
        let request = request.max(1);
        if request > cfg.huge_threshold {
            return SizeClass::Huge;
        }
        // Usable size is monotone in the block size, so binary search works.
        let idx = self
            .classes
            .partition_point(|&b| cfg.usable_for(b) < request);
        match self.classes.get(idx) {
            Some(&block_size) => SizeClass::Class {
                index: idx,
                block_size,
            },
            None => SizeClass::Huge,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn cfg() -> AllocatorConfig {
        AllocatorConfig::with_key(MacKey::from_seed(0))
    }

    fn env(pairs: &[(&str, &str)]) -> Result<AllocatorConfig, ConfigError> {
        load_config(pairs.iter().copied(), MacKey::from_seed(0))
    }

    #[test]
    fn empty_environment_gives_defaults() {
        let c = env(&[]).unwrap();
        assert_eq!(c.entropy_bits, 8);
        assert_eq!(c.min_free(), 256);
        assert_eq!(c.nearby_check, 2);
        assert_eq!(c.fbc_len, 8);
        assert_eq!(c.rio_denominator, 4);
        assert_eq!(c.guard_page_rate, 0.10);
        assert_eq!(c.heap_canary_len, 1);
        assert!(c.abort_on_tamper);
        assert_eq!(c.seed, None);
    }

    #[test]
    fn single_override() {
        let c = env(&[("S2_GUARD_RATE", "0")]).unwrap();
        assert_eq!(c.guard_page_rate, 0.0);
        assert_eq!(c.nearby_check, 2);
        assert_eq!(c.fbc_len, 8);
    }

    #[test]
    fn negative_nearby_rejected_with_key_name() {
        let err = env(&[("S2_NEARBY_D", "-1")]).unwrap_err();
        assert_eq!(err.key, "S2_NEARBY_D");
        assert!(err.to_string().contains("S2_NEARBY_D"));
    }

    #[test]
    fn out_of_domain_values_rejected() {
        assert!(env(&[("S2_ENTROPY_BITS", "17")]).is_err());
        assert!(env(&[("S2_RIO_FRACTION", "1")]).is_err());
        assert!(env(&[("S2_FBC_LEN", "0")]).is_err());
        assert!(env(&[("S2_GUARD_RATE", "1.5")]).is_err());
        assert!(env(&[("S2_ABORT_ON_TAMPER", "2")]).is_err());
        assert!(env(&[("S2_SEED", "abc")]).is_err());
    }

    #[test]
    fn recognized_keys_parse() {
        let c = env(&[
            ("S2_ENTROPY_BITS", "4"),
            ("S2_SEED", "99"),
            ("S2_ABORT_ON_TAMPER", "0"),
            ("PATH", "/usr/bin"),
        ])
        .unwrap();
        assert_eq!(c.min_free(), 16);
        assert_eq!(c.seed, Some(99));
        assert!(!c.abort_on_tamper);
    }

    #[test]
    fn table_shape() {
        let t = SizeClassTable::new();
        let c = t.classes();
        assert_eq!(c.len(), 92);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert_eq!((c[0], c[63]), (16, 1024));
        assert_eq!((c[64], c[77]), (1536, 8192));
        assert_eq!((c[78], c[91]), (12288, 65536));
        let steps: Vec<usize> = vec![c[1] - c[0], c[65] - c[64], c[79] - c[78]];
        assert_eq!(steps, [16, 512, 4096]);
        assert_eq!(SizeClassTable::new(), t);
    }

    fn scan(request: usize, cfg: &AllocatorConfig) -> Option<usize> {
        // Linear scan with e = b / 4, independent of the binary search.
        if request > cfg.huge_threshold {
            return None;
        }
        SizeClassTable::new()
            .classes()
            .iter()
            .copied()
            .find(|&b| request.max(1) <= b - b / 4)
    }

    #[test]
    fn class_examples() {
        let t = SizeClassTable::new();
        let c = cfg();
        let bs = |req| match t.size_class_for(req, &c) {
            SizeClass::Class { block_size, .. } => Some(block_size),
            SizeClass::Huge => None,
        };
        assert_eq!(bs(17), Some(32));
        assert_eq!(bs(1), Some(16));
        assert_eq!(bs(0), Some(16));
        assert_eq!(bs(1024), Some(1536));
        assert_eq!(bs(65537), None);
        assert_eq!(bs(49152), Some(65536));
        assert_eq!(bs(49153), None);
        for req in [12, 13, 24, 25, 768, 769, 4000, 49151] {
            assert_eq!(bs(req), scan(req, &c), "request {req}");
        }
    }

    proptest::proptest! {
        #[test]
        fn class_is_smallest_fitting(request in 0usize..70_000) {
            let t = SizeClassTable::new();
            let c = cfg();
            match t.size_class_for(request, &c) {
                SizeClass::Class { index, block_size } => {
                    let req = request.max(1);
                    proptest::prop_assert!(req <= block_size - block_size.div_ceil(4));
                    if index > 0 {
                        let prev = t.block_size(index - 1);
                        proptest::prop_assert!(req > prev - prev.div_ceil(4));
                    }
                    proptest::prop_assert_eq!(Some(block_size), scan(request, &c));
                }
                SizeClass::Huge => proptest::prop_assert_eq!(scan(request, &c), None),
            }
        }
    }
}
