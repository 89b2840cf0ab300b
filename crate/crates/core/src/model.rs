//! Closed-form rates of the use-after-free attacker/defender game.
//!
//! Per trial the attacker writes `l` bytes through a dangling reference. It
//! wins when the write lands exactly on a live victim's sensitive field, with
//! probability `A` per victim. A write into a free block corrupts its canary
//! with probability `D`. The defender checks `2d + 1` blocks around each new
//! allocation out of `r` candidates.
//!
//! * **S1** reuses one dangling reference every round.
//! * **S2** takes a fresh reference each round, so corrupted canaries pile up
//!   across the `r` blocks and detection grows with the round number.
//!
//! Spray variants keep `m` victims alive, multiplying the per-round attack
//! chance by `m`.

use alloc::vec::Vec;
use core::fmt;

/// Exact non-negative rational.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ratio {
    pub num: u128,
    pub den: u128,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Ratio {
    /// Reduced `num / den`.
    pub fn new(num: u128, den: u128) -> Self {
        assert!(den != 0, "zero denominator");
        let g = gcd(num, den).max(1);
        Ratio {
            num: num / g,
            den: den / g,
        }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelError {
    /// Block smaller than the victim object.
    BlockTooSmall { b: u64, s: u64 },
    /// A write or canary length outside `1..=b`.
    LengthOutOfRange { name: &'static str, value: u64, b: u64 },
    /// A count that must be at least one was zero.
    Zero(&'static str),
    /// S2 needs more candidates than the check window.
    WindowTooWide { r: u64, d: u64 },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ModelError::BlockTooSmall { b, s } => write!(f, "block size {b} is smaller than object size {s}"),
            ModelError::LengthOutOfRange { name, value, b } => {
                write!(f, "{name}={value} must be between 1 and the block size {b}")
            }
            ModelError::Zero(name) => write!(f, "{name} must be at least 1"),
            ModelError::WindowTooWide { r, d } => {
                write!(f, "r={r} must exceed 2d={} for strategy S2", 2 * d)
            }
        }
    }
}

/// `A = 1 / (r (1 + floor((b - s) / 16)))`: chance one write hits the
/// victim's block and its 16-aligned offset.
pub fn attack_rate_a(r: u64, b: u64, s: u64) -> Result<Ratio, ModelError> {
    if r == 0 {
        return Err(ModelError::Zero("r"));
    }
    if b < s {
        return Err(ModelError::BlockTooSmall { b, s });
    }
    Ok(Ratio::new(1, u128::from(r) * u128::from(1 + (b - s) / 16)))
}

/// How [`fbc_overlap_d`] obtained its value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverlapPath {
    ClosedForm,
    BruteForce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Overlap {
    pub ratio: Ratio,
    pub path: OverlapPath,
}

fn check_lengths(b: u64, l: u64, c: u64) -> Result<(), ModelError> {
    for (name, v) in [("l", l), ("c", c)] {
        if v == 0 || v > b {
            return Err(ModelError::LengthOutOfRange { name, value: v, b });
        }
    }
    Ok(())
}

/// Placement pairs (write start, canary start) that overlap, counted per
/// write start.
pub fn overlap_count(b: u64, l: u64, c: u64) -> u128 {
    let last_f = b - c;
    (0..=b - l)
        .map(|w| {
            // f overlaps iff w - c < f < w + l.
            let lo = (w + 1).saturating_sub(c);
            let hi = (w + l - 1).min(last_f);
            u128::from(hi + 1 - lo)
        })
        .sum()
}

/// `D`: chance that a uniform `l`-byte write into a `b`-byte block overlaps
/// a uniformly placed `c`-byte canary.
///
/// The closed form holds when `b >= l + 2(c - 1)`; otherwise the pairs are
/// counted directly.
pub fn fbc_overlap_d(b: u64, l: u64, c: u64) -> Result<Overlap, ModelError> {
    check_lengths(b, l, c)?;
    let den = u128::from(b - l + 1) * u128::from(b - c + 1);
    if b >= l + 2 * (c - 1) {
        let (b, l, c) = (i128::from(b), i128::from(l), i128::from(c));
        let num = b * (l + c - 1) - (l - 1) * (l - 1) - (c - 1) * (c - 1) - c * l + 1;
        Ok(Overlap {
            ratio: Ratio::new(num as u128, den),
            path: OverlapPath::ClosedForm,
        })
    } else {
        Ok(Overlap {
            ratio: Ratio::new(overlap_count(b, l, c), den),
            path: OverlapPath::BruteForce,
        })
    }
}

/// Attacker strategy. Spray variants hold `m` victims.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    S1,
    S2,
    S1Spray,
    S2Spray,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::S1, Strategy::S2, Strategy::S1Spray, Strategy::S2Spray];

    /// True when the attacker takes a fresh dangling reference every round.
    pub fn fresh_reference(self) -> bool {
        matches!(self, Strategy::S2 | Strategy::S2Spray)
    }

    pub fn is_spray(self) -> bool {
        matches!(self, Strategy::S1Spray | Strategy::S2Spray)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::S1 => "s1",
            Strategy::S2 => "s2",
            Strategy::S1Spray => "s1-spray",
            Strategy::S2Spray => "s2-spray",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for Strategy {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        Strategy::ALL.into_iter().find(|st| st.name() == s).ok_or(())
    }
}

/// Game parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelParams {
    /// Candidate blocks per allocation.
    pub r: u64,
    /// Block size.
    pub b: u64,
    /// Victim object size.
    pub s: u64,
    /// Start of the sensitive field inside the object. Does not enter the
    /// rates; kept so a parameter set describes the whole scenario.
    pub s1: u64,
    /// Sensitive field length, also the attacker's write length.
    pub l: u64,
    /// Canary length.
    pub c: u64,
    /// Neighbours checked on each side.
    pub d: u64,
    /// Live victims; 1 unless spraying.
    pub m: u64,
    pub rounds: usize,
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.l == 0 {
            return Err(ModelError::Zero("l"));
        }
        if self.m == 0 {
            return Err(ModelError::Zero("m"));
        }
        attack_rate_a(self.r, self.b, self.s)?;
        check_lengths(self.b, self.l, self.c)
    }

    pub fn attack_rate(&self) -> Result<Ratio, ModelError> {
        attack_rate_a(self.r, self.b, self.s)
    }

    pub fn overlap(&self) -> Result<Overlap, ModelError> {
        fbc_overlap_d(self.b, self.l, self.c)
    }
}

/// Rates after one round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundRates {
    /// Chance the game is still undecided when this round starts.
    pub p_e: f64,
    pub p_attack: f64,
    pub p_detect: f64,
    /// Mass counted in both `p_attack` and `p_detect`: rounds where the
    /// check fires and the write lands on the victim. The recurrence books it
    /// under both, so only `p_attack + p_detect - p_tie` is bounded by one.
    pub p_tie: f64,
}

/// Conditions under which some per-round probability had to be clamped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Warnings {
    /// `m A > 1`.
    pub attack_clamped: bool,
    /// `(2d + 1) / r * D > 1`.
    pub detect_clamped: bool,
}

impl Warnings {
    pub fn any(&self) -> bool {
        self.attack_clamped || self.detect_clamped
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateSeries {
    /// `m A` after clamping.
    pub attack_per_round: f64,
    /// Round-1 attack chance from the initial write.
    pub initial_attack: f64,
    /// Per-round detection chance used in the recurrence.
    pub hazards: Vec<f64>,
    pub rounds: Vec<RoundRates>,
    pub warnings: Warnings,
}

impl RateSeries {
    pub fn final_attack(&self) -> f64 {
        self.rounds.last().map_or(self.initial_attack, |r| r.p_attack)
    }

    pub fn final_detect(&self) -> f64 {
        self.rounds.last().map_or(0.0, |r| r.p_detect)
    }
}

/// Compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    pub fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Runs the shared recurrence for any hazard sequence:
/// `P_e^1 = 1 - mA`, `P_e^{i+1} = P_e^i (1 - h_i)(1 - mA)`,
/// `P_attack^i = mA + sum P_e^j mA`, `P_detect^i = sum P_e^j h_j`.
pub fn rates_from_hazards(m_a: f64, hazards: &[f64]) -> RateSeries {
    let mut warnings = Warnings::default();
    if m_a > 1.0 {
        warnings.attack_clamped = true;
    }
    let ma = clamp01(m_a);
    let hazards: Vec<f64> = hazards
        .iter()
        .map(|&h| {
            if h > 1.0 {
                warnings.detect_clamped = true;
            }
            clamp01(h)
        })
        .collect();
    let mut p_e = 1.0 - ma;
    let mut attack = Kahan::default();
    attack.add(ma);
    let mut detect = Kahan::default();
    let mut tie = Kahan::default();
    let mut rounds = Vec::with_capacity(hazards.len());
    for &h in &hazards {
        let current = p_e;
        attack.add(current * ma);
        detect.add(current * h);
        tie.add(current * h * ma);
        rounds.push(RoundRates {
            p_e: current,
            p_attack: clamp01(attack.value()),
            p_detect: clamp01(detect.value()),
            p_tie: tie.value(),
        });
        p_e = current * (1.0 - h) * (1.0 - ma);
    }
    RateSeries {
        attack_per_round: ma,
        initial_attack: ma,
        hazards,
        rounds,
        warnings,
    }
}

fn m_times_a(p: &ModelParams) -> Result<f64, ModelError> {
    p.validate()?;
    Ok(p.m as f64 * p.attack_rate()?.to_f64())
}

/// Strategy S1 (and S1-spray when `m > 1`): a constant per-round hazard of
/// `(2d + 1) / r * D`.
pub fn s1_rates(p: &ModelParams) -> Result<RateSeries, ModelError> {
    let ma = m_times_a(p)?;
    let d = p.overlap()?.ratio.to_f64();
    let h = (2 * p.d + 1) as f64 / p.r as f64 * d;
    Ok(rates_from_hazards(ma, &alloc::vec![h; p.rounds]))
}

/// Form of the S2 per-round detection chance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum S2Hazard {
    /// `1 - ((Q r - 2d) / (r - 2d)) * prod_{j=0..2d} (Q r - j) / (r - j)`.
    Published,
    /// The same without the leading `(Q r - 2d) / (r - 2d)` factor: the
    /// chance that all `2d + 1` checked blocks are uncoloured when `Q r` of
    /// `r` are.
    WindowOnly,
}

/// S2 hazards for rounds `1..=rounds`, with `Q_i = ((r - D) / r)^i`.
pub fn s2_hazards(p: &ModelParams, form: S2Hazard) -> Result<Vec<f64>, ModelError> {
    p.validate()?;
    if p.r <= 2 * p.d {
        return Err(ModelError::WindowTooWide { r: p.r, d: p.d });
    }
    let r = p.r as f64;
    let two_d = 2 * p.d;
    let shrink = (r - p.overlap()?.ratio.to_f64()) / r;
    let mut q = 1.0;
    let mut out = Vec::with_capacity(p.rounds);
    for _ in 0..p.rounds {
        q *= shrink;
        let qr = q * r;
        let mut keep = 1.0;
        for j in 0..=two_d {
            keep *= ((qr - j as f64) / (r - j as f64)).max(0.0);
        }
        if form == S2Hazard::Published {
            keep *= ((qr - two_d as f64) / (r - two_d as f64)).max(0.0);
        }
        out.push(1.0 - keep);
    }
    Ok(out)
}

/// Strategy S2 (and S2-spray when `m > 1`).
pub fn s2_rates(p: &ModelParams) -> Result<RateSeries, ModelError> {
    s2_rates_with(p, S2Hazard::Published)
}

pub fn s2_rates_with(p: &ModelParams, form: S2Hazard) -> Result<RateSeries, ModelError> {
    let ma = m_times_a(p)?;
    Ok(rates_from_hazards(ma, &s2_hazards(p, form)?))
}

/// Dispatches on the strategy family; `p.m` selects the spray count.
pub fn rates(p: &ModelParams, strategy: Strategy) -> Result<RateSeries, ModelError> {
    if strategy.fresh_reference() {
        s2_rates(p)
    } else {
        s1_rates(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enumerate(b: u64, l: u64, c: u64) -> Ratio {
        let mut hits = 0u128;
        for w in 0..=b - l {
            for f in 0..=b - c {
                if w < f + c && f < w + l {
                    hits += 1;
                }
            }
        }
        Ratio::new(hits, u128::from((b - l + 1) * (b - c + 1)))
    }

    fn table3(c: u64) -> ModelParams {
        ModelParams { r: 256, b: 32, s: 16, s1: 0, l: 4, c, d: 2, m: 1, rounds: 500 }
    }

    #[test]
    fn a_examples() {
        assert_eq!(attack_rate_a(256, 32, 16).unwrap(), Ratio::new(1, 512));
        assert_eq!(attack_rate_a(1, 48, 48).unwrap(), Ratio::new(1, 1));
        assert_eq!(attack_rate_a(256, 64, 16).unwrap(), Ratio::new(1, 1024));
        assert!(attack_rate_a(256, 16, 32).is_err());
        assert!(attack_rate_a(0, 16, 16).is_err());
    }

    #[test]
    fn d_examples() {
        assert_eq!(fbc_overlap_d(1, 1, 1).unwrap().ratio, Ratio::new(1, 1));
        let d8 = fbc_overlap_d(32, 4, 8).unwrap();
        assert_eq!((d8.ratio, d8.path), (Ratio::new(263, 725), OverlapPath::ClosedForm));
        assert_eq!(fbc_overlap_d(32, 4, 2).unwrap().ratio, Ratio::new(143, 899));
        assert_eq!(fbc_overlap_d(8192, 8, 8).unwrap().ratio, Ratio::new(122_719, 66_994_225));
        assert_eq!(fbc_overlap_d(10, 4, 8).unwrap().path, OverlapPath::BruteForce);
        assert!(fbc_overlap_d(8, 9, 1).is_err());
        assert!(fbc_overlap_d(8, 1, 0).is_err());
    }

    #[test]
    fn closed_form_matches_enumeration_up_to_64() {
        for b in 1..=64 {
            for l in 1..=b {
                for c in 1..=b {
                    let got = fbc_overlap_d(b, l, c).unwrap().ratio;
                    assert_eq!(got, enumerate(b, l, c), "b={b} l={l} c={c}");
                }
            }
        }
    }

    #[test]
    fn inert_game() {
        // A = 0 is approached with a huge block; D = 0 needs an S2 run with
        // D forced through hazards.
        let s = rates_from_hazards(0.0, &[0.0; 50]);
        assert!(s.rounds.iter().all(|r| r.p_e == 1.0 && r.p_attack == 0.0 && r.p_detect == 0.0));
    }

    #[test]
    fn certain_first_write() {
        let p = ModelParams { r: 1, b: 32, s: 32, s1: 0, l: 4, c: 8, d: 0, m: 1, rounds: 1 };
        let s = s1_rates(&p).unwrap();
        assert_eq!(s.final_attack(), 1.0);
        assert_eq!(s.final_detect(), 0.0);
    }

    #[test]
    fn zero_rounds_is_empty() {
        let mut p = table3(2);
        p.rounds = 0;
        let s = s1_rates(&p).unwrap();
        assert!(s.rounds.is_empty());
        assert_eq!(s.final_attack(), 1.0 / 512.0);
    }

    #[test]
    fn table3_s1_anchor() {
        let s = s1_rates(&table3(2)).unwrap();
        assert!((s.final_attack() - 0.35).abs() <= 0.05, "{}", s.final_attack());
        assert!((s.final_detect() - 0.64).abs() <= 0.10, "{}", s.final_detect());
    }

    #[test]
    fn table3_s2_anchor() {
        let s = s2_rates(&table3(2)).unwrap();
        assert!((s.final_detect() - 0.95).abs() <= 0.05, "{}", s.final_detect());
        assert!((s.final_attack() - 0.055).abs() <= 0.02, "{}", s.final_attack());
    }

    #[test]
    fn s2_without_overlap_is_pure_guessing() {
        let s = rates_from_hazards(0.01, &s2_hazards(&table3(2), S2Hazard::Published).unwrap()[..0]);
        assert!(s.rounds.is_empty());
        // D = 0 cannot be built from lengths >= 1, so check Q = 1 directly.
        let p = ModelParams { r: 256, b: 4096, s: 4096, s1: 0, l: 1, c: 1, d: 2, m: 1, rounds: 3 };
        let h = s2_hazards(&p, S2Hazard::WindowOnly).unwrap();
        assert!(h.iter().all(|&x| x < 1e-3));
    }

    #[test]
    fn s2_hazard_tends_to_one() {
        let mut p = table3(8);
        p.rounds = 20_000;
        let h = s2_hazards(&p, S2Hazard::Published).unwrap();
        assert!(h.windows(2).all(|w| w[1] >= w[0] - 1e-15));
        assert!(*h.last().unwrap() > 0.999_999);
        let s = s2_rates(&p).unwrap();
        assert!(s.rounds.last().unwrap().p_e < 1e-9);
    }

    #[test]
    fn tie_mass_is_the_only_excess() {
        let s = s2_rates(&table3(2)).unwrap();
        let last = s.rounds.last().unwrap();
        let next_pe = last.p_e * (1.0 - s.hazards[499]) * (1.0 - s.attack_per_round);
        let exclusive = last.p_attack + last.p_detect - last.p_tie;
        assert!((exclusive + next_pe - 1.0).abs() < 1e-12);
    }

    #[test]
    fn s2_rejects_narrow_r() {
        let mut p = table3(2);
        p.r = 4;
        assert_eq!(s2_rates(&p).unwrap_err(), ModelError::WindowTooWide { r: 4, d: 2 });
        assert!(s1_rates(&p).is_ok());
    }

    #[test]
    fn clamping_is_flagged() {
        let p = ModelParams { r: 1, b: 32, s: 32, s1: 0, l: 32, c: 32, d: 3, m: 2, rounds: 3 };
        let s = s1_rates(&p).unwrap();
        assert!(s.warnings.attack_clamped && s.warnings.detect_clamped);
        assert_eq!(s.final_attack(), 1.0);
    }

    #[test]
    fn strategy_names_round_trip() {
        for st in Strategy::ALL {
            assert_eq!(st.name().parse::<Strategy>(), Ok(st));
        }
        assert!("s3".parse::<Strategy>().is_err());
    }

    #[test]
    fn kahan_beats_naive_sum() {
        let mut k = Kahan::default();
        let mut naive = 0.0f64;
        k.add(1.0);
        naive += 1.0;
        for _ in 0..1_000_000 {
            k.add(1e-16);
            naive += 1e-16;
        }
        assert!((k.value() - (1.0 + 1e-10)).abs() < 1e-15);
        assert_eq!(naive, 1.0);
    }

    proptest::proptest! {
        #[test]
        fn series_invariants(
            n in 0u32..=10, b16 in 1u64..=64, s16 in 1u64..=64, l in 1u64..=16, c in 1u64..=16,
            d in 0u64..=4, m in 1u64..=8, rounds in 0usize..300, fresh in proptest::bool::ANY,
        ) {
            let b = 16 * b16.max(s16);
            let p = ModelParams { r: 1 << n, b, s: 16 * s16, s1: 0, l, c, d, m, rounds };
            let series = if fresh { s2_rates(&p) } else { s1_rates(&p) };
            if let Ok(series) = series {
                let mut prev = (0.0, 0.0);
                for r in &series.rounds {
                    proptest::prop_assert!(r.p_attack + r.p_detect - r.p_tie <= 1.0 + 1e-9);
                    proptest::prop_assert!(r.p_attack >= prev.0 && r.p_detect >= prev.1);
                    proptest::prop_assert!((0.0..=1.0).contains(&r.p_e));
                    prev = (r.p_attack, r.p_detect);
                }
            }
        }

        #[test]
        fn a_nonincreasing(n in 0u32..16, s in 1u64..2048, k in 0u64..100) {
            let b = s + 16 * k;
            let a = attack_rate_a(1 << n, b, s).unwrap().to_f64();
            proptest::prop_assert!(attack_rate_a(1 << (n + 1), b, s).unwrap().to_f64() <= a);
            proptest::prop_assert!(attack_rate_a(1 << n, b + 16, s).unwrap().to_f64() <= a);
        }

        #[test]
        fn brute_force_count_matches_enumeration(b in 1u64..200, l in 1u64..200, c in 1u64..200) {
            proptest::prop_assume!(l <= b && c <= b);
            let den = u128::from((b - l + 1) * (b - c + 1));
            proptest::prop_assert_eq!(Ratio::new(overlap_count(b, l, c), den), enumerate(b, l, c));
        }
    }
}
