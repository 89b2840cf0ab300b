//! Monte Carlo play-out of the attacker/defender game, and an attack harness
//! that drives the real allocator.
//!
//! The abstract game treats the attack and the canary corruption of one write
//! as independent events:
//!
//! * `m` victims sit on distinct uniform blocks, each at a uniform 16-aligned
//!   offset. The attacker's write hits when its block holds a victim and its
//!   guessed offset matches.
//! * The write position inside the block is uniform. It corrupts the block's
//!   canary when it overlaps the `c` canary bytes.
//! * S1 writes through the same block every round, and that block is freshly
//!   re-freed each time, so its canary state is replaced by the latest write.
//!   S2 writes through a fresh uniform block each round, every block keeps
//!   the canary position it got at the start, and corruption accumulates.
//! * Each round the defender allocates at a uniform block and checks it plus
//!   `d` neighbours on either side, wrapping around the `r` blocks.
//!
//! A round is a check followed by a write. When both succeed in the same
//! round the trial counts as an attack win and as a tie; the closed-form
//! rates book such rounds under both outcomes.

use rayon::prelude::*;
use s2alloc_core::model::{self, ModelParams, Strategy};
use s2alloc_core::os_mem::SimulatedBacking;
use s2alloc_core::{AllocError, Allocator, AllocatorConfig, MacKey, Pcg32};

/// How one trial ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Attack,
    Detect,
    /// Attack and detection in the same round.
    Tie,
    Neither,
}

/// Aggregated results of a batch of trials.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SimResult {
    pub trials: u64,
    /// Attack wins, ties excluded.
    pub attack: u64,
    /// Detections, ties excluded.
    pub detect: u64,
    pub tie: u64,
    pub neither: u64,
    /// Per round: trials still undecided at the check, and how many of those
    /// the check caught.
    pub at_risk: Vec<u64>,
    pub caught: Vec<u64>,
}

/// A rate with its binomial standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub rate: f64,
    pub sigma: f64,
}

impl Estimate {
    pub fn from_counts(hits: u64, n: u64) -> Option<Self> {
        (n > 0).then(|| {
            let rate = hits as f64 / n as f64;
            Estimate {
                rate,
                sigma: (rate * (1.0 - rate) / n as f64).sqrt(),
            }
        })
    }

    /// Half-width of the normal-approximation 95% interval.
    pub fn ci95(&self) -> f64 {
        1.96 * self.sigma
    }
}

impl SimResult {
    fn with_rounds(rounds: usize) -> Self {
        SimResult {
            at_risk: vec![0; rounds],
            caught: vec![0; rounds],
            ..SimResult::default()
        }
    }

    fn merge(mut self, other: SimResult) -> SimResult {
        self.trials += other.trials;
        self.attack += other.attack;
        self.detect += other.detect;
        self.tie += other.tie;
        self.neither += other.neither;
        for (a, b) in self.at_risk.iter_mut().zip(&other.at_risk) {
            *a += b;
        }
        for (a, b) in self.caught.iter_mut().zip(&other.caught) {
            *a += b;
        }
        self
    }

    fn record(&mut self, outcome: Outcome) {
        self.trials += 1;
        match outcome {
            Outcome::Attack => self.attack += 1,
            Outcome::Detect => self.detect += 1,
            Outcome::Tie => self.tie += 1,
            Outcome::Neither => self.neither += 1,
        }
    }

    /// `None` when no trial ran.
    pub fn is_empty(&self) -> bool {
        self.trials == 0
    }

    /// Attack wins including ties; comparable to the closed-form attack rate.
    pub fn attack_rate(&self) -> Option<Estimate> {
        Estimate::from_counts(self.attack + self.tie, self.trials)
    }

    /// Detections including ties; comparable to the closed-form detect rate.
    pub fn detect_rate(&self) -> Option<Estimate> {
        Estimate::from_counts(self.detect + self.tie, self.trials)
    }

    pub fn tie_rate(&self) -> Option<Estimate> {
        Estimate::from_counts(self.tie, self.trials)
    }

    pub fn neither_rate(&self) -> Option<Estimate> {
        Estimate::from_counts(self.neither, self.trials)
    }

    /// Empirical per-round detection chance among undecided trials.
    pub fn hazards(&self) -> Vec<f64> {
        self.at_risk
            .iter()
            .zip(&self.caught)
            .map(|(&n, &k)| if n == 0 { 0.0 } else { k as f64 / n as f64 })
            .collect()
    }
}

/// Per-trial generator: one PCG stream per trial index, so results do not
/// depend on how trials are split across threads.
pub fn trial_rng(seed: u64, trial: u64) -> Pcg32 {
    Pcg32::new(seed, trial)
}

struct Game<'a> {
    p: &'a ModelParams,
    fresh: bool,
    offsets: u64,
    canary: Vec<u64>,
    colored: Vec<bool>,
    victims: Vec<u64>,
    target: u64,
}

impl<'a> Game<'a> {
    fn new(p: &'a ModelParams, strategy: Strategy) -> Self {
        let fresh = strategy.fresh_reference();
        Game {
            p,
            fresh,
            offsets: 1 + (p.b - p.s) / 16,
            canary: vec![0; if fresh { p.r as usize } else { 0 }],
            colored: vec![false; p.r as usize],
            victims: Vec::with_capacity(p.m as usize),
            target: 0,
        }
    }

    fn reset(&mut self, rng: &mut Pcg32) {
        let p = self.p;
        self.colored.fill(false);
        for f in &mut self.canary {
            *f = rng.uniform_below(p.b - p.c + 1);
        }
        self.target = rng.uniform_below(p.r);
    }

    fn overlaps(&self, w: u64, f: u64) -> bool {
        w < f + self.p.c && f < w + self.p.l
    }

    /// One write; returns true when it lands on a victim's field.
    fn attempt(&mut self, rng: &mut Pcg32) -> bool {
        let p = self.p;
        let block = if self.fresh { rng.uniform_below(p.r) } else { self.target };
        self.victims.clear();
        let m = p.m.min(p.r);
        while (self.victims.len() as u64) < m {
            let v = rng.uniform_below(p.r);
            if !self.victims.contains(&v) {
                self.victims.push(v);
            }
        }
        let hit = self.victims.contains(&block)
            && rng.uniform_below(self.offsets) == rng.uniform_below(self.offsets);
        let w = rng.uniform_below(p.b - p.l + 1);
        if self.fresh {
            if self.overlaps(w, self.canary[block as usize]) {
                self.colored[block as usize] = true;
            }
        } else {
            let f = rng.uniform_below(p.b - p.c + 1);
            self.colored[block as usize] = self.overlaps(w, f);
        }
        hit
    }

    fn check(&self, rng: &mut Pcg32) -> bool {
        let r = self.p.r;
        let v = rng.uniform_below(r);
        let d = self.p.d;
        (0..=2 * d).any(|o| self.colored[((v + r - d % r + o) % r) as usize])
    }

    fn play(&mut self, rng: &mut Pcg32, acc: &mut SimResult) -> Outcome {
        self.reset(rng);
        if self.attempt(rng) {
            return Outcome::Attack;
        }
        for round in 0..self.p.rounds {
            let caught = self.check(rng);
            acc.at_risk[round] += 1;
            acc.caught[round] += u64::from(caught);
            let hit = self.attempt(rng);
            match (caught, hit) {
                (true, true) => return Outcome::Tie,
                (true, false) => return Outcome::Detect,
                (false, true) => return Outcome::Attack,
                (false, false) => {}
            }
        }
        Outcome::Neither
    }
}

const CHUNK: u64 = 1024;

/// Plays `trials` independent games. Deterministic in `seed` regardless of
/// thread count.
pub fn simulate_strategy(
    p: &ModelParams,
    strategy: Strategy,
    trials: u64,
    seed: u64,
) -> Result<SimResult, model::ModelError> {
    p.validate()?;
    let chunks = trials.div_ceil(CHUNK);
    Ok((0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut game = Game::new(p, strategy);
            let mut acc = SimResult::with_rounds(p.rounds);
            for t in chunk * CHUNK..((chunk + 1) * CHUNK).min(trials) {
                let mut rng = trial_rng(seed, t);
                let outcome = game.play(&mut rng, &mut acc);
                acc.record(outcome);
            }
            acc
        })
        .reduce(|| SimResult::with_rounds(p.rounds), SimResult::merge))
}

/// Draws `D` directly: uniform `l`-byte writes against uniform `c`-byte
/// canaries in a `b`-byte block. Returns the overlap count.
pub fn sample_overlap(b: u64, l: u64, c: u64, samples: u64, seed: u64) -> u64 {
    let mut rng = Pcg32::new(seed, 0x0d);
    (0..samples)
        .filter(|_| {
            let w = rng.uniform_below(b - l + 1);
            let f = rng.uniform_below(b - c + 1);
            w < f + c && f < w + l
        })
        .count() as u64
}

/// Parameters of the allocator-driven harness that the allocator config
/// does not already fix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HarnessParams {
    /// Victim object size.
    pub s: usize,
    /// Sensitive field offset within the victim.
    pub s1: usize,
    /// Attacker write length.
    pub l: usize,
    pub m: usize,
    pub rounds: usize,
}

/// Drives the real allocator on a simulated backend.
///
/// Each trial builds a fresh allocator, mints a dangling pointer by
/// allocating and freeing a victim-sized object, then plays rounds: allocate
/// the victims, write `l` attacker bytes at the dangling pointer plus `s1`,
/// free the victims. A detection report at any allocator call is a defender
/// win; a write that starts exactly at a live victim's field is an attacker
/// win. S2 mints a fresh dangling pointer every round.
pub fn simulate_allocator_attack(
    cfg: &AllocatorConfig,
    h: HarnessParams,
    strategy: Strategy,
    trials: u64,
    seed: u64,
) -> Result<SimResult, AllocError> {
    let chunks = trials.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut acc = SimResult::with_rounds(h.rounds);
            for t in chunk * CHUNK..((chunk + 1) * CHUNK).min(trials) {
                let outcome = harness_trial(cfg, h, strategy, seed, t, &mut acc)?;
                acc.record(outcome);
            }
            Ok(acc)
        })
        .try_reduce(|| SimResult::with_rounds(h.rounds), |a, b| Ok(a.merge(b)))
}

fn harness_trial(
    cfg: &AllocatorConfig,
    h: HarnessParams,
    strategy: Strategy,
    seed: u64,
    trial: u64,
    acc: &mut SimResult,
) -> Result<Outcome, AllocError> {
    let mut cfg = cfg.clone();
    let trial_seed = trial_rng(seed, trial).next_u64();
    cfg.seed = Some(trial_seed);
    cfg.mac_key = MacKey::from_seed(trial_seed);
    let page = cfg.page_size;
    let alloc = Allocator::new(cfg, SimulatedBacking::new(page), 0)
        .map_err(|_| AllocError::OutOfMemory)?;
    let mut heap = alloc.thread_heap();
    let mut rng = trial_rng(seed ^ 0x5eed, trial);
    let payload: Vec<u8> = (0..h.l).map(|_| 1 + rng.uniform_below(255) as u8).collect();

    let mut dangling = 0;
    let mut victims = Vec::with_capacity(h.m);
    let rounds = h.rounds.max(1);
    for round in 0..rounds {
        if round < acc.at_risk.len() {
            acc.at_risk[round] += 1;
        }
        let step = (|| -> Result<Option<Outcome>, AllocError> {
            if round == 0 || strategy.fresh_reference() {
                let p = heap.malloc(h.s)?;
                heap.free(p)?;
                dangling = p;
            }
            while victims.len() < h.m {
                victims.push(heap.malloc(h.s)?);
            }
            let target = dangling + h.s1;
            if victims.iter().any(|&v| v + h.s1 == target) {
                return Ok(Some(Outcome::Attack));
            }
            if alloc.memory().write_checked(target, &payload).is_err() {
                // Guard page trap.
                return Ok(Some(Outcome::Detect));
            }
            if !strategy.is_spray() {
                for v in victims.drain(..) {
                    heap.free(v)?;
                }
            }
            Ok(None)
        })();
        match step {
            Ok(None) => {}
            Ok(Some(outcome)) => {
                if outcome == Outcome::Detect && round < acc.caught.len() {
                    acc.caught[round] += 1;
                }
                return Ok(outcome);
            }
            Err(AllocError::Detected(_)) => {
                if round < acc.caught.len() {
                    acc.caught[round] += 1;
                }
                return Ok(Outcome::Detect);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Outcome::Neither)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(b: u64, m: u64, rounds: usize) -> ModelParams {
        ModelParams { r: 256, b, s: 16, s1: 0, l: 4, c: 8, d: 2, m, rounds }
    }

    #[test]
    fn outcomes_partition_trials() {
        let r = simulate_strategy(&params(32, 1, 50), Strategy::S2, 3000, 1).unwrap();
        assert_eq!(r.attack + r.detect + r.tie + r.neither, 3000);
        let sum = r.attack_rate().unwrap().rate + r.detect_rate().unwrap().rate
            - r.tie_rate().unwrap().rate
            + r.neither_rate().unwrap().rate;
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = simulate_strategy(&params(64, 4, 100), Strategy::S1Spray, 5000, 9).unwrap();
        let b = simulate_strategy(&params(64, 4, 100), Strategy::S1Spray, 5000, 9).unwrap();
        let c = simulate_strategy(&params(64, 4, 100), Strategy::S1Spray, 5000, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn certain_attack() {
        let p = ModelParams { r: 1, b: 32, s: 32, s1: 0, l: 4, c: 8, d: 0, m: 1, rounds: 1 };
        let r = simulate_strategy(&p, Strategy::S1, 1000, 2).unwrap();
        assert_eq!(r.attack, 1000);
    }

    #[test]
    fn zero_trials_is_empty() {
        let r = simulate_strategy(&params(32, 1, 10), Strategy::S1, 0, 2).unwrap();
        assert!(r.is_empty());
        assert!(r.attack_rate().is_none());
    }

    #[test]
    fn overlap_sampler_matches_closed_form() {
        let n = 200_000;
        let hits = sample_overlap(32, 4, 8, n, 3);
        let est = Estimate::from_counts(hits, n).unwrap();
        let d = 263.0 / 725.0;
        assert!((est.rate - d).abs() < 4.0 * (d * (1.0 - d) / n as f64).sqrt());
    }

    #[test]
    fn s1_agrees_with_closed_form() {
        let p = params(32, 1, 200);
        let n = 40_000;
        let sim = simulate_strategy(&p, Strategy::S1, n, 4).unwrap();
        let an = model::s1_rates(&p).unwrap();
        for (emp, want) in [
            (sim.attack_rate().unwrap(), an.final_attack()),
            (sim.detect_rate().unwrap(), an.final_detect()),
        ] {
            let sigma = (want * (1.0 - want) / n as f64).sqrt();
            assert!((emp.rate - want).abs() <= 4.0 * sigma, "{} vs {want}", emp.rate);
        }
    }

    #[test]
    fn harness_partitions_and_is_deterministic() {
        let mut cfg = AllocatorConfig::with_key(MacKey::from_seed(0));
        cfg.guard_page_rate = 0.0;
        let h = HarnessParams { s: 16, s1: 0, l: 4, m: 1, rounds: 20 };
        let a = simulate_allocator_attack(&cfg, h, Strategy::S1, 200, 5).unwrap();
        let b = simulate_allocator_attack(&cfg, h, Strategy::S1, 200, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.attack + a.detect + a.tie + a.neither, 200);
        assert!(simulate_allocator_attack(&cfg, h, Strategy::S1, 0, 5).unwrap().is_empty());
    }
}
