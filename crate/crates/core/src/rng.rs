//! PCG-XSH-RR 64/32 generator.
//!
//! Used for every placement decision in the allocator: slot choice, in-slot
//! offsets, FBC positions and guard pages. Outputs never leave the allocator,
//! which is what makes a non-cryptographic generator acceptable here; integrity
//! is the job of the keyed MAC in [`crate::canary`].

const MULTIPLIER: u64 = 6_364_136_223_846_793_005;

/// PCG32 state. `increment` selects the stream and is always odd.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pcg32 {
    state: u64,
    increment: u64,
}

impl Pcg32 {
    /// Seeds the generator the way the reference `pcg32_srandom_r` does:
    /// `init_state` picks the starting point and `stream` the sequence.
    pub fn new(init_state: u64, stream: u64) -> Self {
        let mut rng = Pcg32 {
            state: 0,
            increment: (stream << 1) | 1,
        };
        rng.step();
        rng.state = rng.state.wrapping_add(init_state);
        rng.step();
        rng
    }

    /// Builds a generator from raw state. Returns `None` for an even increment.
    pub fn from_raw(state: u64, increment: u64) -> Option<Self> {
        (increment & 1 == 1).then_some(Pcg32 { state, increment })
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn increment(&self) -> u64 {
        self.increment
    }

    #[inline]
    fn step(&mut self) {
        self.state = self
            .state
            .wrapping_mul(MULTIPLIER)
            .wrapping_add(self.increment);
    }

    #[inline]
    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.step();
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let hi = self.next_u32() as u64;
        let lo = self.next_u32() as u64;
        (hi << 32) | lo
    }

    /// Uniform integer in `[0, bound)` for `1 <= bound <= 2^32`.
    ///
    /// Power-of-two bounds take the low bits of one output; other bounds use
    /// the widening multiply with rejection of the short zone, so the result is
    /// exactly uniform in both cases.
    ///
    /// # Panics
    ///
    /// If `bound` is zero or larger than `2^32`.
    #[inline]
    pub fn uniform_below(&mut self, bound: u64) -> u64 {
        assert!(
            (1..=1 << 32).contains(&bound),
            "uniform_below: bound {bound} out of range"
        );
        if bound == 1 << 32 {
            return self.next_u32() as u64;
        }
        if bound.is_power_of_two() {
            return (self.next_u32() as u64) & (bound - 1);
        }
        let bound32 = bound as u32;
        let threshold = bound32.wrapping_neg() % bound32;
        loop {
            let m = (self.next_u32() as u64) * bound;
            if (m as u32) >= threshold {
                return m >> 32;
            }
        }
    }

    /// Uniform `f64` in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// `true` with probability `p` (clamped to `[0, 1]`).
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            false
        } else if p >= 1.0 {
            true
        } else {
            self.next_f64() < p
        }
    }
}
