//! Seeded pseudo-random number generator used everywhere randomness appears.
//!
//! The whole crate promises bit-reproducible runs from a seed, including
//! across checkpoint save/restore, so we keep the generator in-house rather
//! than depending on an external crate whose stream might change between
//! versions. SplitMix64 has a single u64 of state, which makes checkpointing
//! trivial.

/// SplitMix64 generator (Steele, Lea & Flood 2014).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Restore a generator from a checkpointed state word.
    pub fn from_state(state: u64) -> Self {
        SplitMix64 { state }
    }

    /// Current state word, suitable for checkpointing.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Uses the multiply-shift reduction, which is
    /// deterministic and avoids the modulo bias of `next_u64() % n`.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below requires n > 0");
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Uniform in [lo, hi] inclusive.
    pub fn next_range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        lo + self.next_below(hi - lo + 1)
    }

    /// Standard normal via Box-Muller. One sample per call; the sibling
    /// variate is discarded so the state stays a single word.
    pub fn next_normal(&mut self) -> f64 {
        // Guard u1 away from 0 so ln() stays finite.
        let u1 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u1 = u1.max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Derive an independent stream for (seed, lane) pairs, e.g. one shuffle
    /// stream per training epoch.
    pub fn derive(seed: u64, lane: u64) -> Self {
        let mut mixer = SplitMix64::new(seed ^ lane.wrapping_mul(0xA076_1D64_78BD_642F));
        let s = mixer.next_u64();
        SplitMix64::new(s)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            slice.swap(i, j);
        }
    }
}
