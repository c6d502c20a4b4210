//! Deterministic, platform-independent pseudo-random generation.
//!
//! All shuffling, subsampling and weight initialization in this crate goes
//! through [`SplitMix64`], Steele/Lea/Flood's 64-bit mixer with the published
//! constants. The generator is tiny, has no platform-dependent state, and a
//! given seed produces the same stream on every architecture, which is what
//! the reproducibility contracts in the test suite rely on.

/// SplitMix64 generator. Constants are the reference values:
/// increment `0x9E3779B97F4A7C15`, mix multipliers `0xBF58476D1CE4E5B9`
/// and `0x94D049BB133111EB`.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Derives an independent stream for (seed, stream) pairs, used to give
    /// each epoch / worker / draw its own generator without correlation.
    pub fn from_seed_stream(seed: u64, stream: u64) -> Self {
        let mut root = SplitMix64::new(seed);
        // Burn one output per stream index plus one mix so that adjacent
        // streams do not share prefixes.
        let mut s = root.next_u64() ^ stream.wrapping_mul(0x9E3779B97F4A7C15);
        s ^= s >> 30;
        SplitMix64::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform f64 in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in [-bound, bound).
    pub fn next_symmetric(&mut self, bound: f64) -> f64 {
        (self.next_f64() * 2.0 - 1.0) * bound
    }

    /// Uniform integer in [0, n) via the multiply-shift reduction
    /// (bias below 1/2^64, irrelevant at these ranges).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Marsaglia's polar method.
    pub fn next_gaussian(&mut self) -> f64 {
        loop {
            let u = self.next_f64() * 2.0 - 1.0;
            let v = self.next_f64() * 2.0 - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}
