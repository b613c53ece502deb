//! Counter-based splittable random number generator.
//!
//! Every random decision in the library flows from one explicit 64-bit seed
//! through this generator. Streams are derived by hashing (seed, tag) pairs,
//! so independent components (data generation, weight init, batch sampling)
//! can be given independent streams that never interact, and the whole
//! pipeline is reproducible from the single root seed regardless of the
//! order in which streams are consumed.

/// SplitMix64 finalizer. Bijective on u64 with good avalanche behaviour.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic counter-based generator. Cloning or deriving never shares
/// state: each call site owns its stream.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { key: mix(seed), counter: 0 }
    }

    /// Derives an independent stream identified by `tag`. Derivation does
    /// not advance this generator, so the set of derived streams is a pure
    /// function of (seed, tag path).
    pub fn derive(&self, tag: u64) -> Rng {
        Rng {
            key: mix(self.key ^ mix(tag ^ 0xa076_1d64_78bd_642f)),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.key.wrapping_add(mix(self.counter)));
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). n must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.uniform()).max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Samples `k` distinct values from 0..n by partial Fisher-Yates.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} distinct values from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
