//! Seeded random streams with save/restore, so training can checkpoint and
//! resume bit-exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// Snapshot of a stream: the seed plus the 128-bit word position within the
/// ChaCha keystream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

/// Deterministic random stream. All draws go through `f64` so f32 and f64
/// runs consume the stream identically.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    rng: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed, rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    /// Independent derived stream; `salt` distinguishes purposes that share
    /// one configured seed.
    pub fn derive(seed: u64, salt: u64) -> Self {
        Self::new(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn state(&self) -> RngState {
        RngState { seed: self.seed, word_pos: self.rng.get_word_pos() }
    }

    pub fn restore(state: RngState) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(state.seed);
        rng.set_word_pos(state.word_pos);
        SeededRng { seed: state.seed, rng }
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random_range(0.0..1.0)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            return false;
        }
        if p >= 1.0 {
            return true;
        }
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
        }
    }

    #[test]
    fn state_restore_resumes_stream() {
        let mut a = SeededRng::new(7);
        for _ in 0..37 {
            a.uniform();
        }
        let snap = a.state();
        let rest: Vec<u64> = (0..50).map(|_| a.standard_normal().to_bits()).collect();

        let mut b = SeededRng::restore(snap);
        let resumed: Vec<u64> = (0..50).map(|_| b.standard_normal().to_bits()).collect();
        assert_eq!(rest, resumed);
    }

    #[test]
    fn derived_streams_differ() {
        let mut a = SeededRng::derive(1, 1);
        let mut b = SeededRng::derive(1, 2);
        let xa: Vec<u64> = (0..8).map(|_| a.uniform().to_bits()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.uniform().to_bits()).collect();
        assert_ne!(xa, xb);
    }

    #[test]
    fn shuffle_is_deterministic() {
        let mut a = SeededRng::new(5);
        let mut b = SeededRng::new(5);
        let mut va: Vec<u32> = (0..20).collect();
        let mut vb: Vec<u32> = (0..20).collect();
        a.shuffle(&mut va);
        b.shuffle(&mut vb);
        assert_eq!(va, vb);
        assert_ne!(va, (0..20).collect::<Vec<u32>>());
    }
}
