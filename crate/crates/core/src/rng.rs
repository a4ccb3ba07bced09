//! Deterministic, splittable randomness.
//!
//! Built on the ChaCha8 counter-based stream cipher: a (seed, stream) pair
//! fully determines the draw sequence on every platform. Parallel sections
//! split the generator by stream id before forking so thread scheduling can
//! never change what gets drawn.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mix for deriving child stream ids (splitmix64 finalizer).
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    /// Independent child generator. Children derived with distinct tags (or
    /// from distinct parents) have distinct streams.
    pub fn split(&self, tag: u64) -> Rng {
        Rng::with_stream(self.seed, mix64(self.stream ^ mix64(tag)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Position within the stream, for exact checkpoint resume.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.inner.set_word_pos(pos);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Standard normal via Box–Muller (platform-independent).
    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        let u1: f64 = self.inner.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.inner.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        mean + sd * z
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    /// `m` distinct indices drawn from [0, n), in draw order.
    pub fn choose_indices(&mut self, n: usize, m: usize) -> Vec<usize> {
        debug_assert!(m <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..m {
            let j = self.inner.gen_range(i..n);
            idx.swap(i, j);
        }
        idx.truncate(m);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::with_stream(42, 7);
        let mut b = Rng::with_stream(42, 7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = Rng::with_stream(42, 0);
        let mut b = Rng::with_stream(42, 1);
        assert_ne!(
            (0..8).map(|_| a.next_u64()).collect::<Vec<_>>(),
            (0..8).map(|_| b.next_u64()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn split_is_deterministic() {
        let root = Rng::new(1);
        let mut a = root.split(5);
        let mut b = root.split(5);
        assert_eq!(a.next_u64(), b.next_u64());
        let mut c = root.split(6);
        assert_ne!(root.split(5).next_u64(), c.next_u64());
    }

    #[test]
    fn word_pos_round_trip() {
        let mut a = Rng::new(3);
        for _ in 0..13 {
            a.next_u64();
        }
        let pos = a.word_pos();
        let x = a.next_u64();
        let mut b = Rng::new(3);
        b.set_word_pos(pos);
        assert_eq!(b.next_u64(), x);
    }

    #[test]
    fn choose_indices_distinct() {
        let mut r = Rng::new(9);
        let picked = r.choose_indices(100, 60);
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 60);
    }
}
