//! Seeded, splittable random number streams.
//!
//! The generator is ChaCha8 (a counter-based stream cipher). A [`Rng`] is
//! identified by `(seed, stream)`: the 64-bit seed is expanded into the
//! ChaCha key with `SeedableRng::seed_from_u64`, and the 64-bit stream id
//! selects one of 2⁶⁴ independent keystreams under that key. Child streams
//! are derived from a label with [`Rng::fork`]:
//!
//! ```text
//! child.stream = splitmix64(parent.stream ^ fnv1a64(label))
//! ```
//!
//! so that data shuffling, initialization, dropout and action sampling each
//! consume their own stream and adding draws to one never perturbs another.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    /// Root stream (stream id 0) for `seed`.
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
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

    /// Independent child stream named by `label`; does not advance `self`.
    pub fn fork(&self, label: &str) -> Rng {
        Self::with_stream(
            self.seed,
            splitmix64(self.stream ^ fnv1a64(label.as_bytes())),
        )
    }

    /// Child stream named by an index (epochs, trials, episodes).
    pub fn fork_index(&self, label: &str, index: u64) -> Rng {
        self.fork(label).fork(&index.to_string())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher–Yates shuffle in place.
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
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn forks_are_independent_of_parent_consumption() {
        let parent = Rng::new(7);
        let mut used = parent.clone();
        for _ in 0..10 {
            used.next_u64();
        }
        let mut c1 = parent.fork("dropout");
        let mut c2 = used.fork("dropout");
        assert_eq!(c1.next_u64(), c2.next_u64());
        let mut other = parent.fork("shuffle");
        let mut c3 = parent.fork("dropout");
        assert_ne!(other.next_u64(), c3.next_u64());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = Rng::new(3);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
