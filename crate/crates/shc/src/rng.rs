//! Deterministic splittable randomness: one 64-bit seed fixes every stream.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Clone, Debug)]
pub struct SplitRng {
    inner: ChaCha8Rng,
}

impl SplitRng {
    pub fn seeded(seed: u64) -> SplitRng {
        SplitRng { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Child stream; advancing the child never affects the parent and vice versa.
    pub fn split(&mut self) -> SplitRng {
        SplitRng::seeded(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, n); unbiased via rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n + 1) % n;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return x % n;
            }
        }
    }

    /// Fisher-Yates, driven by `below` so the stream is explicit.
    pub fn shuffle_u32(&mut self, xs: &mut [u32]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SplitRng::seeded(7);
        let mut b = SplitRng::seeded(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_streams_are_independent() {
        let mut a = SplitRng::seeded(7);
        let mut child = a.split();
        let after_split: Vec<u64> = (0..10).map(|_| a.next_u64()).collect();

        let mut b = SplitRng::seeded(7);
        let _ = b.split();
        for _ in 0..1000 {
            child.next_u64();
        }
        let after_heavy_child: Vec<u64> = (0..10).map(|_| b.next_u64()).collect();
        assert_eq!(after_split, after_heavy_child);
    }

    #[test]
    fn below_is_in_range_and_hits_everything() {
        let mut rng = SplitRng::seeded(1);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            seen[rng.below(7) as usize] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = SplitRng::seeded(3);
        let mut xs: Vec<u32> = (0..50).collect();
        rng.shuffle_u32(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<u32>>());
        assert_ne!(xs, (0..50).collect::<Vec<u32>>());
    }
}
