//! Splittable, counter-based random streams.
//!
//! Each stream is a ChaCha8 keystream keyed by the root seed and selected by a
//! 64-bit stream index; the block counter advances with every draw. Two
//! streams with different indices never share keystream blocks, so Monte
//! Carlo workers can be handed disjoint indices and produce the same numbers
//! regardless of how the work is scheduled.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

/// splitmix64 finalizer, used to derive child stream indices.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Position in the keystream, in 32-bit words.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Independent child stream, a pure function of `(seed, stream, key)`.
    pub fn substream(&self, key: u64) -> RngStream {
        RngStream::new(self.seed, mix64(self.stream ^ mix64(key.wrapping_add(0x9e37_79b9_7f4a_7c15))))
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Fills `out` with i.i.d. `N(0, variance)` draws.
    pub fn fill_normal(&mut self, variance: f64, out: &mut [f64]) {
        let sd = variance.sqrt();
        for v in out {
            *v = sd * self.normal();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_stream() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        assert!(a.counter() > 0);
    }

    #[test]
    fn streams_differ_and_are_uncorrelated() {
        let n = 20_000;
        let mut a = RngStream::new(11, 0);
        let mut b = RngStream::new(11, 1);
        let xs: Vec<f64> = (0..n).map(|_| a.normal()).collect();
        let ys: Vec<f64> = (0..n).map(|_| b.normal()).collect();
        assert_ne!(xs[..8], ys[..8]);
        let corr: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        // sd of the sample correlation is 1/sqrt(n)
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr = {corr}");
    }

    #[test]
    fn substreams_are_distinct() {
        let root = RngStream::new(5, 9);
        let ids: std::collections::HashSet<u64> =
            (0..1000).map(|k| root.substream(k).stream()).collect();
        assert_eq!(ids.len(), 1000);
        assert_eq!(root.substream(4).stream(), root.substream(4).stream());
    }

    #[test]
    fn normal_moments() {
        let mut s = RngStream::new(1, 1);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.02);
    }
}
