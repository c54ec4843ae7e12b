//! Seeded, splittable random streams.
//!
//! Backed by ChaCha8, which is counter based: a `(seed, stream)` pair fully
//! determines the output sequence. Consumers derive their own stream by
//! label, so adding a new consumer never shifts the draws of another.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::{Fnv, Tensor};
use crate::error::{Error, Result};

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

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Position in the stream, in 32-bit words consumed.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Independent child stream named `label`, starting from its beginning.
    /// Does not advance `self`.
    pub fn split(&self, label: &str) -> Rng {
        let mut h = Fnv::new();
        h.write(&self.stream.to_le_bytes());
        h.write(label.as_bytes());
        Rng::with_stream(self.seed, h.finish())
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn gaussian_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| std * self.normal()).collect();
        Tensor::from_vec(shape, data).expect("length matches shape")
    }
}

/// `n` i.i.d. draws from `N(0, σ²I_d)`, row major.
pub fn sample_gaussian(rng: &mut Rng, n: usize, d: usize, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    Ok(rng.gaussian_tensor(&[n, d], sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_sigma_concentrates() {
        let mut rng = Rng::new(1);
        let t = sample_gaussian(&mut rng, 10_000, 1, 1e-9).unwrap();
        let mean = t.sum() / 10_000.0;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn reset_rng_reproduces_bits() {
        let a = sample_gaussian(&mut Rng::new(42), 16, 3, 0.7).unwrap();
        let b = sample_gaussian(&mut Rng::new(42), 16, 3, 0.7).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn unit_variance() {
        let t = sample_gaussian(&mut Rng::new(7), 100_000, 1, 1.0).unwrap();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        assert!(sample_gaussian(&mut Rng::new(0), 2, 2, 0.0).is_err());
        assert!(sample_gaussian(&mut Rng::new(0), 2, 2, -1.0).is_err());
    }

    #[test]
    fn split_streams_are_isolated() {
        let root = Rng::new(5);
        let mut a1 = root.split("a");
        let first: Vec<f64> = (0..4).map(|_| a1.normal()).collect();
        // consuming another stream does not disturb "a"
        let mut b = root.split("b");
        for _ in 0..100 {
            b.normal();
        }
        let mut a2 = root.split("a");
        let again: Vec<f64> = (0..4).map(|_| a2.normal()).collect();
        assert_eq!(first, again);
        assert_ne!(a2.stream_id(), b.stream_id());
    }
}
