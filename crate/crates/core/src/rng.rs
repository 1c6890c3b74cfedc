//! Seeded Gaussian sampling.
//!
//! The generator is ChaCha8 seeded from the 64-bit seed via
//! `SeedableRng::seed_from_u64`. Independent streams for `(seed, index)`
//! pairs use ChaCha's stream selector, so trial `i` draws the same numbers no
//! matter how trials are scheduled.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Data, Precision, Tensor2D};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream `index` of `seed`; stream 0 is the same sequence as `Rng::new(seed)`.
    pub fn stream(seed: u64, index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(index);
        Self { seed, inner }
    }

    /// Independent child stream derived from this generator's seed.
    pub fn fork(&self, index: u64) -> Self {
        // Offset by one so no child aliases the parent's own stream.
        Self::stream(self.seed, index.wrapping_add(1))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }
}

/// I.i.d. standard normal entries. Values are drawn in f64 and rounded for
/// P32, so a P32 tensor is the rounding of the P64 tensor from the same seed.
pub fn rand_gaussian(rng: &mut Rng, rows: usize, cols: usize, precision: Precision) -> Result<Tensor2D> {
    rand_gaussian_scaled(rng, rows, cols, 1.0, precision)
}

pub(crate) fn rand_gaussian_scaled(
    rng: &mut Rng,
    rows: usize,
    cols: usize,
    scale: f64,
    precision: Precision,
) -> Result<Tensor2D> {
    if rows == 0 || cols == 0 {
        return Err(Error::arg(format!("random tensor needs positive shape, got {rows}x{cols}")));
    }
    let v: Vec<f64> = (0..rows * cols).map(|_| rng.gaussian() * scale).collect();
    let data = match precision {
        Precision::P64 => Data::F64(v),
        Precision::P32 => Data::F32(v.into_iter().map(|x| x as f32).collect()),
    };
    Tensor2D::from_data(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_matrix() {
        let a = rand_gaussian(&mut Rng::new(5), 4, 7, Precision::P64).unwrap();
        let b = rand_gaussian(&mut Rng::new(5), 4, 7, Precision::P64).unwrap();
        assert!(a.bit_eq(&b));
        let c = rand_gaussian(&mut Rng::new(6), 4, 7, Precision::P64).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn p32_is_rounded_p64() {
        let a = rand_gaussian(&mut Rng::new(5), 3, 3, Precision::P64).unwrap();
        let b = rand_gaussian(&mut Rng::new(5), 3, 3, Precision::P32).unwrap();
        assert!(a.cast(Precision::P32).bit_eq(&b));
    }

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a = rand_gaussian(&mut Rng::stream(1, 3), 2, 2, Precision::P64).unwrap();
        let b = rand_gaussian(&mut Rng::stream(1, 3), 2, 2, Precision::P64).unwrap();
        let c = rand_gaussian(&mut Rng::stream(1, 4), 2, 2, Precision::P64).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
        let root = Rng::new(1);
        let f = rand_gaussian(&mut root.fork(2), 2, 2, Precision::P64).unwrap();
        assert!(f.bit_eq(&a));
    }

    #[test]
    fn sample_mean_near_zero() {
        let t = rand_gaussian(&mut Rng::new(2024), 1000, 1000, Precision::P64).unwrap();
        let mean = t.to_f64_vec().iter().sum::<f64>() / 1e6;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn rejects_empty_shape() {
        assert!(rand_gaussian(&mut Rng::new(0), 0, 3, Precision::P64).is_err());
    }
}
