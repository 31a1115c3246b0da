//! Deterministic random numbers and the two sampling families used for
//! initialization.
//!
//! The generator is ChaCha8 in counter mode: a `(seed, stream)` pair keys the
//! cipher and the word position is the counter, so a stream can be saved and
//! resumed exactly and produces the same values on every platform.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Everything needed to resume an [`Rng`] exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng::with_stream(seed, 0)
    }

    /// Independent stream `stream` under the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives a new generator from this one's output.
    pub fn split(&mut self) -> Rng {
        let seed = self.next_u64();
        Rng::new(seed)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Rng::with_stream(state.seed, state.stream);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[-bound, bound)`.
    pub fn symmetric(&mut self, bound: f64) -> f64 {
        // 2u - 1 is exact for 53-bit u, so |result| <= bound holds exactly.
        bound * (2.0 * self.uniform() - 1.0)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Uniform,
    Normal,
}

/// A zero-mean distribution identified by its variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub family: Family,
    pub variance: f64,
}

impl Distribution {
    pub fn new(family: Family, variance: f64) -> Result<Self> {
        if !(variance >= 0.0) || !variance.is_finite() {
            return Err(Error::invalid(format!(
                "variance must be finite and nonnegative, got {variance}"
            )));
        }
        Ok(Distribution { family, variance })
    }

    pub fn uniform(variance: f64) -> Result<Self> {
        Distribution::new(Family::Uniform, variance)
    }

    pub fn normal(variance: f64) -> Result<Self> {
        Distribution::new(Family::Normal, variance)
    }

    /// Half-width of the uniform support, `sqrt(3 v)`.
    pub fn uniform_bound(&self) -> f64 {
        (3.0 * self.variance).sqrt()
    }

    pub fn draw(&self, rng: &mut Rng) -> f64 {
        match self.family {
            Family::Uniform => rng.symmetric(self.uniform_bound()),
            Family::Normal => self.variance.sqrt() * rng.normal(),
        }
    }

    pub fn fill(&self, out: &mut [f64], rng: &mut Rng) {
        if self.variance == 0.0 {
            out.fill(0.0);
            return;
        }
        for v in out {
            *v = self.draw(rng);
        }
    }
}

/// Draws a tensor of the given shape from `dist`.
pub fn sample(dist: &Distribution, shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    // Re-validate: the fields are public.
    let dist = Distribution::new(dist.family, dist.variance)?;
    let mut t = Tensor::zeros(shape)?;
    dist.fill(t.data_mut(), rng);
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{empirical_variance, mean};

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::with_stream(42, 1);
        assert_ne!(Rng::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn state_round_trip() {
        let mut a = Rng::with_stream(9, 3);
        for _ in 0..37 {
            a.normal();
        }
        let mut b = Rng::from_state(a.state());
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn uniform_bound_formula() {
        let d = Distribution::uniform(4.0e-5).unwrap();
        assert!((d.uniform_bound() - 0.010954451150103322).abs() < 1e-15);
        let t = sample(&d, &[10_000], &mut Rng::new(1)).unwrap();
        assert!(t.max_abs() <= d.uniform_bound());
    }

    #[test]
    fn zero_variance_is_all_zero() {
        for family in [Family::Uniform, Family::Normal] {
            let d = Distribution::new(family, 0.0).unwrap();
            let t = sample(&d, &[5, 7], &mut Rng::new(3)).unwrap();
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn negative_variance_rejected() {
        assert!(matches!(Distribution::uniform(-1.0), Err(Error::InvalidArgument(_))));
        let d = Distribution {
            family: Family::Normal,
            variance: -0.5,
        };
        assert!(sample(&d, &[2], &mut Rng::new(0)).is_err());
        assert!(Distribution::uniform(f64::NAN).is_err());
    }

    #[test]
    fn law_of_large_numbers() {
        let n = 1_000_000;
        for family in [Family::Uniform, Family::Normal] {
            for &v in &[1e-5, 1e-2, 1.0] {
                let d = Distribution::new(family, v).unwrap();
                let t = sample(&d, &[n], &mut Rng::new(42)).unwrap();
                let var = empirical_variance(&t).unwrap();
                assert!(((var - v) / v).abs() < 0.01, "{family:?} {v}: {var}");
                let m = mean(t.data());
                assert!(m.abs() < 3.0 * (v / n as f64).sqrt() * 2.0, "{family:?} {v}: mean {m}");
            }
        }
    }
}
