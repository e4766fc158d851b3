//! Reproducible random streams.
//!
//! A stream is identified by `(seed, stream_id)`. It wraps ChaCha8, a
//! counter-based generator whose output is defined bit-for-bit independent
//! of platform, and whose 64-bit stream parameter gives independent
//! substreams for the same seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{LabError, Result};

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A new stream with the same seed and a different id.
    pub fn substream(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    pub fn gaussian(&mut self, n: usize) -> Result<Vec<f64>> {
        check_len(n)?;
        Ok((0..n).map(|_| self.next_gaussian()).collect())
    }

    pub fn uniform(&mut self, n: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
        check_len(n)?;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(LabError::domain(format!("invalid uniform range [{lo}, {hi})")));
        }
        Ok((0..n).map(|_| self.rng.gen_range(lo..hi)).collect())
    }

    /// Uniform direction on the unit sphere in `d` dimensions.
    pub fn unit_sphere(&mut self, d: usize) -> Result<Vec<f64>> {
        check_len(d)?;
        loop {
            let mut v = self.gaussian(d)?;
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
                return Ok(v);
            }
        }
    }

    #[inline]
    pub fn next_gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform index in `0..n`.
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }
}

fn check_len(n: usize) -> Result<()> {
    if n == 0 {
        Err(LabError::domain("sample count must be positive"))
    } else {
        Ok(())
    }
}
