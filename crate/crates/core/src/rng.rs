//! Deterministic random numbers.
//!
//! Everything stochastic in this crate (weight sampling, synthetic data,
//! dropout masks) draws from the generator below, so a run is reproducible
//! from its seed alone, on any platform. The algorithm is spelled out here so
//! another implementation can generate the identical stream:
//!
//! SplitMix64. State is a single u64. Each draw advances the state by the
//! constant 0x9E3779B97F4A7C15 and returns a mix of the new state:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! return z ^ (z >> 31)
//! ```
//!
//! A f64 in [0, 1) takes the top 53 bits: `(u >> 11) * 2^-53`. Uniform on
//! [lo, hi) is the affine map of that. Gaussians come from the basic
//! Box-Muller transform on two fresh uniforms (the sine branch is discarded).
//! Bounded integers use the multiply-shift reduction `(u * n) >> 64`.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Stream for a named consumer: independent of the order other streams
    /// are created in, so adding a parameter never reshuffles the rest.
    pub fn derive_named(&self, name: &str) -> Rng {
        self.derive(fnv1a(name))
    }

    /// Independent stream for the same seed: mixes the tag through one
    /// SplitMix64 round so streams for different tags do not overlap in
    /// practice.
    pub fn derive(&self, tag: u64) -> Rng {
        let mut r = Rng {
            state: self.state ^ tag.wrapping_mul(0x9E3779B97F4A7C15),
        };
        r.next_u64();
        Rng { state: r.state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; scaled to (mean, sd).
    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        mean + sd * z
    }

    /// Integer in [0, n) by multiply-shift reduction.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }
}

/// FNV-1a over the name bytes; used to tag per-name substreams.
fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// `n` independent draws from U(lo, hi). Rejects degenerate bounds.
pub fn uniform_vec(rng: &mut Rng, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo < hi) {
        return Err(Error::InvalidParameter(format!(
            "uniform bounds must satisfy lo < hi, got [{lo}, {hi})"
        )));
    }
    Ok((0..n).map(|_| rng.uniform(lo, hi)).collect())
}

/// `n` independent draws from N(mean, sd^2).
pub fn normal_vec(rng: &mut Rng, mean: f64, sd: f64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal(mean, sd)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_differ() {
        let base = Rng::new(7);
        let mut a = base.derive(1);
        let mut b = base.derive(2);
        let same = (0..100).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn named_streams_are_stable_and_distinct() {
        let base = Rng::new(7);
        let mut a1 = base.derive_named("enc.1.self.wq");
        let mut a2 = base.derive_named("enc.1.self.wq");
        let mut b = base.derive_named("enc.1.self.wk");
        assert_eq!(a1.next_u64(), a2.next_u64());
        let same = (0..100).filter(|_| a1.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn uniform_rejects_bad_bounds() {
        let mut rng = Rng::new(1);
        assert!(uniform_vec(&mut rng, 1.0, 1.0, 4).is_err());
        assert!(uniform_vec(&mut rng, 2.0, -2.0, 4).is_err());
    }

    #[test]
    fn uniform_moments() {
        let mut rng = Rng::new(3);
        let b = 0.5;
        let xs = uniform_vec(&mut rng, -b, b, 1_000_000).unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        let expect = b * b / 3.0;
        assert!(
            (var - expect).abs() / expect < 0.02,
            "var {var} vs {expect}"
        );
        assert!(xs.iter().all(|x| -b <= *x && *x < b));
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(9);
        let xs = normal_vec(&mut rng, 0.0, 0.02, 1_000_000);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        // mean of 1e6 draws at sd 0.02 has standard error 2e-5
        assert!(mean.abs() < 3.0 * 0.02 / 1000.0, "mean {mean}");
        assert!((sd - 0.02).abs() / 0.02 < 0.02, "sd {sd}");
    }

    #[test]
    fn below_is_in_range_and_covers() {
        let mut rng = Rng::new(11);
        let mut seen = [false; 5];
        for _ in 0..1000 {
            let k = rng.below(5);
            assert!(k < 5);
            seen[k] = true;
        }
        assert!(seen.iter().all(|s| *s));
    }
}
