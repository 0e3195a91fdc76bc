//! Scalar distributions of the obstacle random parameter, with closed-form
//! raw moments.

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distribution of a scalar random parameter.
///
/// `Gaussian` is parameterized by mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarDistribution {
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, std: f64 },
    Beta { a: f64, b: f64, lo: f64, hi: f64 },
}

fn binomial(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl ScalarDistribution {
    pub fn uniform(lo: f64, hi: f64) -> Self {
        ScalarDistribution::Uniform { lo, hi }
    }

    pub fn gaussian(mean: f64, std: f64) -> Self {
        ScalarDistribution::Gaussian { mean, std }
    }

    pub fn beta(a: f64, b: f64, lo: f64, hi: f64) -> Self {
        ScalarDistribution::Beta { a, b, lo, hi }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ScalarDistribution::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            ScalarDistribution::Gaussian { mean, std } => mean.is_finite() && std.is_finite() && std >= 0.0,
            ScalarDistribution::Beta { a, b, lo, hi } => {
                a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() && lo.is_finite() && hi.is_finite() && lo < hi
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid distribution parameters {self:?}")))
        }
    }

    pub fn mean(&self) -> f64 {
        self.raw_moment(1)
    }

    pub fn variance(&self) -> f64 {
        let m1 = self.raw_moment(1);
        (self.raw_moment(2) - m1 * m1).max(0.0)
    }

    /// `E[ω^k]` in closed form.
    pub fn raw_moment(&self, k: u32) -> f64 {
        if k == 0 {
            return 1.0;
        }
        match *self {
            ScalarDistribution::Uniform { lo, hi } => {
                // (hi^{k+1} - lo^{k+1}) / ((k+1)(hi - lo)) written as a sum to
                // avoid cancellation for narrow intervals.
                let mut s = 0.0;
                for j in 0..=k {
                    s += hi.powi(j as i32) * lo.powi((k - j) as i32);
                }
                s / (k + 1) as f64
            }
            ScalarDistribution::Gaussian { mean, std } => {
                // E[(mean + std Z)^k] with E[Z^j] = (j-1)!! for even j.
                let mut s = 0.0;
                let mut dfact = 1.0; // (j-1)!!
                for j in (0..=k).step_by(2) {
                    if j >= 2 {
                        dfact *= (j - 1) as f64;
                    }
                    s += binomial(k, j) * mean.powi((k - j) as i32) * std.powi(j as i32) * dfact;
                }
                s
            }
            ScalarDistribution::Beta { a, b, lo, hi } => {
                let w = hi - lo;
                let mut s = 0.0;
                let mut ex = 1.0; // E[X^j] for the standard Beta
                for j in 0..=k {
                    if j > 0 {
                        let r = (j - 1) as f64;
                        ex *= (a + r) / (a + b + r);
                    }
                    s += binomial(k, j) * lo.powi((k - j) as i32) * w.powi(j as i32) * ex;
                }
                s
            }
        }
    }

    /// Raw moments of orders `0..=max_order`.
    pub fn raw_moments(&self, max_order: u32) -> Vec<f64> {
        (0..=max_order).map(|k| self.raw_moment(k)).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ScalarDistribution::Uniform { lo, hi } => Uniform::new(lo, hi).expect("validated").sample(rng),
            ScalarDistribution::Gaussian { mean, std } => Normal::new(mean, std).expect("validated").sample(rng),
            ScalarDistribution::Beta { a, b, lo, hi } => lo + (hi - lo) * Beta::new(a, b).expect("validated").sample(rng),
        }
    }

    /// A sampler that avoids re-validating parameters on every draw.
    pub fn sampler(&self) -> Sampler {
        match *self {
            ScalarDistribution::Uniform { lo, hi } => Sampler::Uniform(Uniform::new(lo, hi).expect("validated")),
            ScalarDistribution::Gaussian { mean, std } => Sampler::Gaussian(Normal::new(mean, std).expect("validated")),
            ScalarDistribution::Beta { a, b, lo, hi } => {
                Sampler::Beta(Beta::new(a, b).expect("validated"), lo, hi - lo)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Sampler {
    Uniform(Uniform<f64>),
    Gaussian(Normal<f64>),
    Beta(Beta<f64>, f64, f64),
}

impl Distribution<f64> for Sampler {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Sampler::Uniform(d) => d.sample(rng),
            Sampler::Gaussian(d) => d.sample(rng),
            Sampler::Beta(d, lo, w) => lo + w * d.sample(rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Trapezoid rule over [lo, hi] with `n` panels.
    fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut s = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            s += f(lo + i as f64 * h);
        }
        s * h
    }

    #[test]
    fn uniform_second_moment_matches_quadrature() {
        let d = ScalarDistribution::uniform(1.0, 2.0);
        let oracle = trapezoid(|w| w * w, 1.0, 2.0, 1_000_000) / (2.0 - 1.0);
        assert!((d.raw_moment(2) - oracle).abs() < 1e-6);
        assert!((d.raw_moment(2) - 7.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zeroth_moment_is_one() {
        for d in [
            ScalarDistribution::uniform(-3.0, 0.5),
            ScalarDistribution::gaussian(0.2, 0.7),
            ScalarDistribution::beta(2.0, 5.0, -1.0, 1.0),
        ] {
            assert_eq!(d.raw_moment(0), 1.0);
        }
    }

    #[test]
    fn gaussian_second_moment() {
        let d = ScalarDistribution::gaussian(0.05, 0.01);
        assert!((d.raw_moment(2) - 0.0026).abs() < 1e-15);
        // Fourth moment: mu^4 + 6 mu^2 s^2 + 3 s^4.
        let (m, s) = (0.05f64, 0.01f64);
        let m4 = m.powi(4) + 6.0 * m * m * s * s + 3.0 * s.powi(4);
        assert!((d.raw_moment(4) - m4).abs() < 1e-18);
    }

    #[test]
    fn beta_moments_match_quadrature() {
        let (a, b, lo, hi) = (2.0, 3.0, -0.5, 1.5);
        let d = ScalarDistribution::beta(a, b, lo, hi);
        // Beta(2,3) density on [0,1]: 12 x (1-x)^2.
        for k in 0..=8u32 {
            let oracle = trapezoid(
                |x| 12.0 * x * (1.0 - x).powi(2) * (lo + (hi - lo) * x).powi(k as i32),
                0.0,
                1.0,
                200_000,
            );
            assert!((d.raw_moment(k) - oracle).abs() < 1e-8, "k={k}");
        }
    }

    #[test]
    fn narrow_uniform_is_stable() {
        let c = 0.3;
        let d = ScalarDistribution::uniform(c - 1e-9, c + 1e-9);
        for k in 1..=12 {
            let exact = c.powi(k as i32);
            assert!((d.raw_moment(k) - exact).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        assert!(ScalarDistribution::uniform(1.0, 1.0).validate().is_err());
        assert!(ScalarDistribution::gaussian(0.0, -0.1).validate().is_err());
        assert!(ScalarDistribution::beta(0.0, 1.0, 0.0, 1.0).validate().is_err());
        assert!(ScalarDistribution::gaussian(0.0, 1e-12).validate().is_ok());
    }
}
