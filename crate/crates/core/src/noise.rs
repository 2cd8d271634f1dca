//! Error laws for the simulated designs, with densities, quantiles and
//! expectations by quadrature.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};

use crate::quadrature::GaussLegendre;

/// Raw (uncentered) error law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum ErrorLaw {
    Gaussian { sigma: f64 },
    StudentT { df: f64, scale: f64 },
    /// Law of `ln ε²` for `ε` drawn from `inner`; `inner` must be symmetric.
    LogSquared { inner: Box<ErrorLaw> },
}

impl ErrorLaw {
    pub fn gaussian(sigma: f64) -> Self {
        ErrorLaw::Gaussian { sigma }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            ErrorLaw::Gaussian { sigma } if !(*sigma > 0.0) => Err(format!("sigma must be > 0, got {sigma}")),
            ErrorLaw::StudentT { df, scale } if !(*df > 0.0 && *scale > 0.0) => {
                Err(format!("student-t needs df > 0 and scale > 0, got df = {df}, scale = {scale}"))
            }
            ErrorLaw::LogSquared { inner } => {
                if matches!(**inner, ErrorLaw::LogSquared { .. }) {
                    return Err("nested log-squared laws are not supported".into());
                }
                inner.validate()
            }
            _ => Ok(()),
        }
    }

    pub fn is_symmetric(&self) -> bool {
        !matches!(self, ErrorLaw::LogSquared { .. })
    }

    pub fn pdf(&self, t: f64) -> f64 {
        match self {
            ErrorLaw::Gaussian { sigma } => normal(*sigma).pdf(t),
            ErrorLaw::StudentT { df, scale } => student(*df, *scale).pdf(t),
            ErrorLaw::LogSquared { inner } => {
                let s = (0.5 * t).exp();
                inner.pdf(s) * s
            }
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        match self {
            ErrorLaw::Gaussian { sigma } => normal(*sigma).cdf(t),
            ErrorLaw::StudentT { df, scale } => student(*df, *scale).cdf(t),
            ErrorLaw::LogSquared { inner } => {
                let s = (0.5 * t).exp();
                (2.0 * inner.cdf(s) - 1.0).max(0.0)
            }
        }
    }

    pub fn quantile(&self, prob: f64) -> f64 {
        match self {
            ErrorLaw::Gaussian { sigma } => normal(*sigma).inverse_cdf(prob),
            ErrorLaw::StudentT { df, scale } => student(*df, *scale).inverse_cdf(prob),
            ErrorLaw::LogSquared { inner } => 2.0 * inner.quantile(0.5 * (1.0 + prob)).ln(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ErrorLaw::Gaussian { sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                sigma * z
            }
            ErrorLaw::StudentT { df, scale } => {
                let t = StudentT::new(*df).expect("validated df");
                scale * t.sample(rng)
            }
            ErrorLaw::LogSquared { inner } => {
                let e = inner.sample(rng);
                (e * e).ln()
            }
        }
    }

    /// `E h(ε)` by Gauss–Legendre on quantile-spaced segments, split at `breaks`.
    pub fn expect<F: Fn(f64) -> f64>(&self, h: F, breaks: &[f64]) -> f64 {
        const PROBS: [f64; 21] = [
            1e-15, 1e-12, 1e-9, 1e-7, 1e-5, 1e-4, 1e-3, 0.01, 0.05, 0.15, 0.5, 0.85, 0.95, 0.99,
            0.999, 0.9999, 1.0 - 1e-5, 1.0 - 1e-7, 1.0 - 1e-9, 1.0 - 1e-12, 1.0 - 1e-15,
        ];
        let mut knots: Vec<f64> = PROBS.iter().map(|&p| self.quantile(p)).collect();
        let (lo, hi) = (knots[0], knots[knots.len() - 1]);
        knots.extend(breaks.iter().copied().filter(|b| *b > lo && *b < hi));
        knots.sort_by(f64::total_cmp);
        knots.dedup();
        let rule = GaussLegendre::new(24);
        knots
            .windows(2)
            .map(|w| rule.integrate_composite(w[0], w[1], 4, |t| h(t) * self.pdf(t)))
            .sum()
    }

    pub fn mean(&self) -> f64 {
        match self {
            ErrorLaw::Gaussian { .. } | ErrorLaw::StudentT { .. } => 0.0,
            ErrorLaw::LogSquared { .. } => self.expect(|t| t, &[]),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            ErrorLaw::Gaussian { sigma } => sigma * sigma,
            ErrorLaw::StudentT { df, scale } => {
                if *df > 2.0 {
                    scale * scale * df / (df - 2.0)
                } else {
                    f64::INFINITY
                }
            }
            ErrorLaw::LogSquared { .. } => {
                let m = self.mean();
                self.expect(|t| (t - m) * (t - m), &[m])
            }
        }
    }
}

fn normal(sigma: f64) -> Normal {
    Normal::new(0.0, sigma).expect("validated sigma")
}

fn student(df: f64, scale: f64) -> StudentsT {
    StudentsT::new(0.0, scale, df).expect("validated student-t")
}

/// A raw law shifted so that the active loss's location is zero: `ε = raw − shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorModel {
    pub law: ErrorLaw,
    pub shift: f64,
}

impl ErrorModel {
    pub fn new(law: ErrorLaw, shift: f64) -> Self {
        Self { law, shift }
    }

    pub fn uncentered(law: ErrorLaw) -> Self {
        Self { law, shift: 0.0 }
    }

    pub fn pdf(&self, t: f64) -> f64 {
        self.law.pdf(t + self.shift)
    }

    pub fn cdf(&self, t: f64) -> f64 {
        self.law.cdf(t + self.shift)
    }

    pub fn quantile(&self, prob: f64) -> f64 {
        self.law.quantile(prob) - self.shift
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.law.sample(rng) - self.shift
    }

    pub fn expect<F: Fn(f64) -> f64>(&self, h: F, breaks: &[f64]) -> f64 {
        let shifted: Vec<f64> = breaks.iter().map(|b| b + self.shift).collect();
        self.law.expect(|t| h(t - self.shift), &shifted)
    }

    pub fn variance(&self) -> f64 {
        self.law.variance()
    }

    pub fn mean(&self) -> f64 {
        self.law.mean() - self.shift
    }
}
