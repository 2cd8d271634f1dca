//! Convex loss functions `ρ`, their residual influence functions `φ`, and
//! the analytic quantities `g` and `σ²` used by the oracles.
//!
//! `φ` follows the residual convention: `φ(t)` is the piecewise derivative
//! of `ρ` in the residual `t = y − θ`, so `E φ(ε) = 0` and
//! `g(x) = −∂/∂θ E[φ(Y − θ) | X = x]` at `θ = m(x)` is positive. With
//! `ρ_sq(t) = t²` and `φ_sq(t) = 2t` the squared-loss slope is `g = 2`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::ErrorModel;

/// Loss family and its parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum LossModel {
    Squared,
    /// Check loss at level `q ∈ (0, 1)`.
    Quantile { q: f64 },
    /// Huber loss with threshold `k > 0` (`k = ∞` allowed).
    Huber { k: f64 },
    /// `|t|^q` with `q > 1`.
    Lq { q: f64 },
}

/// Smoothness class of `φ` that sets the remainder-rate exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothness {
    /// `φ` Lipschitz: remainder of order `log n / (n h^d)`.
    Lipschitz,
    /// Hölder-type index `s ≥ 0`.
    Index(f64),
}

/// `λ(s) = min{(p+1)/(p+s+1), (3p+3+2s)/(4p+4s+4)}`.
pub fn lambda(s: f64, p: usize) -> f64 {
    let p = p as f64;
    ((p + 1.0) / (p + s + 1.0)).min((3.0 * p + 3.0 + 2.0 * s) / (4.0 * p + 4.0 * s + 4.0))
}

impl LossModel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LossModel::Squared => true,
            LossModel::Quantile { q } => q > 0.0 && q < 1.0,
            LossModel::Huber { k } => k > 0.0,
            LossModel::Lq { q } => q > 1.0 && q.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid loss parameters: {self}")))
        }
    }

    pub fn rho(&self, t: f64) -> f64 {
        match *self {
            LossModel::Squared => t * t,
            LossModel::Quantile { q } => (2.0 * q - 1.0) * t + t.abs(),
            LossModel::Huber { k } => {
                if t.abs() < k {
                    0.5 * t * t
                } else {
                    k * t.abs() - 0.5 * k * k
                }
            }
            LossModel::Lq { q } => t.abs().powf(q),
        }
    }

    pub fn phi(&self, t: f64) -> f64 {
        match *self {
            LossModel::Squared => 2.0 * t,
            LossModel::Quantile { q } => {
                if t >= 0.0 {
                    2.0 * q
                } else {
                    2.0 * q - 2.0
                }
            }
            LossModel::Huber { k } => {
                if t.abs() < k {
                    t
                } else {
                    t.signum() * k
                }
            }
            LossModel::Lq { q } => q * t.signum() * t.abs().powf(q - 1.0),
        }
    }

    /// Discontinuities of `φ`.
    pub fn jump_points(&self) -> Vec<f64> {
        match self {
            LossModel::Quantile { .. } => vec![0.0],
            _ => Vec::new(),
        }
    }

    pub fn smoothness(&self) -> Smoothness {
        match *self {
            LossModel::Squared | LossModel::Huber { .. } => Smoothness::Lipschitz,
            LossModel::Quantile { .. } => Smoothness::Index(0.0),
            LossModel::Lq { q } if q >= 2.0 => Smoothness::Lipschitz,
            LossModel::Lq { q } => Smoothness::Index(2.0 - q),
        }
    }

    pub fn lipschitz_phi(&self) -> bool {
        matches!(self.smoothness(), Smoothness::Lipschitz)
    }

    /// Target remainder exponent for a degree-`p` fit.
    pub fn rate_exponent(&self, p: usize) -> f64 {
        match self.smoothness() {
            Smoothness::Lipschitz => 1.0,
            Smoothness::Index(s) => lambda(s, p),
        }
    }

    /// Kinks of `ρ` and `φ` that quadrature should split at.
    fn breakpoints(&self) -> Vec<f64> {
        match *self {
            LossModel::Huber { k } if k.is_finite() => vec![-k, 0.0, k],
            _ => vec![0.0],
        }
    }

    /// Location `c` of a raw error law, solving `E φ(ε_raw − c) = 0`.
    pub fn location(&self, law: &crate::noise::ErrorLaw) -> f64 {
        match *self {
            LossModel::Quantile { q } => law.quantile(q),
            LossModel::Squared => law.mean(),
            _ => {
                if law.is_symmetric() {
                    return 0.0;
                }
                let score = |c: f64| {
                    let m = ErrorModel::new(law.clone(), c);
                    m.expect(|t| self.phi(t), &self.breakpoints())
                };
                let (mut lo, mut hi) = (law.quantile(0.01), law.quantile(0.99));
                // score is decreasing in c
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if score(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-13 * (1.0 + mid.abs()) {
                        break;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }

    /// `E φ(ε)` under the error model (zero for a correctly centered model).
    pub fn mean_influence(&self, error: &ErrorModel) -> f64 {
        error.expect(|t| self.phi(t), &self.breakpoints())
    }
}

impl fmt::Display for LossModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossModel::Squared => write!(f, "squared"),
            LossModel::Quantile { q } => write!(f, "quantile(q={q})"),
            LossModel::Huber { k } => write!(f, "huber(k={k})"),
            LossModel::Lq { q } => write!(f, "lq(q={q})"),
        }
    }
}

/// `g = −∂/∂θ E φ(ε − θ)` at `θ = 0` for a homoscedastic error model (constant in `x`).
pub fn analytic_g(loss: &LossModel, error: &ErrorModel) -> Result<f64> {
    let g = match *loss {
        LossModel::Quantile { q } => {
            let f0 = error.cdf(0.0);
            if (f0 - q).abs() > 1e-8 {
                return Err(Error::IncompatibleErrorModel(format!(
                    "the {q}-quantile of the error is not 0 (P(ε < 0) = {f0})"
                )));
            }
            2.0 * error.pdf(0.0)
        }
        LossModel::Squared => 2.0,
        LossModel::Huber { k } => {
            if k.is_infinite() {
                1.0
            } else {
                error.cdf(k) - error.cdf(-k)
            }
        }
        LossModel::Lq { q } => {
            // q(q−1) E|ε|^{q−2}; t = s^{1/(q−1)} removes the singularity at 0.
            let a = 1.0 / (q - 1.0);
            let rule = crate::quadrature::GaussLegendre::new(24);
            let upper = error.quantile(1.0 - 1e-14).abs().max(error.quantile(1e-14).abs());
            let smax = upper.powf(q - 1.0);
            let integrand = |s: f64| {
                let t = s.powf(a);
                a * (error.pdf(t) + error.pdf(-t))
            };
            let knots = [0.0, 0.01 * smax, 0.1 * smax, 0.3 * smax, smax];
            let e: f64 = knots
                .windows(2)
                .map(|w| rule.integrate_composite(w[0], w[1], 8, integrand))
                .sum();
            q * (q - 1.0) * e
        }
    };
    if !(g > 0.0) {
        return Err(Error::IncompatibleErrorModel(format!(
            "non-positive influence slope g = {g} for {loss}"
        )));
    }
    Ok(g)
}

/// `σ² = E φ²(ε)` for a homoscedastic error model.
pub fn analytic_sigma2(loss: &LossModel, error: &ErrorModel) -> f64 {
    match *loss {
        LossModel::Quantile { q } => {
            let f0 = error.cdf(0.0);
            4.0 * q * q * (1.0 - f0) + (2.0 * q - 2.0).powi(2) * f0
        }
        LossModel::Squared => {
            let m = error.mean();
            4.0 * (error.variance() + m * m)
        }
        _ => error.expect(|t| loss.phi(t).powi(2), &loss.breakpoints()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::ErrorLaw;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const FAMILIES: [LossModel; 5] = [
        LossModel::Squared,
        LossModel::Quantile { q: 0.5 },
        LossModel::Quantile { q: 0.25 },
        LossModel::Huber { k: 1.345 },
        LossModel::Lq { q: 1.5 },
    ];

    #[test]
    fn rho_examples() {
        assert_eq!(LossModel::Huber { k: 1.0 }.rho(0.5), 0.125);
        assert_eq!(LossModel::Quantile { q: 0.5 }.rho(-2.0), 2.0);
        assert_eq!(LossModel::Squared.rho(0.0), 0.0);
    }

    #[test]
    fn phi_examples() {
        assert!((LossModel::Quantile { q: 0.25 }.phi(-0.1) + 1.5).abs() < 1e-15);
        assert_eq!(LossModel::Huber { k: 1.345 }.phi(2.0), 1.345);
        assert_eq!(LossModel::Squared.phi(0.0), 0.0);
        assert_eq!(LossModel::Lq { q: 1.5 }.phi(-4.0), -3.0);
    }

    #[test]
    fn jump_metadata() {
        assert_eq!(LossModel::Quantile { q: 0.3 }.jump_points(), vec![0.0]);
        assert!(LossModel::Huber { k: 1.0 }.jump_points().is_empty());
        assert!(LossModel::Squared.jump_points().is_empty());
        let q = LossModel::Quantile { q: 0.3 };
        assert!((q.phi(0.0) - q.phi(-1e-300) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn rate_exponents() {
        assert_eq!(LossModel::Quantile { q: 0.5 }.rate_exponent(1), 0.75);
        assert_eq!(LossModel::Huber { k: 1.0 }.rate_exponent(1), 1.0);
        assert_eq!(lambda(0.0, 3), 0.75);
        let l = LossModel::Lq { q: 1.5 }.rate_exponent(1);
        assert!((l - lambda(0.5, 1)).abs() < 1e-15);
    }

    #[test]
    fn absolute_continuity_identity() {
        // ρ(y; θ) = ρ(y; 0) + ∫_0^θ ∂ρ/∂θ, and ∂ρ/∂θ = −φ(y − θ) in the residual convention.
        let rule = crate::quadrature::GaussLegendre::new(24);
        for loss in FAMILIES {
            for &y in &[-2.0, -0.3, 0.0, 0.7, 2.5] {
                for &theta in &[-1.7, -0.2, 0.4, 1.9] {
                    let mut knots = vec![0.0, theta];
                    knots.extend(loss.breakpoints().iter().map(|b| y - b));
                    knots.retain(|t| (t - 0.0) * (t - theta) <= 0.0);
                    knots.sort_by(f64::total_cmp);
                    let integral: f64 = knots
                        .windows(2)
                        .map(|w| rule.integrate_composite(w[0], w[1], 64, |t| -loss.phi(y - t)))
                        .sum();
                    let lhs = loss.rho(y - theta);
                    let rhs = loss.rho(y) + theta.signum() * integral;
                    assert!((lhs - rhs).abs() < 1e-6, "{loss} y={y} θ={theta}: {lhs} vs {rhs}");
                }
            }
        }
    }

    #[test]
    fn numeric_derivative_is_scaled_phi() {
        // dρ/dt = c·φ(t) away from jumps with c = 1 for every family in this convention.
        for loss in FAMILIES {
            for k in -40..=40 {
                let t = 0.0737 * k as f64 + 0.013;
                let h = 1e-6;
                let d = (loss.rho(t + h) - loss.rho(t - h)) / (2.0 * h);
                assert!((d - loss.phi(t)).abs() < 1e-5, "{loss} t={t}");
            }
        }
    }

    #[test]
    fn g_examples() {
        let std_normal = ErrorModel::uncentered(ErrorLaw::gaussian(1.0));
        let g = analytic_g(&LossModel::Quantile { q: 0.5 }, &std_normal).unwrap();
        assert!((g - 2.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert!((g - 0.7979).abs() < 1e-4);
        assert_eq!(analytic_g(&LossModel::Squared, &std_normal).unwrap(), 2.0);
        assert_eq!(analytic_g(&LossModel::Huber { k: f64::INFINITY }, &std_normal).unwrap(), 1.0);
        let gh = analytic_g(&LossModel::Huber { k: 1.345 }, &std_normal).unwrap();
        assert!((gh - (2.0 * statrs::function::erf::erf(1.345 / 2f64.sqrt()) / 2.0)).abs() < 1e-12);
        assert!(matches!(
            analytic_g(&LossModel::Quantile { q: 0.25 }, &std_normal),
            Err(Error::IncompatibleErrorModel(_))
        ));
    }

    #[test]
    fn lq_g_matches_finite_difference() {
        let loss = LossModel::Lq { q: 1.5 };
        let e = ErrorModel::uncentered(ErrorLaw::gaussian(1.0));
        let g = analytic_g(&loss, &e).unwrap();
        // q(q−1)·E|Z|^{q−2} with E|Z|^a = 2^{a/2} Γ((a+1)/2) / √π.
        let a = -0.5f64;
        let closed = 0.75 * 2f64.powf(a / 2.0) * statrs::function::gamma::gamma((a + 1.0) / 2.0)
            / std::f64::consts::PI.sqrt();
        assert!((g - closed).abs() < 1e-8, "{g} vs {closed}");
        let h = 0.02;
        let shifted = |c: f64| ErrorModel::new(e.law.clone(), c);
        let fd = -(loss.mean_influence(&shifted(h)) - loss.mean_influence(&shifted(-h))) / (2.0 * h);
        assert!((g - fd).abs() < 5e-3, "{g} vs {fd}");
    }

    #[test]
    fn sigma2_examples() {
        let std_normal = ErrorModel::uncentered(ErrorLaw::gaussian(1.0));
        assert!((analytic_sigma2(&LossModel::Quantile { q: 0.5 }, &std_normal) - 1.0).abs() < 1e-12);
        let law = ErrorLaw::gaussian(1.0);
        let shifted = ErrorModel::new(law.clone(), law.quantile(0.25));
        assert!((analytic_sigma2(&LossModel::Quantile { q: 0.25 }, &shifted) - 0.75).abs() < 1e-12);
        assert!((analytic_sigma2(&LossModel::Squared, &std_normal) - 4.0).abs() < 1e-12);
        let huber = analytic_sigma2(&LossModel::Huber { k: 1e6 }, &std_normal);
        assert!((huber - 1.0).abs() < 1e-8);
    }

    #[test]
    fn influence_is_centered_under_monte_carlo() {
        let cases = [
            (LossModel::Quantile { q: 0.5 }, ErrorLaw::gaussian(1.0)),
            (LossModel::Quantile { q: 0.25 }, ErrorLaw::StudentT { df: 3.0, scale: 1.0 }),
            (LossModel::Huber { k: 1.345 }, ErrorLaw::gaussian(1.0)),
            (LossModel::Squared, ErrorLaw::StudentT { df: 5.0, scale: 1.0 }),
            (LossModel::Huber { k: 1.0 }, ErrorLaw::LogSquared { inner: Box::new(ErrorLaw::gaussian(1.0)) }),
        ];
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        for (loss, law) in cases {
            let model = ErrorModel::new(law.clone(), loss.location(&law));
            assert!(loss.mean_influence(&model).abs() < 1e-8, "{loss}");
            let n = 100_000;
            let draws: Vec<f64> = (0..n).map(|_| loss.phi(model.sample(&mut rng))).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            assert!(mean.abs() < 4.0 * (var / n as f64).sqrt(), "{loss}: mean {mean}");
        }
    }

    proptest! {
        #[test]
        fn convex_midpoint(t1 in -10.0f64..10.0, t2 in -10.0f64..10.0) {
            for loss in FAMILIES {
                let mid = loss.rho(0.5 * (t1 + t2));
                prop_assert!(mid <= 0.5 * (loss.rho(t1) + loss.rho(t2)) + 1e-12);
            }
        }

        #[test]
        fn huber_phi_is_one_lipschitz(a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let l = LossModel::Huber { k: 1.345 };
            prop_assert!((l.phi(a) - l.phi(b)).abs() <= (a - b).abs() + 1e-15);
        }
    }
}
