//! Simulated designs with analytic oracles: i.i.d. additive regression,
//! nonlinear autoregression and log-volatility series.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernelmoments::LocalDensityModel;
use crate::localfit::{Dataset, SampleKind};
use crate::loss::{analytic_g, LossModel};
use crate::noise::{ErrorLaw, ErrorModel};
use crate::polybasis::{enumerate_degree, BasisLayout, MultiIndex};
use crate::quadrature::GaussLegendre;

/// Divergence threshold for the series recursions.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

/// Per-replication generator: a ChaCha20 stream selected by `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One-dimensional additive component `m_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Component {
    Zero,
    /// `Σ_j c_j t^j`.
    Poly { coeffs: Vec<f64> },
    /// `A sin(ω t + φ)`.
    Sin { amplitude: f64, omega: f64, phase: f64 },
    /// `a |t − c|`.
    Abs { slope: f64, center: f64 },
}

impl Component {
    pub fn value(&self, t: f64) -> f64 {
        self.derivative(0, t)
    }

    /// `dⁿ m_k / dtⁿ` at `t`.
    pub fn derivative(&self, n: u32, t: f64) -> f64 {
        match self {
            Component::Zero => 0.0,
            Component::Poly { coeffs } => coeffs
                .iter()
                .enumerate()
                .skip(n as usize)
                .map(|(j, c)| {
                    let falling: f64 = ((j - n as usize + 1)..=j).map(|v| v as f64).product();
                    c * falling * t.powi((j - n as usize) as i32)
                })
                .sum(),
            Component::Sin {
                amplitude,
                omega,
                phase,
            } => amplitude * omega.powi(n as i32) * (omega * t + phase + n as f64 * FRAC_PI_2).sin(),
            Component::Abs { slope, center } => match n {
                0 => slope * (t - center).abs(),
                1 => slope * (t - center).signum(),
                _ => 0.0,
            },
        }
    }

    /// Global Lipschitz constant, infinite for polynomials of degree ≥ 2.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Component::Zero => 0.0,
            Component::Poly { coeffs } => {
                if coeffs.iter().skip(2).any(|c| *c != 0.0) {
                    f64::INFINITY
                } else {
                    coeffs.get(1).map_or(0.0, |c| c.abs())
                }
            }
            Component::Sin {
                amplitude, omega, ..
            } => (amplitude * omega).abs(),
            Component::Abs { slope, .. } => slope.abs(),
        }
    }

    /// Derivatives of order up to this are continuous; `None` when smooth.
    fn smoothness_order(&self) -> Option<u32> {
        match self {
            Component::Abs { .. } => Some(0),
            _ => None,
        }
    }
}

/// `m(x) = c + Σ_k m_k(x_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFunction {
    #[serde(default)]
    pub constant: f64,
    pub components: Vec<Component>,
}

impl RegressionFunction {
    pub fn zero(d: usize) -> Self {
        Self {
            constant: 0.0,
            components: vec![Component::Zero; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.constant
            + self
                .components
                .iter()
                .zip(x)
                .map(|(c, &t)| c.value(t))
                .sum::<f64>()
    }

    /// `D^r m(x)`: mixed derivatives of an additive function vanish.
    pub fn derivative(&self, r: &MultiIndex, x: &[f64]) -> f64 {
        let e = r.entries();
        if r.order() == 0 {
            return self.value(x);
        }
        let mut active = e.iter().enumerate().filter(|(_, &v)| v > 0);
        let (k, &n) = active.next().expect("nonzero order");
        if active.next().is_some() {
            return 0.0;
        }
        self.components[k].derivative(n, x[k])
    }
}

/// Product covariate law on `[0,1]^d` with factors `f_k(t) = 1 + a_k (t − ½)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum CovariateLaw {
    #[default]
    Uniform,
    /// `|a_k| < 2` keeps every factor positive.
    Tilted { slopes: Vec<f64> },
}

impl CovariateLaw {
    fn slope(&self, k: usize) -> f64 {
        match self {
            CovariateLaw::Uniform => 0.0,
            CovariateLaw::Tilted { slopes } => slopes[k],
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if let CovariateLaw::Tilted { slopes } = self {
            if slopes.len() != d || slopes.iter().any(|a| !(a.abs() < 2.0)) {
                return Err(Error::InvalidConfig(format!(
                    "tilted covariate law needs {d} slopes with |a| < 2, got {slopes:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn marginal_pdf(&self, k: usize, t: f64) -> f64 {
        if !(0.0..=1.0).contains(&t) {
            return 0.0;
        }
        1.0 + self.slope(k) * (t - 0.5)
    }

    fn marginal_pdf_derivative(&self, k: usize, t: f64) -> f64 {
        if !(0.0..=1.0).contains(&t) {
            return 0.0;
        }
        self.slope(k)
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        x.iter().enumerate().map(|(k, &t)| self.marginal_pdf(k, t)).product()
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(j, &t)| {
                        if j == k {
                            self.marginal_pdf_derivative(j, t)
                        } else {
                            self.marginal_pdf(j, t)
                        }
                    })
                    .product()
            })
            .collect()
    }

    /// Inverse-CDF draw of coordinate `k`.
    pub fn sample_coordinate<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let a = self.slope(k);
        if a.abs() < 1e-12 {
            return u;
        }
        // F(t) = t + a (t² − t) / 2
        let b = 1.0 - 0.5 * a;
        (-b + (b * b + 2.0 * a * u).sqrt()) / a
    }

    /// `E h(X_k)` by Gauss–Legendre on `[0, 1]`.
    pub fn marginal_expectation<F: Fn(f64) -> f64>(&self, k: usize, h: F) -> f64 {
        GaussLegendre::new(40).integrate_composite(0.0, 1.0, 8, |t| h(t) * self.marginal_pdf(k, t))
    }
}

/// Generator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpKind {
    /// `X_i` i.i.d. from the covariate law, `Y_i = m(X_i) + ε_i`.
    IidAdditive,
    /// `Y_i = m(Y_{i−1}, …, Y_{i−d}) + ε_i`.
    MixingAr,
    /// `Y_i = σ_i e_i`, `ln σ_i² = m(Y_{i−1}, …, Y_{i−d})`, response `ln Y_i²`.
    LogArchVolatility,
}

fn default_burn_in() -> usize {
    500
}

fn default_loss() -> LossModel {
    LossModel::Squared
}

/// Full description of a simulated design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub d: usize,
    pub m: RegressionFunction,
    /// Raw innovation law; centered for `center_for` before use.
    pub error: ErrorLaw,
    #[serde(default)]
    pub covariates: CovariateLaw,
    /// Loss whose location functional the errors are centered for.
    #[serde(default = "default_loss")]
    pub center_for: LossModel,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Simulated sample.
#[derive(Debug, Clone)]
pub struct SeriesSample {
    pub dataset: Dataset,
    pub burn_in_discarded: usize,
    pub kind: DgpKind,
}

impl DgpSpec {
    pub fn iid(m: RegressionFunction, error: ErrorLaw, center_for: LossModel) -> Self {
        Self {
            kind: DgpKind::IidAdditive,
            d: m.dim(),
            m,
            error,
            covariates: CovariateLaw::Uniform,
            center_for,
            burn_in: default_burn_in(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m.dim() != self.d {
            return Err(Error::InvalidConfig(format!(
                "regression function has {} components for d = {}",
                self.m.dim(),
                self.d
            )));
        }
        self.error.validate().map_err(Error::InvalidConfig)?;
        self.center_for.validate()?;
        self.covariates.validate(self.d)?;
        match self.kind {
            DgpKind::IidAdditive => {
                for k in 0..self.d {
                    let c = &self.m.components[k];
                    let mean = self.covariates.marginal_expectation(k, |t| c.value(t));
                    if mean.abs() > 1e-3 {
                        return Err(Error::InvalidConfig(format!(
                            "component {k} has mean {mean:.4e} under the covariate law; E m_k(X_k) must be 0"
                        )));
                    }
                }
            }
            DgpKind::MixingAr => {
                let lip: f64 = self.m.components.iter().map(Component::lipschitz).sum();
                if !(lip < 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "autoregression is not contractive: Σ Lip(m_k) = {lip}"
                    )));
                }
            }
            DgpKind::LogArchVolatility => {
                if !self.error.is_symmetric() {
                    return Err(Error::InvalidConfig("log-volatility innovations must be symmetric".into()));
                }
                let lip: f64 = self.m.components.iter().map(Component::lipschitz).sum();
                if !lip.is_finite() {
                    return Err(Error::InvalidConfig("log-volatility function must have bounded slope".into()));
                }
            }
        }
        Ok(())
    }

    /// Law of the additive error in the response before centering.
    pub fn response_error_law(&self) -> ErrorLaw {
        match self.kind {
            DgpKind::LogArchVolatility => ErrorLaw::LogSquared {
                inner: Box::new(self.error.clone()),
            },
            _ => self.error.clone(),
        }
    }

    /// Response error centered so that the active loss's location is zero.
    pub fn error_model(&self) -> ErrorModel {
        let law = self.response_error_law();
        let shift = self.center_for.location(&law);
        ErrorModel::new(law, shift)
    }

    /// Offset between the response regression and `m` (nonzero only for log-volatility).
    fn target_offset(&self) -> f64 {
        match self.kind {
            DgpKind::LogArchVolatility => self.error_model().shift,
            _ => 0.0,
        }
    }

    /// The M-regression of the response on the covariates.
    pub fn target_value(&self, x: &[f64]) -> f64 {
        self.m.value(x) + self.target_offset()
    }

    /// `D^r` of the response regression.
    pub fn target_derivative(&self, r: &MultiIndex, x: &[f64]) -> f64 {
        if r.order() == 0 {
            self.target_value(x)
        } else {
            self.m.derivative(r, x)
        }
    }

    /// True errors `ε_i = Y_i − m(X_i)` of a sample from this design.
    pub fn true_errors(&self, data: &Dataset) -> Vec<f64> {
        let offset = self.target_offset();
        (0..data.len())
            .map(|i| data.y()[i] - self.m.value(data.row(i)) - offset)
            .collect()
    }

    /// `f` and `g` for the i.i.d. design; the series designs have no closed-form stationary density.
    pub fn density_model(&self, loss: &LossModel) -> Result<LocalDensityModel> {
        if self.kind != DgpKind::IidAdditive {
            return Err(Error::OracleUnavailable(format!(
                "stationary covariate density of the {:?} design",
                self.kind
            )));
        }
        let g = analytic_g(loss, &self.error_model())?;
        let law_f = self.covariates.clone();
        let law_grad = self.covariates.clone();
        Ok(LocalDensityModel::new(
            move |x| law_f.pdf(x),
            move |_| g,
            move |x| law_grad.gradient(x).into_iter().map(|v| g * v).collect(),
        ))
    }

    /// Density of the nuisance covariates `(X_2, …, X_d)`.
    pub fn nuisance_density(&self, x2: &[f64]) -> f64 {
        x2.iter()
            .enumerate()
            .map(|(j, &t)| self.covariates.marginal_pdf(j + 1, t))
            .product()
    }

    /// Draws nuisance covariates `(X_2, …, X_d)`.
    pub fn sample_nuisance<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (1..self.d).map(|k| self.covariates.sample_coordinate(k, rng)).collect()
    }

    /// Order of the highest derivative the oracle can provide reliably everywhere.
    pub fn derivative_limit(&self) -> Option<u32> {
        self.m
            .components
            .iter()
            .filter_map(Component::smoothness_order)
            .min()
    }
}

/// `simulate_stream` on stream 0 of the spec's seed.
pub fn simulate(spec: &DgpSpec, n: usize) -> Result<SeriesSample> {
    simulate_stream(spec, n, 0)
}

/// Draws a sample of size `n` from the stream `(spec.seed, stream)`.
pub fn simulate_stream(spec: &DgpSpec, n: usize, stream: u64) -> Result<SeriesSample> {
    spec.validate()?;
    if n < 50 {
        return Err(Error::InvalidConfig(format!("sample size must be >= 50, got {n}")));
    }
    let mut rng = stream_rng(spec.seed, stream);
    let err = spec.error_model();
    let d = spec.d;
    match spec.kind {
        DgpKind::IidAdditive => {
            let mut x = Vec::with_capacity(n * d);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let start = x.len();
                for k in 0..d {
                    x.push(spec.covariates.sample_coordinate(k, &mut rng));
                }
                let e = err.sample(&mut rng);
                y.push(spec.m.value(&x[start..]) + e);
            }
            Ok(SeriesSample {
                dataset: Dataset::new(y, x, d, SampleKind::Iid)?,
                burn_in_discarded: 0,
                kind: spec.kind,
            })
        }
        DgpKind::MixingAr | DgpKind::LogArchVolatility => {
            let total = spec.burn_in + n + d;
            let mut path: Vec<f64> = vec![0.0; d];
            let mut response = Vec::with_capacity(total);
            let mut lags = vec![0.0; d];
            for step in d..total {
                for j in 0..d {
                    lags[j] = path[step - 1 - j];
                }
                let (value, target) = match spec.kind {
                    DgpKind::MixingAr => {
                        let v = spec.m.value(&lags) + err.sample(&mut rng);
                        (v, v)
                    }
                    _ => {
                        let sigma = (0.5 * spec.m.value(&lags)).exp();
                        let v = sigma * spec.error.sample(&mut rng);
                        (v, (v * v).ln())
                    }
                };
                if !(value.abs() <= DIVERGENCE_THRESHOLD) || !target.is_finite() {
                    return Err(Error::NonStationaryConfig {
                        step,
                        magnitude: value.abs(),
                    });
                }
                path.push(value);
                response.push(target);
            }
            let start = spec.burn_in + d;
            let mut x = Vec::with_capacity(n * d);
            let mut y = Vec::with_capacity(n);
            for step in start..total {
                for j in 0..d {
                    x.push(path[step - 1 - j]);
                }
                y.push(response[step - d]);
            }
            Ok(SeriesSample {
                dataset: Dataset::new(y, x, d, SampleKind::Series)?,
                burn_in_discarded: spec.burn_in,
                kind: spec.kind,
            })
        }
    }
}

fn taylor_coefficients(spec: &DgpSpec, indices: &[MultiIndex], x: &[f64]) -> Result<Vec<f64>> {
    indices
        .iter()
        .map(|r| Ok(spec.target_derivative(r, x) / r.factorial()? as f64))
        .collect()
}

/// `D^r m(x) / r!` in basis order (the raw Taylor coefficients).
pub fn oracle_beta_p(spec: &DgpSpec, layout: &BasisLayout, x: &[f64]) -> Result<Vec<f64>> {
    taylor_coefficients(spec, layout.order(), x)
}

/// `D^r m(x) / r!` for `|r| = p+1` and `|r| = p+2`.
pub fn oracle_mp_vectors(spec: &DgpSpec, layout: &BasisLayout, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = layout.dim();
    let p = layout.degree();
    Ok((
        taylor_coefficients(spec, &enumerate_degree(d, p + 1), x)?,
        taylor_coefficients(spec, &enumerate_degree(d, p + 2), x)?,
    ))
}

/// Sample autocorrelation at `lag`.
pub fn autocorrelation(series: &[f64], lag: usize) -> f64 {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let var: f64 = series.iter().map(|v| (v - mean).powi(2)).sum();
    let cov: f64 = (lag..n)
        .map(|i| (series[i] - mean) * (series[i - lag] - mean))
        .sum();
    cov / var
}
