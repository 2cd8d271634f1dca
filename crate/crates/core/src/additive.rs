//! Marginal integration for additive components and the asymptotic bias and
//! variance of the resulting estimator.
//!
//! At `x₁` the full-dimensional local fit is evaluated at `(x₁, X_{2i})` for
//! every observed nuisance vector and the intercepts are averaged.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{oracle_mp_vectors, stream_rng, DgpSpec};
use crate::error::{Error, Result};
use crate::kernelmoments::{Kernel, MomentDomain, MomentTables};
use crate::localfit::{fit_point, Dataset, FitConfig, SampleKind, SolverSettings};
use crate::loss::{analytic_g, analytic_sigma2, LossModel};
use crate::polybasis::BasisLayout;
use crate::quadrature::{GaussLegendre, TensorRule, DEFAULT_ORDER};
use crate::stats;

/// Minimum fraction of nuisance points whose local fit must succeed.
pub const MIN_SUCCESS_FRACTION: f64 = 0.9;

/// Nuisance draws used by the Monte Carlo bias functional.
pub const BIAS_DRAWS: usize = 100_000;

/// Configuration of the marginal-integration estimator.
#[derive(Debug, Clone)]
pub struct AdditiveFitConfig {
    pub layout: BasisLayout,
    pub kernel: Kernel,
    pub loss: LossModel,
    /// Bandwidth on the direction of interest.
    pub h1: f64,
    /// Bandwidth on the nuisance directions, `h ≤ h1`.
    pub h: f64,
    pub eval_grid: Vec<f64>,
    pub solver: SolverSettings,
}

impl AdditiveFitConfig {
    pub fn new(layout: BasisLayout, kernel: Kernel, loss: LossModel, h1: f64, h: f64, eval_grid: Vec<f64>) -> Result<Self> {
        let cfg = Self {
            layout,
            kernel,
            loss,
            h1,
            h,
            eval_grid,
            solver: SolverSettings::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.layout.dim();
        if d < 2 {
            return Err(Error::InvalidConfig("marginal integration needs d >= 2".into()));
        }
        if !(self.h1 > 0.0 && self.h > 0.0) {
            return Err(Error::InvalidConfig(format!("bandwidths must be positive (h1 = {}, h = {})", self.h1, self.h)));
        }
        if self.h > self.h1 {
            return Err(Error::InvalidConfig(format!(
                "nuisance bandwidth h = {} exceeds h1 = {}",
                self.h, self.h1
            )));
        }
        if !self.dimension_condition_met() {
            log::warn!(
                "3d < 2p + 5 fails for d = {d}, p = {}; the asymptotics may not apply",
                self.layout.degree()
            );
        }
        self.fit_config().map(|_| ())
    }

    /// `3d < 2p + 5`.
    pub fn dimension_condition_met(&self) -> bool {
        3 * self.layout.dim() < 2 * self.layout.degree() + 5
    }

    pub fn bandwidths(&self) -> Vec<f64> {
        let mut h = vec![self.h; self.layout.dim()];
        h[0] = self.h1;
        h
    }

    /// Anisotropic local fit configuration `(h1, h, …, h)`.
    pub fn fit_config(&self) -> Result<FitConfig> {
        let mut cfg = FitConfig::anisotropic(self.layout.clone(), self.kernel, self.bandwidths(), self.loss)?;
        cfg.solver = self.solver;
        Ok(cfg)
    }
}

/// Outcome of the average at one `x₁`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalValue {
    #[serde(with = "crate::serde_nan")]
    pub estimate: f64,
    pub failures: usize,
    pub total: usize,
}

/// Observations with `|X_{i1} − x₁| ≤ h₁`, columns rotated so the nuisance
/// coordinates come first. The intercept of the local fit does not depend on
/// the coordinate order, and the rotation lets the window search use the
/// narrower nuisance bandwidth.
struct Slice {
    data: Dataset,
    cfg: FitConfig,
}

fn slice_around(data: &Dataset, cfg: &AdditiveFitConfig, x1: f64) -> Result<Option<Slice>> {
    let d = data.dim();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..data.len() {
        let row = data.row(i);
        if (row[0] - x1).abs() <= cfg.h1 {
            x.extend_from_slice(&row[1..]);
            x.push(row[0]);
            y.push(data.y()[i]);
        }
    }
    if y.is_empty() {
        return Ok(None);
    }
    let rotated = Dataset::new(y, x, d, SampleKind::Iid)?;
    let mut bw = vec![cfg.h; d];
    bw[d - 1] = cfg.h1;
    let mut fit = FitConfig::anisotropic(cfg.layout.clone(), cfg.kernel, bw, cfg.loss)?;
    fit.solver = cfg.solver;
    Ok(Some(Slice { data: rotated, cfg: fit }))
}

/// `φ_n1(x₁) = n⁻¹ Σ_i β̂_0(x₁, X_{2i})` with the failure count.
pub fn marginal_integration_detailed(data: &Dataset, cfg: &AdditiveFitConfig, x1: f64) -> Result<MarginalValue> {
    cfg.validate()?;
    if data.dim() != cfg.layout.dim() {
        return Err(Error::InvalidConfig(format!(
            "data dimension {} does not match basis dimension {}",
            data.dim(),
            cfg.layout.dim()
        )));
    }
    let total = data.len();
    let slice = slice_around(data, cfg, x1)?;
    let fits: Vec<Option<f64>> = (0..total)
        .into_par_iter()
        .map(|i| {
            let s = slice.as_ref()?;
            let row = data.row(i);
            let mut point: Vec<f64> = row[1..].to_vec();
            point.push(x1);
            fit_point(&s.data, &point, &s.cfg).ok().map(|f| f.m_hat)
        })
        .collect();
    let values: Vec<f64> = fits.into_iter().flatten().collect();
    let failures = total - values.len();
    if (values.len() as f64) < MIN_SUCCESS_FRACTION * total as f64 {
        return Err(Error::TooManyLocalFailures { failures, total });
    }
    Ok(MarginalValue {
        estimate: stats::mean(&values),
        failures,
        total,
    })
}

/// `φ_n1(x₁)`.
pub fn marginal_integration(data: &Dataset, cfg: &AdditiveFitConfig, x1: f64) -> Result<f64> {
    marginal_integration_detailed(data, cfg, x1).map(|v| v.estimate)
}

/// A grid point whose average could not be formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFailure {
    pub x1: f64,
    pub message: String,
}

/// Estimated component on the evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveEstimate {
    pub grid: Vec<f64>,
    #[serde(with = "crate::serde_nan::vec")]
    pub phi_n1: Vec<f64>,
    /// `φ_n1` minus its mean over the successful grid points.
    #[serde(with = "crate::serde_nan::vec")]
    pub centered_component: Vec<f64>,
    pub failures: Vec<PointFailure>,
}

/// `φ_n1` over `cfg.eval_grid`; failed points are NaN and logged.
pub fn estimate_component(data: &Dataset, cfg: &AdditiveFitConfig) -> Result<AdditiveEstimate> {
    let mut phi = Vec::with_capacity(cfg.eval_grid.len());
    let mut failures = Vec::new();
    for &x1 in &cfg.eval_grid {
        match marginal_integration(data, cfg, x1) {
            Ok(v) => phi.push(v),
            Err(e @ Error::TooManyLocalFailures { .. }) => {
                phi.push(f64::NAN);
                failures.push(PointFailure {
                    x1,
                    message: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let ok: Vec<f64> = phi.iter().copied().filter(|v| v.is_finite()).collect();
    let center = stats::mean(&ok);
    let centered_component = phi.iter().map(|v| v - center).collect();
    Ok(AdditiveEstimate {
        grid: cfg.eval_grid.clone(),
        phi_n1: phi,
        centered_component,
        failures,
    })
}

fn nuisance_rule(d: usize) -> TensorRule {
    TensorRule::on_box(&vec![(0.0, 1.0); d - 1], DEFAULT_ORDER)
}

fn full_point(x1: f64, x2: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(x2.len() + 1);
    x.push(x1);
    x.extend_from_slice(x2);
    x
}

/// Target `φ₁(x₁) = ∫ m(x₁, x₂) f₂(x₂) dx₂` by quadrature over the nuisance cube.
pub fn phi1_truth(x1: f64, spec: &DgpSpec) -> f64 {
    nuisance_rule(spec.d).integrate(|x2| spec.target_value(&full_point(x1, x2)) * spec.nuisance_density(x2))
}

/// `e₁ W S_p⁻¹ B₁ m_{p+1}(x)` without the bandwidth prefactor.
fn bias_functional(tables: &MomentTables, spec: &DgpSpec, x: &[f64]) -> Result<f64> {
    let (m1, _) = oracle_mp_vectors(spec, &tables.layout, x)?;
    let m1 = DVector::from_vec(m1);
    let row = tables.sp_inv.row(0) * &tables.b1;
    Ok((row * m1)[0])
}

/// Monte Carlo bias and its standard error over `draws` nuisance vectors.
pub fn asymptotic_bias_mc(x1: f64, cfg: &AdditiveFitConfig, spec: &DgpSpec, draws: usize) -> Result<(f64, f64)> {
    let tables = MomentTables::new(cfg.kernel, &cfg.layout)?;
    let mut rng = stream_rng(spec.seed, u64::MAX);
    let mut vals = Vec::with_capacity(draws);
    for _ in 0..draws {
        let x2 = spec.sample_nuisance(&mut rng);
        vals.push(bias_functional(&tables, spec, &full_point(x1, &x2))?);
    }
    let scale = cfg.h1.max(cfg.h).powi(cfg.layout.degree() as i32 + 1);
    Ok((scale * stats::mean(&vals), scale * stats::standard_error(&vals)))
}

/// `max(h₁, h)^{p+1} e₁ W S_p⁻¹ B₁ E m_{p+1}(x₁, X₂)`.
pub fn asymptotic_bias(x1: f64, cfg: &AdditiveFitConfig, spec: &DgpSpec) -> Result<f64> {
    asymptotic_bias_mc(x1, cfg, spec, BIAS_DRAWS).map(|v| v.0)
}

/// Same functional by quadrature over the nuisance cube.
pub fn asymptotic_bias_quadrature(x1: f64, cfg: &AdditiveFitConfig, spec: &DgpSpec) -> Result<f64> {
    let tables = MomentTables::new(cfg.kernel, &cfg.layout)?;
    let rule = nuisance_rule(spec.d);
    let mut total = 0.0;
    for (x2, w) in rule.points.iter().zip(&rule.weights) {
        total += w * spec.nuisance_density(x2) * bias_functional(&tables, spec, &full_point(x1, x2))?;
    }
    Ok(cfg.h1.max(cfg.h).powi(cfg.layout.degree() as i32 + 1) * total)
}

/// `(e₁ S_p⁻¹ K₂)²`.
pub fn kernel_constant(cfg: &AdditiveFitConfig, domain: MomentDomain) -> Result<f64> {
    let tables = MomentTables::new(cfg.kernel, &cfg.layout)?;
    let k2 = tables.k2(domain);
    let v = (tables.sp_inv.row(0) * k2)[0];
    Ok(v * v)
}

/// `∫ (∫ K(u₁, v) e₁ S_p⁻¹ μ(u₁, v) dv)² du₁`, the constant that a direct
/// linearization of the averaged intercepts produces.
pub fn marginal_kernel_constant(cfg: &AdditiveFitConfig) -> Result<f64> {
    let tables = MomentTables::new(cfg.kernel, &cfg.layout)?;
    let d = cfg.layout.dim();
    let row: Vec<f64> = tables.sp_inv.row(0).iter().copied().collect();
    let outer = GaussLegendre::new(DEFAULT_ORDER);
    let inner = TensorRule::new(d - 1, DEFAULT_ORDER);
    let mut mu = vec![0.0; cfg.layout.len()];
    Ok(outer.integrate(-1.0, 1.0, |u1| {
        let s: f64 = inner
            .points
            .iter()
            .zip(&inner.weights)
            .map(|(v, w)| {
                let u = full_point(u1, v);
                cfg.layout.mu_into(&u, &mut mu);
                w * cfg.kernel.eval(&u) * row.iter().zip(&mu).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum();
        s * s
    }))
}

/// `∫ f₂²(x₂) c(x₁, x₂) / f(x₁, x₂) dx₂` over the nuisance cube.
fn density_integral<F: Fn(&[f64]) -> f64>(x1: f64, spec: &DgpSpec, c: F) -> f64 {
    nuisance_rule(spec.d).integrate(|x2| {
        let x = full_point(x1, x2);
        let f2 = spec.nuisance_density(x2);
        f2 * f2 * c(&x) / spec.covariates.pdf(&x)
    })
}

/// `{∫ (f g²)⁻¹ f₂² σ² dx₂} · (e₁ S_p⁻¹ K₂)²` for any loss.
pub fn asymptotic_variance_general(x1: f64, cfg: &AdditiveFitConfig, spec: &DgpSpec, domain: MomentDomain) -> Result<f64> {
    let err = spec.error_model();
    let g = analytic_g(&cfg.loss, &err)?;
    let sigma2 = analytic_sigma2(&cfg.loss, &err);
    let integral = density_integral(x1, spec, |_| sigma2 / (g * g));
    Ok(integral * kernel_constant(cfg, domain)?)
}

/// `q(1−q) {∫ f⁻¹ f₂² f_ε⁻²(0) dx₂} · (e₁ S_p⁻¹ K₂)²`.
pub fn asymptotic_variance_quantile(x1: f64, cfg: &AdditiveFitConfig, spec: &DgpSpec, domain: MomentDomain) -> Result<f64> {
    let LossModel::Quantile { q } = cfg.loss else {
        return Err(Error::InvalidConfig("quantile variance formula needs the check loss".into()));
    };
    let err = spec.error_model();
    if (err.cdf(0.0) - q).abs() > 1e-8 {
        return Err(Error::IncompatibleErrorModel(format!(
            "error law is not centered at its {q}-quantile"
        )));
    }
    let f0 = err.pdf(0.0);
    let integral = density_integral(x1, spec, |_| 1.0 / (f0 * f0));
    Ok(q * (1.0 - q) * integral * kernel_constant(cfg, domain)?)
}

/// `σ̃²(x₁)`, dispatching to the quantile formula for the check loss.
pub fn asymptotic_variance(x1: f64, cfg: &AdditiveFitConfig, spec: &DgpSpec, domain: MomentDomain) -> Result<f64> {
    match cfg.loss {
        LossModel::Quantile { .. } => asymptotic_variance_quantile(x1, cfg, spec, domain),
        _ => asymptotic_variance_general(x1, cfg, spec, domain),
    }
}

/// Variance with the kernel constant from [`marginal_kernel_constant`].
pub fn asymptotic_variance_linearized(x1: f64, cfg: &AdditiveFitConfig, spec: &DgpSpec) -> Result<f64> {
    let err = spec.error_model();
    let g = analytic_g(&cfg.loss, &err)?;
    let sigma2 = analytic_sigma2(&cfg.loss, &err);
    let integral = density_integral(x1, spec, |_| sigma2 / (g * g));
    Ok(integral * marginal_kernel_constant(cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate, simulate_stream, Component, CovariateLaw, RegressionFunction};
    use crate::kernelmoments::KernelFamily;
    use crate::noise::ErrorLaw;
    use std::f64::consts::PI;

    fn spec(loss: LossModel, m1: Component, m2: Component) -> DgpSpec {
        DgpSpec::iid(
            RegressionFunction {
                constant: 0.5,
                components: vec![m1, m2],
            },
            ErrorLaw::gaussian(1.0),
            loss,
        )
    }

    fn sin2pi() -> Component {
        Component::Sin {
            amplitude: 1.0,
            omega: 2.0 * PI,
            phase: 0.0,
        }
    }

    fn square() -> Component {
        Component::Poly {
            coeffs: vec![-1.0 / 3.0, 0.0, 1.0],
        }
    }

    fn cfg(loss: LossModel, h1: f64, h: f64) -> AdditiveFitConfig {
        AdditiveFitConfig::new(
            BasisLayout::new(2, 1).unwrap(),
            Kernel::new(KernelFamily::Epanechnikov, 2),
            loss,
            h1,
            h,
            vec![0.3, 0.5, 0.7],
        )
        .unwrap()
    }

    #[test]
    fn rejects_nuisance_bandwidth_above_h1() {
        let r = AdditiveFitConfig::new(
            BasisLayout::new(2, 1).unwrap(),
            Kernel::new(KernelFamily::Epanechnikov, 2),
            LossModel::Squared,
            0.1,
            0.2,
            vec![0.5],
        );
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
        let c = cfg(LossModel::Squared, 0.2, 0.1);
        assert!(c.dimension_condition_met());
        let mut c4 = c.clone();
        c4.layout = BasisLayout::new(4, 1).unwrap();
        assert!(!c4.dimension_condition_met());
    }

    #[test]
    fn constant_response_is_reproduced() {
        let s = spec(LossModel::Quantile { q: 0.5 }, Component::Zero, Component::Zero);
        let data = simulate(&s, 400).unwrap().dataset;
        let data = data.with_response(vec![1.75; 400]).unwrap();
        let c = cfg(LossModel::Quantile { q: 0.5 }, 0.3, 0.2);
        for x1 in [0.2, 0.5] {
            assert!((marginal_integration(&data, &c, x1).unwrap() - 1.75).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_keeps_the_intercept() {
        let s = spec(LossModel::Squared, sin2pi(), square());
        let data = simulate(&s, 600).unwrap().dataset;
        let c = cfg(LossModel::Squared, 0.25, 0.15);
        let direct_cfg = c.fit_config().unwrap();
        let x1 = 0.4;
        let values: Vec<f64> = (0..data.len())
            .filter_map(|i| fit_point(&data, &[x1, data.row(i)[1]], &direct_cfg).ok().map(|f| f.m_hat))
            .collect();
        let direct = stats::mean(&values);
        let rotated = marginal_integration_detailed(&data, &c, x1).unwrap();
        assert_eq!(rotated.total - rotated.failures, values.len());
        assert!((rotated.estimate - direct).abs() < 1e-10);
    }

    #[test]
    fn too_many_failures_is_reported() {
        let s = spec(LossModel::Squared, Component::Zero, Component::Zero);
        let data = simulate(&s, 100).unwrap().dataset;
        let c = cfg(LossModel::Squared, 0.05, 0.02);
        assert!(matches!(
            marginal_integration(&data, &c, 0.5),
            Err(Error::TooManyLocalFailures { .. })
        ));
        let est = estimate_component(&data, &c).unwrap();
        assert_eq!(est.failures.len(), 3);
        assert!(est.phi_n1.iter().all(|v| v.is_nan()));
    }

    #[test]
    fn centered_component_tracks_m1() {
        let s = spec(LossModel::Squared, sin2pi(), square());
        let mut errs = Vec::new();
        for n in [500usize, 4000] {
            let h1 = 0.7 * (n as f64).powf(-0.2);
            let mut c = cfg(LossModel::Squared, h1, 0.5 * h1);
            c.eval_grid = (0..9).map(|k| 0.3 + 0.05 * k as f64).collect();
            let truth: Vec<f64> = c.eval_grid.iter().map(|&x| phi1_truth(x, &s)).collect();
            let tc = stats::mean(&truth);
            let mut sups = Vec::new();
            for rep in 0..5 {
                let data = simulate_stream(&s, n, rep).unwrap().dataset;
                let est = estimate_component(&data, &c).unwrap();
                assert!(est.centered_component.iter().sum::<f64>().abs() < 1e-10);
                let sup = est
                    .centered_component
                    .iter()
                    .zip(&truth)
                    .map(|(a, t)| (a - (t - tc)).abs())
                    .fold(0.0, f64::max);
                sups.push(sup);
            }
            errs.push(stats::median(&sups));
        }
        assert!(errs[1] < 0.5 * errs[0] + 1e-3, "{errs:?}");
    }

    #[test]
    fn bias_matches_quadrature_and_scales() {
        let cosine = Component::Sin {
            amplitude: 1.0,
            omega: 2.0 * PI,
            phase: PI / 2.0,
        };
        let c = cfg(LossModel::Squared, 0.2, 0.1);
        let wavy = spec(LossModel::Squared, sin2pi(), cosine);
        let (mc, se) = asymptotic_bias_mc(0.3, &c, &wavy, BIAS_DRAWS).unwrap();
        let quad = asymptotic_bias_quadrature(0.3, &c, &wavy).unwrap();
        assert!(se > 0.0 && (mc - quad).abs() < 3.0 * se, "{mc} vs {quad} (se {se})");
        let s = spec(LossModel::Squared, sin2pi(), square());
        let quad = asymptotic_bias_quadrature(0.3, &c, &s).unwrap();
        let half = cfg(LossModel::Squared, 0.1, 0.05);
        let q2 = asymptotic_bias_quadrature(0.3, &half, &s).unwrap();
        assert!((q2 - quad / 4.0).abs() < 1e-12);
        // Curvature from both components, scaled by h1²: ν₂ (m₁'' + E m₂'') / 2.
        let m1pp = -(2.0 * PI).powi(2) * (2.0 * PI * 0.3).sin();
        assert!((quad - 0.04 * 0.2 * (m1pp + 2.0) / 2.0).abs() < 1e-10);
    }

    #[test]
    fn bias_from_flat_first_component_comes_from_nuisance() {
        let s = spec(LossModel::Squared, Component::Zero, square());
        let c = cfg(LossModel::Squared, 0.2, 0.1);
        let quad = asymptotic_bias_quadrature(0.5, &c, &s).unwrap();
        assert!((quad - 0.04 * 0.2).abs() < 1e-12);
    }

    #[test]
    fn variance_formulas_agree() {
        for q in [0.5, 0.25] {
            let loss = LossModel::Quantile { q };
            let mut s = spec(loss, sin2pi(), square());
            s.covariates = CovariateLaw::Tilted { slopes: vec![0.5, -0.8] };
            s.m.components = vec![Component::Zero, Component::Zero];
            let c = cfg(loss, 0.2, 0.1);
            for domain in [MomentDomain::FullSupport, MomentDomain::UnitCube] {
                let a = asymptotic_variance_general(0.4, &c, &s, domain).unwrap();
                let b = asymptotic_variance_quantile(0.4, &c, &s, domain).unwrap();
                assert!((a - b).abs() < 1e-10 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn uniform_design_constants_factor_out() {
        let loss = LossModel::Quantile { q: 0.5 };
        let s = spec(loss, sin2pi(), square());
        let c = cfg(loss, 0.2, 0.1);
        let v = asymptotic_variance(0.5, &c, &s, MomentDomain::FullSupport).unwrap();
        // σ²/g² = 1 / (4 φ(0)²) = π/2; e₁ S_p⁻¹ K₂ = 1 on the full support.
        assert!((v - PI / 2.0).abs() < 1e-12, "{v}");
        let lin = asymptotic_variance_linearized(0.5, &c, &s).unwrap();
        assert!((lin - 0.6 * PI / 2.0).abs() < 1e-10, "{lin}");
        let cube = asymptotic_variance(0.5, &c, &s, MomentDomain::UnitCube).unwrap();
        assert!((cube - 0.0625 * PI / 2.0).abs() < 1e-12, "{cube}");
    }
}
