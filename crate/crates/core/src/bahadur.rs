//! Terms of the Bahadur decomposition of the local estimator and the
//! empirical remainder-rate study.
//!
//! Everything is expressed in bandwidth-scaled coordinates: the fitted gap is
//! `H W (β̃ − β)` and the leading term is
//! `β* = (n ∏h)⁻¹ W S_np⁻¹ Σ K_i φ(Y_i − μ(X_i − x)ᵀβ) μ(u_i)`, so that for
//! squared loss with the empirical `S_np` the two coincide exactly.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{oracle_beta_p, oracle_mp_vectors, simulate_stream, DgpSpec};
use crate::error::{Error, Result};
use crate::kernelmoments::{build_np_mtilde, build_snp, LocalDensityModel, MomentMatrix, MomentTables};
use crate::localfit::{solve_local, Dataset, FitConfig, FitResult, LocalProblem};
use crate::loss::{analytic_g, LossModel};
use crate::polybasis::{enumerate_degree, MultiIndex};
use crate::stats;

/// How `S_np(x)` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnpMode {
    /// Quadrature of `K(u) μμᵀ (f g)(x + Hu)` with the true `f` and `g`.
    #[default]
    Oracle,
    /// `ĝ(x) f̂(x) S_p` from kernel plug-ins.
    Plugin,
    /// `g (n∏h)⁻¹ Σ K_i μ(u_i) μ(u_i)ᵀ` from the sample itself.
    Empirical,
}

/// All terms of the decomposition at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BahadurDecomposition {
    pub x: Vec<f64>,
    pub leading_term: Vec<f64>,
    /// `None` when the design has no analytic density oracle.
    pub bias_theoretical: Option<Vec<f64>>,
    pub stochastic_term: Vec<f64>,
    pub fitted_gap: Vec<f64>,
    pub remainder: Vec<f64>,
    pub snp_mode: SnpMode,
    pub fit: FitResult,
}

impl BahadurDecomposition {
    pub fn sup_remainder(&self) -> f64 {
        sup_norm(&self.remainder)
    }

    pub fn sup_leading(&self) -> f64 {
        sup_norm(&self.leading_term)
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a.abs()).fold(0.0, f64::max)
}

/// Fit configuration plus the oracle quantities shared across evaluation points.
#[derive(Debug, Clone)]
pub struct BahadurContext {
    pub cfg: FitConfig,
    pub spec: DgpSpec,
    pub tables: MomentTables,
    pub density: Option<LocalDensityModel>,
    /// `g` under the centered error law (homoscedastic designs).
    pub g: f64,
}

impl BahadurContext {
    pub fn new(cfg: FitConfig, spec: DgpSpec) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        if spec.d != cfg.layout.dim() {
            return Err(Error::InvalidConfig(format!(
                "design dimension {} does not match basis dimension {}",
                spec.d,
                cfg.layout.dim()
            )));
        }
        let g = analytic_g(&cfg.loss, &spec.error_model())?;
        let density = match spec.density_model(&cfg.loss) {
            Ok(dm) => Some(dm),
            Err(Error::OracleUnavailable(_)) => None,
            Err(e) => return Err(e),
        };
        let tables = MomentTables::new(cfg.kernel, &cfg.layout)?;
        Ok(Self {
            cfg,
            spec,
            tables,
            density,
            g,
        })
    }

    /// Same context with new bandwidths.
    pub fn with_bandwidths(&self, bandwidths: Vec<f64>) -> Result<Self> {
        let mut next = self.clone();
        next.cfg.bandwidths = bandwidths;
        next.cfg.validate()?;
        Ok(next)
    }

    fn loss(&self) -> &LossModel {
        &self.cfg.loss
    }

    fn scale(&self, data: &Dataset) -> f64 {
        1.0 / (data.len() as f64 * self.cfg.bandwidth_volume())
    }

    /// `H β_p(x)`: the oracle coefficients in scaled coordinates.
    fn scaled_truth(&self, x: &[f64]) -> Result<Vec<f64>> {
        let b = oracle_beta_p(&self.spec, &self.cfg.layout, x)?;
        Ok(self.cfg.h_scaling().apply(&b))
    }

    fn snp(&self, data: &Dataset, x: &[f64], prob: &LocalProblem, mode: SnpMode, gamma: Option<&[f64]>) -> Result<MomentMatrix> {
        match mode {
            SnpMode::Oracle => {
                let density = self.density.as_ref().ok_or_else(|| {
                    Error::OracleUnavailable("oracle S_np needs the covariate density".into())
                })?;
                Ok(build_snp(x, &self.cfg.bandwidths, density, &self.cfg.kernel, &self.cfg.layout))
            }
            SnpMode::Empirical => {
                let c: Vec<f64> = prob.weights.iter().map(|w| w * self.g * self.scale(data)).collect();
                let zeros = vec![0.0; prob.len()];
                let (a, _) = prob.normal_equations(&c, &zeros);
                Ok(MomentMatrix::new(a))
            }
            SnpMode::Plugin => {
                let f_hat = prob.weights.iter().sum::<f64>() * self.scale(data);
                let gamma = gamma.ok_or_else(|| Error::InvalidConfig("plug-in S_np needs a fitted solution".into()))?;
                let g_hat = plugin_g(self.loss(), prob, gamma);
                Ok(MomentMatrix::new(&self.tables.sp.matrix * (f_hat * g_hat)))
            }
        }
    }

    /// `(n∏h)⁻¹ W S_np⁻¹ Σ K_i φ(e_i) μ(u_i)` for the given residual vector.
    fn influence_sum(&self, data: &Dataset, prob: &LocalProblem, snp: &MomentMatrix, residuals: &[f64]) -> Result<Vec<f64>> {
        let n = self.cfg.layout.len();
        let mut s = DVector::<f64>::zeros(n);
        for i in 0..prob.len() {
            let c = prob.weights[i] * self.loss().phi(residuals[i]);
            if c == 0.0 {
                continue;
            }
            for (l, v) in prob.row(i).iter().enumerate() {
                s[l] += c * v;
            }
        }
        s *= self.scale(data);
        let inv = snp.inverse(false)?;
        let v: Vec<f64> = (inv * s).iter().copied().collect();
        Ok(self.cfg.w_scaling().apply(&v))
    }

    fn taylor_residuals(&self, prob: &LocalProblem, x: &[f64]) -> Result<Vec<f64>> {
        let truth = self.scaled_truth(x)?;
        Ok(prob.residuals(&truth))
    }

    fn true_residuals(&self, data: &Dataset, prob: &LocalProblem) -> Vec<f64> {
        prob.index
            .iter()
            .zip(&prob.y)
            .map(|(&i, y)| y - self.spec.target_value(data.row(i)))
            .collect()
    }

    fn fitted_problem(&self, data: &Dataset, x: &[f64]) -> LocalProblem {
        LocalProblem::build(data, x, &self.cfg)
    }

    /// Leading term `β*_n(x)`.
    pub fn leading_term(&self, data: &Dataset, x: &[f64], mode: SnpMode) -> Result<Vec<f64>> {
        let prob = self.fitted_problem(data, x);
        let gamma = match mode {
            SnpMode::Plugin => Some(solve_local(&prob, &self.cfg)?.gamma),
            _ => None,
        };
        let snp = self.snp(data, x, &prob, mode, gamma.as_deref())?;
        let r = self.taylor_residuals(&prob, x)?;
        self.influence_sum(data, &prob, &snp, &r)
    }

    /// Stochastic term: the leading-term sum with `φ` applied to the true errors.
    pub fn stochastic_term(&self, data: &Dataset, x: &[f64], mode: SnpMode) -> Result<Vec<f64>> {
        let prob = self.fitted_problem(data, x);
        let gamma = match mode {
            SnpMode::Plugin => Some(solve_local(&prob, &self.cfg)?.gamma),
            _ => None,
        };
        let snp = self.snp(data, x, &prob, mode, gamma.as_deref())?;
        let r = self.true_residuals(data, &prob);
        self.influence_sum(data, &prob, &snp, &r)
    }

    /// Leading-order bias of the leading term, selected entrywise by the parity of `p − |r|`.
    ///
    /// Odd branch: `W S_p⁻¹ B_1 m_{p+1}^H`. Even branch:
    /// `W S_p⁻¹ [(fg)⁻¹ (M̃ − N_p S_p⁻¹ B_1) m_{p+1}^H + B_2 m_{p+2}^H]`, where
    /// `m^H_r = h^r D^r m / r!` and the gradient of `fg` is scaled by `H`.
    pub fn theoretical_bias(&self, x: &[f64]) -> Result<Vec<f64>> {
        let density = self.density.as_ref().ok_or_else(|| {
            Error::OracleUnavailable("theoretical bias needs the covariate density".into())
        })?;
        let layout = &self.cfg.layout;
        let h = &self.cfg.bandwidths;
        let (m1, m2) = oracle_mp_vectors(&self.spec, layout, x)?;
        let scale_block = |block: &[MultiIndex], v: Vec<f64>| -> DVector<f64> {
            DVector::from_iterator(
                v.len(),
                block.iter().zip(v).map(|(r, c)| {
                    c * r
                        .entries()
                        .iter()
                        .zip(h)
                        .map(|(&e, hk)| hk.powi(e as i32))
                        .product::<f64>()
                }),
            )
        };
        let d = layout.dim();
        let p = layout.degree();
        let m1h = scale_block(&enumerate_degree(d, p + 1), m1);
        let m2h = scale_block(&enumerate_degree(d, p + 2), m2);
        let t = &self.tables;
        let odd = &t.sp_inv * (&t.b1 * &m1h);
        let fg = density.fg(x);
        let grad: Vec<f64> = density.grad_fg(x).iter().zip(h).map(|(g, hk)| g * hk).collect();
        let (np, mt) = build_np_mtilde(t, &grad);
        let correction: DMatrix<f64> = (&mt - &np * &t.sp_inv * &t.b1) / fg;
        let even = &t.sp_inv * (correction * &m1h + &t.b2 * &m2h);
        let raw: Vec<f64> = (0..layout.len())
            .map(|k| if layout.is_odd_branch(k) { odd[k] } else { even[k] })
            .collect();
        Ok(self.cfg.w_scaling().apply(&raw))
    }

    /// Fits at `x` and assembles every term.
    pub fn decompose(&self, data: &Dataset, x: &[f64], mode: SnpMode) -> Result<BahadurDecomposition> {
        let prob = self.fitted_problem(data, x);
        let sol = solve_local(&prob, &self.cfg)?;
        let snp = self.snp(data, x, &prob, mode, Some(&sol.gamma))?;
        let truth = self.scaled_truth(x)?;
        let leading_term = self.influence_sum(data, &prob, &snp, &prob.residuals(&truth))?;
        let stochastic_term = self.influence_sum(data, &prob, &snp, &self.true_residuals(data, &prob))?;
        let w = self.cfg.w_scaling();
        let gap_scaled: Vec<f64> = sol.gamma.iter().zip(&truth).map(|(a, b)| a - b).collect();
        let fitted_gap = w.apply(&gap_scaled);
        let remainder = fitted_gap
            .iter()
            .zip(&leading_term)
            .map(|(a, b)| a - b)
            .collect();
        let bias_theoretical = match self.theoretical_bias(x) {
            Ok(b) => Some(b),
            Err(Error::OracleUnavailable(_)) => None,
            Err(e) => return Err(e),
        };
        let raw = self.cfg.h_scaling().apply_inverse(&sol.gamma);
        let beta_hat = w.apply(&raw);
        let fit = FitResult {
            m_hat: beta_hat[0],
            beta_hat,
            raw,
            objective: prob.objective(self.loss(), &sol.gamma),
            iterations: sol.iterations,
            local_count: prob.len(),
            converged: sol.converged,
            optimality_verified: sol.verified,
            non_unique: sol.non_unique,
            trace: sol.trace,
        };
        Ok(BahadurDecomposition {
            x: x.to_vec(),
            leading_term,
            bias_theoretical,
            stochastic_term,
            fitted_gap,
            remainder,
            snp_mode: mode,
            fit,
        })
    }
}

/// Local plug-in estimate of `g` from kernel-weighted residuals.
fn plugin_g(loss: &LossModel, prob: &LocalProblem, gamma: &[f64]) -> f64 {
    let r = prob.residuals(gamma);
    let w = &prob.weights;
    let total: f64 = w.iter().sum();
    match *loss {
        LossModel::Squared => 2.0,
        LossModel::Huber { k } => {
            if k.is_infinite() {
                return 1.0;
            }
            r.iter().zip(w).filter(|(v, _)| v.abs() < k).map(|(_, w)| w).sum::<f64>() / total
        }
        LossModel::Lq { q } => {
            r.iter()
                .zip(w)
                .map(|(v, w)| w * q * (q - 1.0) * v.abs().max(1e-8).powf(q - 2.0))
                .sum::<f64>()
                / total
        }
        LossModel::Quantile { .. } => {
            let sd = stats::sd(&r);
            let mad = 1.4826 * stats::median(&r.iter().map(|v| v.abs()).collect::<Vec<_>>());
            let spread = if mad > 0.0 { sd.min(mad) } else { sd };
            let b = 1.06 * spread * (r.len() as f64).powf(-0.2);
            let c = 1.0 / (b * (2.0 * std::f64::consts::PI).sqrt());
            let dens: f64 = r
                .iter()
                .zip(w)
                .map(|(v, w)| w * c * (-0.5 * (v / b).powi(2)).exp())
                .sum::<f64>()
                / total;
            2.0 * dens
        }
    }
}

/// Evaluation grid `[lo + margin·h, hi − margin·h]^d` with `points` per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    /// Margin in units of the bandwidth on each side.
    pub margin: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: 1.0,
            points: 101,
            margin: 2.0,
        }
    }
}

impl GridSpec {
    pub fn build(&self, bandwidths: &[f64]) -> Result<Vec<Vec<f64>>> {
        let axes: Vec<Vec<f64>> = bandwidths
            .iter()
            .map(|h| {
                let a = self.lo + self.margin * h;
                let b = self.hi - self.margin * h;
                if self.points == 1 {
                    vec![0.5 * (a + b)]
                } else {
                    (0..self.points)
                        .map(|k| a + (b - a) * k as f64 / (self.points - 1) as f64)
                        .collect()
                }
            })
            .collect();
        if self.points == 0 || axes.iter().any(|ax| ax[0] > ax[ax.len() - 1]) {
            return Err(Error::InvalidConfig(format!(
                "grid [{}, {}] with margin {}·h is empty",
                self.lo, self.hi, self.margin
            )));
        }
        let mut grid = vec![Vec::new()];
        for ax in &axes {
            grid = grid
                .into_iter()
                .flat_map(|prefix: Vec<f64>| {
                    ax.iter().map(move |&v| {
                        let mut next = prefix.clone();
                        next.push(v);
                        next
                    })
                })
                .collect();
        }
        Ok(grid)
    }
}

/// `h = c · n^{−exponent}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSchedule {
    pub c: f64,
    pub exponent: f64,
}

impl BandwidthSchedule {
    pub fn at(&self, n: usize) -> f64 {
        self.c * (n as f64).powf(-self.exponent)
    }
}

/// Per-`n` summary of the remainder study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub n: usize,
    pub h: f64,
    pub median_sup_remainder: f64,
    pub median_sup_leading: f64,
    /// `log n / (n ∏h)`.
    pub rate_base: f64,
    /// `rate_base^λ`.
    pub theory_scale: f64,
    pub successes: usize,
    pub failures: usize,
}

/// Remainder-rate study outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub loss: LossModel,
    pub lambda_target: f64,
    pub records: Vec<RateRecord>,
    #[serde(with = "crate::serde_nan")]
    pub fitted_slope: f64,
    #[serde(with = "crate::serde_nan")]
    pub slope_se: f64,
    /// Set when some median fell below `1e−10` and no slope was fitted.
    pub degenerate: bool,
}

/// Inputs of the remainder-rate study.
#[derive(Debug, Clone)]
pub struct RateStudy {
    pub context: BahadurContext,
    pub n_schedule: Vec<usize>,
    pub h_schedule: BandwidthSchedule,
    pub grid: GridSpec,
    pub replications: usize,
    pub snp_mode: SnpMode,
    /// Offset of the first cell in the stream key space.
    pub cell_offset: u64,
}

/// Stream key for replication `rep` of cell `cell`.
pub fn stream_key(cell: u64, rep: usize) -> u64 {
    (cell << 32) | rep as u64
}

/// Sup over the grid of `‖remainder‖_∞` and `‖leading‖_∞` for one dataset.
pub fn sup_over_grid(ctx: &BahadurContext, data: &Dataset, grid: &[Vec<f64>], mode: SnpMode) -> Result<(f64, f64)> {
    let mut sup_r: f64 = 0.0;
    let mut sup_l: f64 = 0.0;
    for x in grid {
        let dec = ctx.decompose(data, x, mode)?;
        sup_r = sup_r.max(dec.sup_remainder());
        sup_l = sup_l.max(dec.sup_leading());
    }
    Ok((sup_r, sup_l))
}

/// Runs the study: per `n`, the median over replications of the grid
/// sup-remainder, then the log-log slope against `log n / (n ∏h)`.
pub fn rate_regression(study: &RateStudy) -> Result<RateReport> {
    if study.n_schedule.len() < 4 {
        return Err(Error::InvalidConfig("rate study needs at least 4 sample sizes".into()));
    }
    if study.n_schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("sample sizes must be strictly increasing".into()));
    }
    if study.replications == 0 {
        return Err(Error::InvalidConfig("replications must be >= 1".into()));
    }
    let lambda = study.context.cfg.loss.rate_exponent(study.context.cfg.layout.degree());
    let d = study.context.cfg.layout.dim();
    let mut records = Vec::with_capacity(study.n_schedule.len());
    for (cell, &n) in study.n_schedule.iter().enumerate() {
        let h = study.h_schedule.at(n);
        let ctx = study.context.with_bandwidths(vec![h; d])?;
        let grid = study.grid.build(&ctx.cfg.bandwidths)?;
        let cell_id = study.cell_offset + cell as u64;
        let outcomes: Vec<Result<(f64, f64)>> = (0..study.replications)
            .into_par_iter()
            .map(|rep| {
                let sample = simulate_stream(&ctx.spec, n, stream_key(cell_id, rep))?;
                sup_over_grid(&ctx, &sample.dataset, &grid, study.snp_mode)
            })
            .collect();
        let (ok, failures): (Vec<_>, Vec<_>) = outcomes.into_iter().partition(|r| r.is_ok());
        let failures = failures.len();
        if failures * 10 > study.replications {
            return Err(Error::StudyAborted {
                failures,
                total: study.replications,
            });
        }
        let (rem, lead): (Vec<f64>, Vec<f64>) = ok.into_iter().map(|r| r.expect("partitioned")).unzip();
        let rate_base = (n as f64).ln() / (n as f64 * ctx.cfg.bandwidth_volume());
        records.push(RateRecord {
            n,
            h,
            median_sup_remainder: stats::median(&rem),
            median_sup_leading: stats::median(&lead),
            rate_base,
            theory_scale: rate_base.powf(lambda),
            successes: rem.len(),
            failures,
        });
    }
    let (fitted_slope, slope_se, degenerate) = match aggregate_rate(&records) {
        Ok((s, se)) => (s, se, false),
        Err(Error::DegenerateFit { .. }) => (f64::NAN, f64::NAN, true),
        Err(e) => return Err(e),
    };
    Ok(RateReport {
        loss: study.context.cfg.loss,
        lambda_target: lambda,
        records,
        fitted_slope,
        slope_se,
        degenerate,
    })
}

/// OLS slope and standard error of `log median` on `log(log n / (n ∏h))`.
pub fn aggregate_rate(records: &[RateRecord]) -> Result<(f64, f64)> {
    if records.len() < 4 {
        return Err(Error::InvalidConfig("slope fit needs at least 4 records".into()));
    }
    if let Some(r) = records.iter().find(|r| !(r.median_sup_remainder >= 1e-10)) {
        return Err(Error::DegenerateFit {
            n: r.n,
            median: r.median_sup_remainder,
        });
    }
    let x: Vec<f64> = records.iter().map(|r| r.rate_base.ln()).collect();
    let y: Vec<f64> = records.iter().map(|r| r.median_sup_remainder.ln()).collect();
    let (_, slope, se) = stats::ols(&x, &y);
    Ok((slope, se))
}
