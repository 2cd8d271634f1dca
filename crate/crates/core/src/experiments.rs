//! Monte Carlo studies: replication, aggregation and pass/fail checks.
//!
//! Replication `r` of cell `c` draws from the stream `(base_seed, c << 32 | r)`,
//! so results do not depend on execution order or thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::additive::{
    asymptotic_bias, asymptotic_variance, asymptotic_variance_linearized, marginal_integration, phi1_truth,
    AdditiveFitConfig,
};
use crate::bahadur::{rate_regression, stream_key, BahadurContext, BandwidthSchedule, GridSpec, RateReport, RateStudy, SnpMode};
use crate::dgp::{simulate_stream, DgpKind, DgpSpec};
use crate::error::{Error, Result};
use crate::kernelmoments::{check_even_order_vanishing, Kernel, KernelFamily, MomentDomain, MomentTables};
use crate::localfit::{fit_point, objective_value, Dataset, FitConfig, SampleKind, SolverSettings};
use crate::loss::LossModel;
use crate::polybasis::{degree_count, BasisLayout, MultiIndex};
use crate::stats;

pub use crate::bahadur::aggregate_rate;

/// Study type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    BiasCheck,
    BahadurRate,
    StochasticClt,
    AdditiveClt,
    IdentitySuite,
}

/// Local fit settings shared by the studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSection {
    pub p: usize,
    #[serde(default = "default_kernel")]
    pub kernel: KernelFamily,
    pub loss: LossModel,
    /// `h = c · n^{−exponent}`; `exponent = 0` gives a fixed bandwidth.
    pub bandwidth: BandwidthSchedule,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub min_local_points: Option<usize>,
}

fn default_kernel() -> KernelFamily {
    KernelFamily::Epanechnikov
}

impl FitSection {
    pub fn fit_config(&self, d: usize, bandwidths: Vec<f64>) -> Result<FitConfig> {
        let layout = BasisLayout::new(d, self.p)?;
        let mut cfg = FitConfig::anisotropic(layout, Kernel::new(self.kernel, d), bandwidths, self.loss)?;
        cfg.solver = self.solver;
        if let Some(m) = self.min_local_points {
            cfg.min_local_points = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Settings of the marginal-integration study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveSection {
    /// Nuisance bandwidth as a fraction of `h₁`.
    pub h_ratio: f64,
    pub x1: Vec<f64>,
}

/// Settings of the remainder-rate study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RateSection {
    /// Second loss run on the same samples; its remainder must be smaller at every `n`.
    #[serde(default)]
    pub compare_with: Option<LossModel>,
}

/// Tolerances of the study checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Bias check: allowed distance in Monte Carlo standard errors.
    pub bias_z: f64,
    /// Zero-mean checks: allowed distance in standard errors.
    pub mean_z: f64,
    pub slope_band: [f64; 2],
    /// Relative band on the variance ratio.
    pub variance_rel: f64,
    pub skew_max: f64,
    pub excess_kurtosis_max: f64,
    /// Relative band on the standard-deviation ratio when `n` doubles.
    pub sd_ratio_rel: f64,
    pub identity_abs: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            bias_z: 3.0,
            mean_z: 4.0,
            slope_band: [0.55, 1.05],
            variance_rel: 0.3,
            skew_max: 0.35,
            excess_kurtosis_max: 0.8,
            sd_ratio_rel: 0.15,
            identity_abs: 1e-8,
        }
    }
}

/// A complete study description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub study: Study,
    pub replications: usize,
    pub base_seed: u64,
    pub n_schedule: Vec<usize>,
    pub dgp: DgpSpec,
    pub fit: FitSection,
    #[serde(default)]
    pub snp_mode: SnpMode,
    /// Evaluation points for the pointwise studies.
    #[serde(default)]
    pub points: Vec<Vec<f64>>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub additive: Option<AdditiveSection>,
    #[serde(default)]
    pub rate: RateSection,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Worker threads; not echoed in reports, which must not depend on it.
    #[serde(default, skip_serializing)]
    pub threads: Option<usize>,
}

impl ExperimentSpec {
    /// The DGP with the spec's seed and errors centered for the fitted loss.
    pub fn design(&self) -> DgpSpec {
        let mut d = self.dgp.clone();
        d.seed = self.base_seed;
        d.center_for = self.fit.loss;
        d
    }

    fn design_for(&self, loss: LossModel) -> DgpSpec {
        let mut d = self.design();
        d.center_for = loss;
        d
    }

    fn eval_points(&self) -> Vec<Vec<f64>> {
        if self.points.is_empty() {
            vec![vec![0.5; self.dgp.d]]
        } else {
            self.points.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.replications == 0 {
            return bad("replications must be >= 1".into());
        }
        if self.n_schedule.is_empty() {
            return bad("n_schedule must not be empty".into());
        }
        if self.n_schedule.iter().any(|&n| n < 50) {
            return bad("every sample size must be >= 50".into());
        }
        if !(self.fit.bandwidth.c > 0.0 && self.fit.bandwidth.exponent >= 0.0) {
            return bad(format!("invalid bandwidth schedule {:?}", self.fit.bandwidth));
        }
        self.design().validate()?;
        self.fit.fit_config(self.dgp.d, vec![self.fit.bandwidth.at(self.n_schedule[0]); self.dgp.d])?;
        if self.points.iter().any(|p| p.len() != self.dgp.d) {
            return bad(format!("evaluation points must have dimension {}", self.dgp.d));
        }
        let iid = self.dgp.kind == DgpKind::IidAdditive;
        match self.study {
            Study::BiasCheck if !iid => bad("bias-check needs the i.i.d. design (analytic density)".into()),
            Study::BahadurRate | Study::StochasticClt if self.snp_mode == SnpMode::Oracle && !iid => {
                bad("oracle S_np needs the i.i.d. design; use plugin or empirical".into())
            }
            Study::BahadurRate if self.n_schedule.len() < 4 => bad("bahadur-rate needs at least 4 sample sizes".into()),
            Study::BahadurRate if self.n_schedule.windows(2).any(|w| w[0] >= w[1]) => {
                bad("n_schedule must be strictly increasing".into())
            }
            Study::AdditiveClt => {
                let Some(a) = &self.additive else {
                    return bad("additive-clt needs an [additive] section".into());
                };
                if !iid || self.dgp.d < 2 {
                    return bad("additive-clt needs the i.i.d. design with d >= 2".into());
                }
                if !(a.h_ratio > 0.0 && a.h_ratio <= 1.0) || a.x1.is_empty() {
                    return bad("additive.h_ratio must lie in (0, 1] and additive.x1 must be non-empty".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Monte Carlo summary of one quantity in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub quantity: String,
    pub n: usize,
    pub h: f64,
    pub point: Vec<f64>,
    #[serde(with = "crate::serde_nan")]
    pub mean: f64,
    #[serde(with = "crate::serde_nan")]
    pub sd: f64,
    #[serde(with = "crate::serde_nan")]
    pub se: f64,
    #[serde(with = "crate::serde_nan")]
    pub median: f64,
    /// Value the mean is compared with (NaN when there is none).
    #[serde(with = "crate::serde_nan")]
    pub reference: f64,
    pub replications: usize,
    pub failures: usize,
}

impl CellSummary {
    #[allow(clippy::too_many_arguments)]
    fn from_values(label: String, quantity: &str, n: usize, h: f64, point: Vec<f64>, values: &[f64], failures: usize, reference: f64) -> Self {
        Self {
            label,
            quantity: quantity.to_string(),
            n,
            h,
            point,
            mean: stats::mean(values),
            sd: stats::sd(values),
            se: stats::standard_error(values),
            median: stats::median(values),
            reference,
            replications: values.len() + failures,
            failures,
        }
    }

    /// `se` is undefined for a single replication.
    pub fn se_defined(&self) -> bool {
        self.se.is_finite()
    }
}

/// One pass/fail comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    #[serde(with = "crate::serde_nan")]
    pub value: f64,
    #[serde(with = "crate::serde_nan")]
    pub lower: f64,
    #[serde(with = "crate::serde_nan")]
    pub upper: f64,
    pub pass: bool,
}

impl Check {
    fn within(name: impl Into<String>, value: f64, lower: f64, upper: f64) -> Self {
        Self {
            name: name.into(),
            value,
            lower,
            upper,
            pass: value >= lower && value <= upper,
        }
    }
}

/// Informational value without a pass flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub name: String,
    #[serde(with = "crate::serde_nan")]
    pub value: f64,
}

/// Study output. Wall-clock time is not part of the payload so that reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub study: Study,
    pub cells: Vec<CellSummary>,
    pub checks: Vec<Check>,
    pub diagnostics: Vec<Diagnostic>,
    pub rate: Vec<RateReport>,
    pub replication_failures: usize,
    pub config: ExperimentSpec,
}

impl ExperimentReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Runs a study, on a dedicated pool when `threads` is set.
pub fn run(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    match spec.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(|| dispatch(spec)),
        None => dispatch(spec),
    }
}

fn dispatch(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let mut report = ExperimentReport {
        study: spec.study,
        cells: Vec::new(),
        checks: Vec::new(),
        diagnostics: Vec::new(),
        rate: Vec::new(),
        replication_failures: 0,
        config: spec.clone(),
    };
    match spec.study {
        Study::BiasCheck => bias_check(spec, &mut report)?,
        Study::BahadurRate => bahadur_rate(spec, &mut report)?,
        Study::StochasticClt => stochastic_clt(spec, &mut report)?,
        Study::AdditiveClt => additive_clt(spec, &mut report)?,
        Study::IdentitySuite => identity_suite(spec, &mut report)?,
    }
    Ok(report)
}

/// Runs `f` for every replication and splits successes from failures, aborting past 10%.
fn replicate<T: Send>(r: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<(Vec<T>, usize)> {
    let out: Vec<Result<T>> = (0..r).into_par_iter().map(&f).collect();
    let mut ok = Vec::with_capacity(r);
    let mut failures = 0;
    for o in out {
        match o {
            Ok(v) => ok.push(v),
            Err(e) => {
                log::debug!("replication failed: {e}");
                failures += 1;
            }
        }
    }
    if failures * 10 > r {
        return Err(Error::StudyAborted { failures, total: r });
    }
    Ok((ok, failures))
}

fn context(spec: &ExperimentSpec, design: DgpSpec, loss: LossModel, n: usize) -> Result<BahadurContext> {
    let h = spec.fit.bandwidth.at(n);
    let mut fit = spec.fit.clone();
    fit.loss = loss;
    BahadurContext::new(fit.fit_config(design.d, vec![h; design.d])?, design)
}

fn bias_check(spec: &ExperimentSpec, report: &mut ExperimentReport) -> Result<()> {
    let design = spec.design();
    let points = spec.eval_points();
    for (cell, &n) in spec.n_schedule.iter().enumerate() {
        let ctx = context(spec, design.clone(), spec.fit.loss, n)?;
        let h = ctx.cfg.h();
        let (reps, failures) = replicate(spec.replications, |r| {
            let data = simulate_stream(&design, n, stream_key(cell as u64, r))?.dataset;
            points
                .iter()
                .map(|x| Ok(fit_point(&data, x, &ctx.cfg)?.m_hat - design.target_value(x)))
                .collect::<Result<Vec<f64>>>()
        })?;
        report.replication_failures += failures;
        for (k, x) in points.iter().enumerate() {
            let errors: Vec<f64> = reps.iter().map(|v| v[k]).collect();
            let bias = ctx.theoretical_bias(x)?[0];
            let c = CellSummary::from_values(format!("n={n} x={x:?}"), "m_hat_error", n, h, x.clone(), &errors, failures, bias);
            let z = (c.mean - bias).abs() / c.se;
            report.diagnostics.push(Diagnostic {
                name: format!("{} theoretical_bias", c.label),
                value: bias,
            });
            if c.se_defined() {
                report.checks.push(Check::within(format!("{} bias_z", c.label), z, 0.0, spec.tolerances.bias_z));
            }
            report.cells.push(c);
        }
    }
    Ok(())
}

fn bahadur_rate(spec: &ExperimentSpec, report: &mut ExperimentReport) -> Result<()> {
    let mut losses = vec![spec.fit.loss];
    losses.extend(spec.rate.compare_with);
    for loss in losses {
        let design = spec.design_for(loss);
        let ctx = context(spec, design, loss, spec.n_schedule[0])?;
        let study = RateStudy {
            context: ctx,
            n_schedule: spec.n_schedule.clone(),
            h_schedule: spec.fit.bandwidth,
            grid: spec.grid.clone(),
            replications: spec.replications,
            snp_mode: spec.snp_mode,
            cell_offset: 0,
        };
        let rr = rate_regression(&study)?;
        for rec in &rr.records {
            report.replication_failures += rec.failures;
            report.cells.push(CellSummary {
                label: format!("{loss} n={}", rec.n),
                quantity: "sup_remainder".into(),
                n: rec.n,
                h: rec.h,
                point: Vec::new(),
                mean: f64::NAN,
                sd: f64::NAN,
                se: f64::NAN,
                median: rec.median_sup_remainder,
                reference: rec.theory_scale,
                replications: rec.successes + rec.failures,
                failures: rec.failures,
            });
        }
        report.rate.push(rr);
    }
    let main = &report.rate[0];
    let [lo, hi] = spec.tolerances.slope_band;
    report.checks.push(Check::within(format!("{} slope", main.loss), main.fitted_slope, lo, hi));
    if let Some(other) = report.rate.get(1) {
        for (a, b) in main.records.iter().zip(&other.records) {
            report.checks.push(Check::within(
                format!("n={} {} / {} median sup-remainder", a.n, other.loss, main.loss),
                b.median_sup_remainder / a.median_sup_remainder,
                0.0,
                1.0 - f64::EPSILON,
            ));
        }
    }
    Ok(())
}

fn stochastic_clt(spec: &ExperimentSpec, report: &mut ExperimentReport) -> Result<()> {
    let design = spec.design();
    let points = spec.eval_points();
    let mut sds: Vec<Vec<f64>> = Vec::new();
    for (cell, &n) in spec.n_schedule.iter().enumerate() {
        let ctx = context(spec, design.clone(), spec.fit.loss, n)?;
        let h = ctx.cfg.h();
        let (reps, failures) = replicate(spec.replications, |r| {
            let data = simulate_stream(&design, n, stream_key(cell as u64, r))?.dataset;
            points
                .iter()
                .map(|x| {
                    let dec = ctx.decompose(&data, x, spec.snp_mode)?;
                    Ok((dec.stochastic_term[0], dec.leading_term[0], dec.sup_remainder(), dec.sup_leading()))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        report.replication_failures += failures;
        let mut cell_sds = Vec::new();
        for (k, x) in points.iter().enumerate() {
            let stoch: Vec<f64> = reps.iter().map(|v| v[k].0).collect();
            let lead: Vec<f64> = reps.iter().map(|v| v[k].1).collect();
            let label = format!("n={n} x={x:?}");
            let c = CellSummary::from_values(label.clone(), "stochastic_term", n, h, x.clone(), &stoch, failures, 0.0);
            if c.se_defined() {
                report.checks.push(Check::within(format!("{label} stochastic mean_z"), c.mean.abs() / c.se, 0.0, spec.tolerances.mean_z));
            }
            cell_sds.push(c.sd);
            report.cells.push(c);
            report.cells.push(CellSummary::from_values(label.clone(), "leading_term", n, h, x.clone(), &lead, failures, f64::NAN));
            let dominated = reps.iter().filter(|v| v[k].2 < v[k].3).count() as f64 / reps.len() as f64;
            report.diagnostics.push(Diagnostic {
                name: format!("{label} fraction remainder < leading"),
                value: dominated,
            });
        }
        sds.push(cell_sds);
    }
    if spec.fit.bandwidth.exponent == 0.0 {
        for (j, w) in spec.n_schedule.windows(2).enumerate() {
            if w[1] != 2 * w[0] {
                continue;
            }
            for (k, x) in points.iter().enumerate() {
                let ratio = sds[j + 1][k] / sds[j][k];
                let target = std::f64::consts::FRAC_1_SQRT_2;
                let tol = spec.tolerances.sd_ratio_rel;
                report.checks.push(Check::within(
                    format!("x={x:?} sd ratio n={}→{}", w[0], w[1]),
                    ratio,
                    target * (1.0 - tol),
                    target * (1.0 + tol),
                ));
            }
        }
    }
    Ok(())
}

fn additive_clt(spec: &ExperimentSpec, report: &mut ExperimentReport) -> Result<()> {
    let design = spec.design();
    let section = spec.additive.as_ref().expect("validated");
    let d = design.d;
    for (cell, &n) in spec.n_schedule.iter().enumerate() {
        let h1 = spec.fit.bandwidth.at(n);
        let mut cfg = AdditiveFitConfig::new(
            BasisLayout::new(d, spec.fit.p)?,
            Kernel::new(spec.fit.kernel, d),
            spec.fit.loss,
            h1,
            section.h_ratio * h1,
            section.x1.clone(),
        )?;
        cfg.solver = spec.fit.solver;
        let truth: Vec<f64> = section.x1.iter().map(|&x| phi1_truth(x, &design)).collect();
        let root = (n as f64 * h1).sqrt();
        let (reps, failures) = replicate(spec.replications, |r| {
            let data = simulate_stream(&design, n, stream_key(cell as u64, r))?.dataset;
            section
                .x1
                .iter()
                .zip(&truth)
                .map(|(&x1, t)| Ok(root * (marginal_integration(&data, &cfg, x1)? - t)))
                .collect::<Result<Vec<f64>>>()
        })?;
        report.replication_failures += failures;
        let tol = &spec.tolerances;
        for (k, &x1) in section.x1.iter().enumerate() {
            let t: Vec<f64> = reps.iter().map(|v| v[k]).collect();
            let label = format!("n={n} x1={x1}");
            let full = asymptotic_variance(x1, &cfg, &design, MomentDomain::FullSupport)?;
            let cube = asymptotic_variance(x1, &cfg, &design, MomentDomain::UnitCube)?;
            let lin = asymptotic_variance_linearized(x1, &cfg, &design)?;
            let var = stats::variance(&t);
            let c = CellSummary::from_values(label.clone(), "root_nh1_error", n, h1, vec![x1], &t, failures, full);
            report.cells.push(c);
            report.checks.push(Check::within(
                format!("{label} variance / sigma2 (full support)"),
                var / full,
                1.0 - tol.variance_rel,
                1.0 + tol.variance_rel,
            ));
            let mean = stats::mean(&t);
            let z: Vec<f64> = t.iter().map(|v| (v - mean) / var.sqrt()).collect();
            report.checks.push(Check::within(format!("{label} |skewness|"), stats::skewness(&z).abs(), 0.0, tol.skew_max));
            report.checks.push(Check::within(
                format!("{label} |excess kurtosis|"),
                stats::excess_kurtosis(&z).abs(),
                0.0,
                tol.excess_kurtosis_max,
            ));
            let bias = asymptotic_bias(x1, &cfg, &design)?;
            for (name, value) in [
                ("empirical variance", var),
                ("sigma2 full support", full),
                ("sigma2 unit cube", cube),
                ("variance / sigma2 (unit cube)", var / cube),
                ("sigma2 linearized kernel constant", lin),
                ("variance / sigma2 (linearized)", var / lin),
                ("asymptotic bias", bias),
                ("root_nh1 asymptotic bias", root * bias),
            ] {
                report.diagnostics.push(Diagnostic {
                    name: format!("{label} {name}"),
                    value,
                });
            }
        }
    }
    Ok(())
}

/// Brute-force minimum of `Σ w_i ρ_q(y_i − θ)` over the candidate values `θ = y_j`.
pub fn weighted_quantile_objective(y: &[f64], w: &[f64], q: f64) -> f64 {
    let loss = LossModel::Quantile { q };
    y.iter()
        .map(|&theta| y.iter().zip(w).map(|(&v, &wi)| wi * loss.rho(v - theta)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

fn identity_suite(spec: &ExperimentSpec, report: &mut ExperimentReport) -> Result<()> {
    let tol = spec.tolerances.identity_abs;
    // Basis sizes and block boundaries.
    let mut worst_count = 0usize;
    let mut boundary_ok = true;
    for d in 1..=4 {
        for p in 0..=4 {
            let layout = BasisLayout::new(d, p)?;
            let expected = binomial(p + d, d);
            worst_count = worst_count.max(layout.len().abs_diff(expected));
            for i in 0..=p {
                let block = &layout.order()[layout.block(i)];
                let mut first = vec![0u32; d];
                first[d - 1] = i as u32;
                let mut last = vec![0u32; d];
                last[0] = i as u32;
                boundary_ok &= block.len() == degree_count(d, i)
                    && block[0] == MultiIndex::new(first)
                    && block[block.len() - 1] == MultiIndex::new(last);
            }
        }
    }
    report.checks.push(Check::within("basis size mismatches", worst_count as f64, 0.0, 0.0));
    report.checks.push(Check::within("degree block boundaries", if boundary_ok { 0.0 } else { 1.0 }, 0.0, 0.0));
    // Kernel moments and S_p.
    let mut moment_gap: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    let mut vanishing: f64 = 0.0;
    for d in 1..=3 {
        let kernel = Kernel::new(KernelFamily::Epanechnikov, d);
        for p in 0..=3 {
            let layout = BasisLayout::new(d, p)?;
            let tables = MomentTables::new(kernel, &layout)?;
            for a in layout.order() {
                for b in layout.order() {
                    let r = a.add(b);
                    moment_gap = moment_gap.max((kernel.moment(&r) - kernel.moment_by_quadrature(&r)).abs());
                }
            }
            min_eig = min_eig.min(tables.sp.min_eigenvalue);
            vanishing = vanishing.max(check_even_order_vanishing(&tables).max_violation);
        }
    }
    report.checks.push(Check::within("kernel moment quadrature gap", moment_gap, 0.0, 1e-12));
    report.checks.push(Check::within("S_p minimum eigenvalue", min_eig, f64::MIN_POSITIVE, f64::MAX));
    report.checks.push(Check::within("even-parity vanishing violation", vanishing, 0.0, 1e-10));
    // Squared-loss identity on random datasets.
    let mut identity_gap: f64 = 0.0;
    let mut quantile_gap: f64 = 0.0;
    for r in 0..spec.replications {
        let d = 1 + r % 2;
        let p = 1 + (r / 2) % 2;
        let mut design = spec.design_for(LossModel::Squared);
        design.kind = DgpKind::IidAdditive;
        design.d = d;
        design.m = crate::dgp::RegressionFunction::zero(d);
        design.covariates = Default::default();
        let data = simulate_stream(&design, 200, stream_key(1000, r))?.dataset;
        let mut y = data.y().to_vec();
        for (i, v) in y.iter_mut().enumerate() {
            *v += data.row(i).iter().map(|t| (3.0 * t).sin()).sum::<f64>();
        }
        let data = data.with_response(y)?;
        let mut fit = spec.fit.clone();
        fit.p = p;
        fit.loss = LossModel::Squared;
        let cfg = fit.fit_config(d, vec![0.5; d])?;
        let ctx = BahadurContext::new(cfg, design)?;
        let dec = ctx.decompose(&data, &vec![0.5; d], SnpMode::Empirical)?;
        identity_gap = identity_gap.max(dec.sup_remainder());
        // Local-constant check loss against the brute-force optimum.
        let q = 0.1 + 0.8 * ((r * 37) % 100) as f64 / 100.0;
        let cfg = FitSection { p: 0, loss: LossModel::Quantile { q }, ..spec.fit.clone() }.fit_config(d, vec![0.4; d])?;
        let x = vec![0.5; d];
        let fit = fit_point(&data, &x, &cfg)?;
        let (wy, ww) = window(&data, &x, &cfg);
        let brute = weighted_quantile_objective(&wy, &ww, q);
        quantile_gap = quantile_gap.max((objective_value(&data, &x, &cfg, &fit.raw) - brute).abs());
    }
    report.checks.push(Check::within("squared-loss remainder", identity_gap, 0.0, tol));
    report.checks.push(Check::within("local-constant quantile objective gap", quantile_gap, 0.0, 1e-6));
    Ok(())
}

fn window(data: &Dataset, x: &[f64], cfg: &FitConfig) -> (Vec<f64>, Vec<f64>) {
    let mut y = Vec::new();
    let mut w = Vec::new();
    for i in 0..data.len() {
        let u: Vec<f64> = data.row(i).iter().zip(x).zip(&cfg.bandwidths).map(|((a, b), h)| (a - b) / h).collect();
        let k = cfg.kernel.eval(&u);
        if k > 0.0 {
            y.push(data.y()[i]);
            w.push(k);
        }
    }
    (y, w)
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Dataset built from rows (convenience for configs and tests).
pub fn dataset_from_rows(y: Vec<f64>, rows: &[Vec<f64>]) -> Result<Dataset> {
    Dataset::from_rows(y, rows, SampleKind::Iid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{Component, CovariateLaw, RegressionFunction};
    use crate::noise::ErrorLaw;
    use std::f64::consts::PI;

    fn base(study: Study, loss: LossModel) -> ExperimentSpec {
        ExperimentSpec {
            study,
            replications: 20,
            base_seed: 7,
            n_schedule: vec![400],
            dgp: DgpSpec {
                kind: DgpKind::IidAdditive,
                d: 1,
                m: RegressionFunction {
                    constant: 0.0,
                    components: vec![Component::Sin {
                        amplitude: 1.0,
                        omega: 2.0 * PI,
                        phase: 0.0,
                    }],
                },
                error: ErrorLaw::gaussian(1.0),
                covariates: CovariateLaw::Uniform,
                center_for: loss,
                burn_in: 500,
                seed: 0,
            },
            fit: FitSection {
                p: 1,
                kernel: KernelFamily::Epanechnikov,
                loss,
                bandwidth: BandwidthSchedule { c: 0.15, exponent: 0.0 },
                solver: SolverSettings::default(),
                min_local_points: None,
            },
            snp_mode: SnpMode::Oracle,
            points: vec![vec![0.25]],
            grid: GridSpec::default(),
            additive: None,
            rate: RateSection::default(),
            tolerances: Tolerances::default(),
            threads: None,
        }
    }

    #[test]
    fn single_replication_flags_undefined_se() {
        let mut s = base(Study::BiasCheck, LossModel::Squared);
        s.replications = 1;
        let r = run(&s).unwrap();
        assert_eq!(r.cells.len(), 1);
        assert!(!r.cells[0].se_defined());
        assert!(r.cells[0].mean.is_finite());
        assert!(r.checks.is_empty());
    }

    #[test]
    fn reports_are_deterministic_and_thread_independent() {
        let s = base(Study::BiasCheck, LossModel::Quantile { q: 0.5 });
        let a = run(&s).unwrap();
        let b = run(&s).unwrap();
        assert_eq!(a, b);
        let mut t = s.clone();
        t.threads = Some(3);
        let c = run(&t).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
    }

    #[test]
    fn failure_accounting() {
        let s = base(Study::StochasticClt, LossModel::Huber { k: 1.0 });
        let r = run(&s).unwrap();
        for c in &r.cells {
            assert_eq!(c.replications, s.replications);
        }
        let mut bad = s.clone();
        bad.points = vec![vec![5.0]];
        assert!(matches!(run(&bad), Err(Error::StudyAborted { failures: 20, total: 20 })));
    }

    #[test]
    fn validation_rejects_unsupported_pairings() {
        let mut s = base(Study::AdditiveClt, LossModel::Squared);
        assert!(matches!(s.validate(), Err(Error::InvalidConfig(_))));
        s.study = Study::BahadurRate;
        assert!(matches!(s.validate(), Err(Error::InvalidConfig(_))));
        s.study = Study::BiasCheck;
        s.replications = 0;
        assert!(matches!(s.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn identity_suite_passes() {
        let mut s = base(Study::IdentitySuite, LossModel::Squared);
        s.replications = 8;
        let r = run(&s).unwrap();
        assert!(r.all_pass(), "{:#?}", r.checks);
    }

    #[test]
    fn brute_force_weighted_quantile() {
        let y = [3.0, 1.0, 2.0];
        let w = [1.0, 1.0, 1.0];
        // Median 2: (2q−1)t + |t| summed at q = ½ gives |1| + |−1| = 2.
        assert!((weighted_quantile_objective(&y, &w, 0.5) - 2.0).abs() < 1e-15);
    }
}
