//! Local polynomial M-estimation at a point.
//!
//! The objective `Σ K_h(X_i − x) ρ(Y_i − μ(X_i − x)ᵀβ)` is minimized in the
//! bandwidth-scaled coordinates `u_i = H⁻¹(X_i − x)`, where the design is
//! well conditioned, and mapped back to raw coefficients afterwards.
//! The reported `beta_hat` holds `r!·β_r`, i.e. `m̂(x)` followed by the
//! derivative estimates.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernelmoments::Kernel;
use crate::loss::LossModel;
use crate::polybasis::{BasisLayout, DiagonalScaling};

/// Whether the sample comes from independent draws or one stationary path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleKind {
    #[default]
    Iid,
    Series,
}

/// Observations `(Y_i, X_i)`, with an index sorted on the first covariate for window queries.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<f64>,
    x: Vec<f64>,
    d: usize,
    kind: SampleKind,
    by_first: Vec<usize>,
    first_sorted: Vec<f64>,
}

impl Dataset {
    /// `x` is row-major `n × d`.
    pub fn new(y: Vec<f64>, x: Vec<f64>, d: usize, kind: SampleKind) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidConfig("dataset dimension must be >= 1".into()));
        }
        if y.is_empty() {
            return Err(Error::InvalidConfig("dataset must contain at least one observation".into()));
        }
        if x.len() != y.len() * d {
            return Err(Error::InvalidConfig(format!(
                "covariate matrix has {} entries, expected {} × {}",
                x.len(),
                y.len(),
                d
            )));
        }
        if y.iter().chain(&x).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("dataset contains non-finite values".into()));
        }
        let mut by_first: Vec<usize> = (0..y.len()).collect();
        by_first.sort_by(|&a, &b| x[a * d].total_cmp(&x[b * d]).then(a.cmp(&b)));
        let first_sorted = by_first.iter().map(|&i| x[i * d]).collect();
        Ok(Self {
            y,
            x,
            d,
            kind,
            by_first,
            first_sorted,
        })
    }

    pub fn from_rows(y: Vec<f64>, rows: &[Vec<f64>], kind: SampleKind) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidConfig("ragged covariate rows".into()));
        }
        Self::new(y, rows.concat(), d, kind)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn kind(&self) -> SampleKind {
        self.kind
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    /// Same covariates with a new response vector.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.y.len() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("replacement response has wrong length or non-finite values".into()));
        }
        Ok(Self { y, ..self.clone() })
    }

    /// Indices with `|X_{i1} − x_1| ≤ h_1`, in sorted order of the first covariate.
    fn first_coordinate_window(&self, center: f64, h: f64) -> &[usize] {
        let lo = self.first_sorted.partition_point(|&v| v < center - h);
        let hi = self.first_sorted.partition_point(|&v| v <= center + h);
        &self.by_first[lo..hi]
    }
}

/// Solver tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub gradient_tol: f64,
    pub max_iter: usize,
    /// Initial smoothing is `eps_start_factor · MAD(residuals)`.
    pub eps_start_factor: f64,
    pub eps_final: f64,
    /// Exact vertex refinement for the check loss after smoothing.
    pub polish: bool,
    pub max_pivots: usize,
    /// Record the exact objective after every iteration.
    pub record_trace: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            gradient_tol: 1e-8,
            max_iter: 200,
            eps_start_factor: 1e-2,
            eps_final: 1e-8,
            polish: true,
            max_pivots: 500,
            record_trace: false,
        }
    }
}

/// Everything needed to solve the local problem at one point.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub layout: BasisLayout,
    pub kernel: Kernel,
    /// Per-coordinate bandwidths; all equal for the isotropic case.
    pub bandwidths: Vec<f64>,
    pub loss: LossModel,
    pub solver: SolverSettings,
    pub min_local_points: usize,
}

impl FitConfig {
    pub fn new(layout: BasisLayout, kernel: Kernel, h: f64, loss: LossModel) -> Result<Self> {
        let d = layout.dim();
        Self::anisotropic(layout, kernel, vec![h; d], loss)
    }

    pub fn anisotropic(layout: BasisLayout, kernel: Kernel, bandwidths: Vec<f64>, loss: LossModel) -> Result<Self> {
        let min_local_points = layout.len() + 2;
        let cfg = Self {
            layout,
            kernel,
            bandwidths,
            loss,
            solver: SolverSettings::default(),
            min_local_points,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.len() != self.layout.dim() || self.kernel.dim != self.layout.dim() {
            return Err(Error::InvalidConfig("bandwidth/kernel/basis dimensions disagree".into()));
        }
        if self.bandwidths.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidConfig(format!("bandwidths must be positive, got {:?}", self.bandwidths)));
        }
        if self.min_local_points < self.layout.len() {
            return Err(Error::InvalidConfig(format!(
                "min_local_points = {} is below the basis size {}",
                self.min_local_points,
                self.layout.len()
            )));
        }
        self.loss.validate()
    }

    /// `h` for isotropic configurations (the first bandwidth otherwise).
    pub fn h(&self) -> f64 {
        self.bandwidths[0]
    }

    /// `∏ h_k`, the volume factor replacing `h^d`.
    pub fn bandwidth_volume(&self) -> f64 {
        self.bandwidths.iter().product()
    }

    pub fn h_scaling(&self) -> DiagonalScaling {
        DiagonalScaling::bandwidths(&self.layout, &self.bandwidths)
    }

    pub fn w_scaling(&self) -> DiagonalScaling {
        DiagonalScaling::factorial(&self.layout)
    }
}

/// Result of one local fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// `W_p β̃`: `m̂(x)` then `r!·β̃_r` for `1 ≤ |r| ≤ p`.
    pub beta_hat: Vec<f64>,
    /// Raw minimizer `β̃` of the local objective.
    pub raw: Vec<f64>,
    pub m_hat: f64,
    pub objective: f64,
    pub iterations: usize,
    pub local_count: usize,
    pub converged: bool,
    /// Check loss only: the vertex solution passed the subgradient test.
    pub optimality_verified: bool,
    /// Check loss only: the minimizer is not unique (flat objective at the optimum).
    pub non_unique: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<f64>>,
}

/// Kernel-weighted local design in scaled coordinates.
pub(crate) struct LocalProblem {
    pub n_basis: usize,
    /// Row-major `m × N` matrix of `μ(u_i)`.
    pub design: Vec<f64>,
    pub weights: Vec<f64>,
    pub y: Vec<f64>,
    pub index: Vec<usize>,
}

impl LocalProblem {
    pub fn build(data: &Dataset, x: &[f64], cfg: &FitConfig) -> Self {
        let d = data.dim();
        let n_basis = cfg.layout.len();
        let h = &cfg.bandwidths;
        let candidates = data.first_coordinate_window(x[0], h[0]);
        let mut design = Vec::with_capacity(candidates.len() * n_basis);
        let mut weights = Vec::with_capacity(candidates.len());
        let mut y = Vec::with_capacity(candidates.len());
        let mut index = Vec::with_capacity(candidates.len());
        let mut u = vec![0.0; d];
        let mut mu = vec![0.0; n_basis];
        for &i in candidates {
            let row = data.row(i);
            let mut inside = true;
            for k in 0..d {
                u[k] = (row[k] - x[k]) / h[k];
                if u[k].abs() > 1.0 {
                    inside = false;
                    break;
                }
            }
            if !inside {
                continue;
            }
            let w = cfg.kernel.eval(&u);
            if w <= 0.0 {
                continue;
            }
            cfg.layout.mu_into(&u, &mut mu);
            design.extend_from_slice(&mu);
            weights.push(w);
            y.push(data.y[i]);
            index.push(i);
        }
        Self {
            n_basis,
            design,
            weights,
            y,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.design[i * self.n_basis..(i + 1) * self.n_basis]
    }

    pub fn fitted(&self, gamma: &[f64], i: usize) -> f64 {
        self.row(i).iter().zip(gamma).map(|(a, b)| a * b).sum()
    }

    pub fn residuals(&self, gamma: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|i| self.y[i] - self.fitted(gamma, i)).collect()
    }

    pub fn objective(&self, loss: &LossModel, gamma: &[f64]) -> f64 {
        (0..self.len())
            .map(|i| self.weights[i] * loss.rho(self.y[i] - self.fitted(gamma, i)))
            .sum()
    }

    /// `Σ c_i μ_i μ_iᵀ` and `Σ c_i μ_i z_i`.
    pub fn normal_equations(&self, c: &[f64], z: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n_basis;
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for i in 0..self.len() {
            let ci = c[i];
            if ci == 0.0 {
                continue;
            }
            let row = self.row(i);
            for l in 0..n {
                let v = ci * row[l];
                b[l] += v * z[i];
                for k in l..n {
                    a[(l, k)] += v * row[k];
                }
            }
        }
        for l in 0..n {
            for k in 0..l {
                a[(l, k)] = a[(k, l)];
            }
        }
        (a, b)
    }

    /// Numerical rank of the weighted design, from a column-pivoted QR of the normal matrix.
    pub fn rank(&self) -> usize {
        let (a, _) = self.normal_equations(&self.weights, &self.y);
        let r = a.col_piv_qr().r();
        let lead = r[(0, 0)].abs();
        if lead == 0.0 {
            return 0;
        }
        (0..self.n_basis)
            .filter(|&k| r[(k, k)].abs() > 1e-12 * lead)
            .count()
    }
}

fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    match a.clone().cholesky() {
        Some(c) => Some(c.solve(b)),
        None => a.col_piv_qr().solve(b),
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mad(residuals: &[f64]) -> f64 {
    let mut r = residuals.to_vec();
    let med = median(&mut r);
    let mut dev: Vec<f64> = residuals.iter().map(|v| (v - med).abs()).collect();
    median(&mut dev)
}

/// Scaled-coordinate solution with diagnostics.
pub(crate) struct ScaledSolution {
    pub gamma: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub verified: bool,
    pub non_unique: bool,
    pub trace: Option<Vec<f64>>,
}

fn least_squares(prob: &LocalProblem) -> Result<Vec<f64>> {
    let (a, b) = prob.normal_equations(&prob.weights, &prob.y);
    let qr = a.col_piv_qr();
    qr.solve(&b)
        .map(|v| v.iter().copied().collect())
        .ok_or(Error::SingularDesign {
            rank: prob.rank(),
            size: prob.n_basis,
        })
}

fn solve_squared(prob: &LocalProblem) -> Result<ScaledSolution> {
    Ok(ScaledSolution {
        gamma: least_squares(prob)?,
        iterations: 1,
        converged: true,
        verified: true,
        non_unique: false,
        trace: None,
    })
}

fn solve_huber(prob: &LocalProblem, k: f64, loss: &LossModel, s: &SolverSettings) -> Result<ScaledSolution> {
    let mut gamma = least_squares(prob)?;
    let mut trace = s.record_trace.then(|| vec![prob.objective(loss, &gamma)]);
    let mut converged = false;
    let mut iterations = 0;
    let mut c = vec![0.0; prob.len()];
    while iterations < s.max_iter {
        iterations += 1;
        for i in 0..prob.len() {
            let r = (prob.y[i] - prob.fitted(&gamma, i)).abs();
            c[i] = prob.weights[i] * if r < k { 1.0 } else { k / r };
        }
        let (a, b) = prob.normal_equations(&c, &prob.y);
        let next: Vec<f64> = solve_spd(a, &b)
            .ok_or(Error::SingularDesign { rank: prob.rank(), size: prob.n_basis })?
            .iter()
            .copied()
            .collect();
        let change = sup_diff(&next, &gamma);
        gamma = next;
        if let Some(t) = trace.as_mut() {
            t.push(prob.objective(loss, &gamma));
        }
        if change < s.gradient_tol {
            converged = true;
            break;
        }
    }
    Ok(ScaledSolution {
        gamma,
        iterations,
        converged,
        verified: converged,
        non_unique: false,
        trace,
    })
}

fn solve_check_loss(prob: &LocalProblem, q: f64, loss: &LossModel, s: &SolverSettings) -> Result<ScaledSolution> {
    let mut gamma = least_squares(prob)?;
    let mut trace = s.record_trace.then(|| vec![prob.objective(loss, &gamma)]);
    let scale = {
        let m = mad(&prob.residuals(&gamma));
        if m > 0.0 {
            m
        } else {
            prob.y.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0)
        }
    };
    let exact = prob.residuals(&gamma).iter().all(|r| r.abs() <= 1e-13 * scale);
    if exact {
        return Ok(ScaledSolution {
            gamma,
            iterations: 0,
            converged: true,
            verified: true,
            non_unique: false,
            trace,
        });
    }
    let mut eps = s.eps_start_factor * scale;
    let mut iterations = 0;
    let mut c = vec![0.0; prob.len()];
    let linear: Vec<f64> = prob.weights.iter().map(|w| (2.0 * q - 1.0) * w).collect();
    let mut stage_converged;
    loop {
        let final_stage = eps <= s.eps_final;
        let inner_cap = if final_stage { s.max_iter } else { 8 };
        let mut inner = 0;
        stage_converged = false;
        while inner < inner_cap && iterations < s.max_iter {
            inner += 1;
            iterations += 1;
            for i in 0..prob.len() {
                let r = prob.y[i] - prob.fitted(&gamma, i);
                c[i] = prob.weights[i] / (r * r + eps * eps).sqrt();
            }
            let (a, mut b) = prob.normal_equations(&c, &prob.y);
            for i in 0..prob.len() {
                let row = prob.row(i);
                for l in 0..prob.n_basis {
                    b[l] += linear[i] * row[l];
                }
            }
            let next: Vec<f64> = match solve_spd(a, &b) {
                Some(v) => v.iter().copied().collect(),
                None => break,
            };
            let change = sup_diff(&next, &gamma);
            gamma = next;
            if let Some(t) = trace.as_mut() {
                t.push(prob.objective(loss, &gamma));
            }
            if change < s.gradient_tol.max(1e-3 * eps) {
                stage_converged = true;
                break;
            }
        }
        if s.polish && eps <= 1e-4 * scale {
            if let Some(v) = polish_vertex(prob, q, &gamma, s.max_pivots) {
                if let Some(t) = trace.as_mut() {
                    t.push(prob.objective(loss, &v.gamma));
                }
                return Ok(ScaledSolution {
                    gamma: v.gamma,
                    iterations: iterations + v.pivots,
                    converged: true,
                    verified: true,
                    non_unique: v.non_unique,
                    trace,
                });
            }
        }
        if final_stage || iterations >= s.max_iter {
            break;
        }
        eps = (0.5 * eps).max(s.eps_final);
    }
    Ok(ScaledSolution {
        gamma,
        iterations,
        converged: stage_converged && iterations < s.max_iter,
        verified: false,
        non_unique: false,
        trace,
    })
}

struct Vertex {
    gamma: Vec<f64>,
    pivots: usize,
    non_unique: bool,
}

/// Picks `N` linearly independent observations with the smallest residuals.
fn initial_basis(prob: &LocalProblem, residuals: &[f64]) -> Option<Vec<usize>> {
    let n = prob.n_basis;
    let mut order: Vec<usize> = (0..prob.len()).collect();
    order.sort_by(|&a, &b| residuals[a].abs().total_cmp(&residuals[b].abs()));
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut basis = Vec::with_capacity(n);
    for &i in &order {
        let mut v = prob.row(i).to_vec();
        let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for e in &ortho {
            let dot: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
            for (vk, ek) in v.iter_mut().zip(e) {
                *vk -= dot * ek;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 * norm0.max(1e-300) {
            for vk in v.iter_mut() {
                *vk /= norm;
            }
            ortho.push(v);
            basis.push(i);
            if basis.len() == n {
                return Some(basis);
            }
        }
    }
    None
}

/// Exact check-loss minimizer by simplex pivoting from a near-optimal point.
///
/// A vertex interpolates `N` observations (the basis). It is optimal iff the
/// basis multipliers `ψ_B` solving `Σ_B w_i ψ_i μ_i = −Σ_{i∉B} w_i ψ(r_i) μ_i`
/// lie in `[2q−2, 2q]`.
fn polish_vertex(prob: &LocalProblem, q: f64, start: &[f64], max_pivots: usize) -> Option<Vertex> {
    let n = prob.n_basis;
    let m = prob.len();
    let lo = 2.0 * q - 2.0;
    let hi = 2.0 * q;
    let mut basis = initial_basis(prob, &prob.residuals(start))?;
    let mut in_basis = vec![false; m];
    for &i in &basis {
        in_basis[i] = true;
    }
    let basis_matrix = |basis: &[usize]| DMatrix::from_fn(n, n, |r, c| prob.row(basis[r])[c]);
    let mut gamma: Vec<f64> = {
        let yb = DVector::from_iterator(n, basis.iter().map(|&i| prob.y[i]));
        basis_matrix(&basis).lu().solve(&yb)?.iter().copied().collect()
    };
    for pivots in 0..=max_pivots {
        let a_b = basis_matrix(&basis);
        let lu = a_b.clone().lu();
        let mut r = prob.residuals(&gamma);
        for &i in &basis {
            r[i] = 0.0;
        }
        let scale = r.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        let tie = 1e-14 * scale;
        let mut g = DVector::<f64>::zeros(n);
        for i in 0..m {
            if in_basis[i] || r[i].abs() <= tie {
                continue;
            }
            let psi = if r[i] > 0.0 { hi } else { lo };
            let row = prob.row(i);
            for l in 0..n {
                g[l] += prob.weights[i] * psi * row[l];
            }
        }
        // A_Bᵀ diag(w_B) ψ_B = −g
        let mt = DMatrix::from_fn(n, n, |l, c| prob.row(basis[c])[l] * prob.weights[basis[c]]);
        let psi_b = mt.lu().solve(&(-&g))?;
        let tol = 1e-9;
        let mut worst = None;
        let mut worst_violation = tol;
        for (slot, &v) in psi_b.iter().enumerate() {
            let violation = (lo - v).max(v - hi);
            if violation > worst_violation {
                worst_violation = violation;
                worst = Some(slot);
            }
        }
        let Some(j) = worst else {
            let non_unique = psi_b.iter().any(|&v| (v - lo).abs() <= tol || (v - hi).abs() <= tol);
            return Some(Vertex {
                gamma,
                pivots,
                non_unique,
            });
        };
        if pivots == max_pivots {
            return None;
        }
        let s = if psi_b[j] < lo { 1.0 } else { -1.0 };
        let mut e = DVector::<f64>::zeros(n);
        e[j] = s;
        let delta = lu.solve(&e)?;
        let bj = basis[j];
        // Slope of t ↦ f(γ + tδ) at 0⁺ and the breakpoints along the ray.
        let mut slope = prob.weights[bj] * (1.0 - s * (2.0 * q - 1.0));
        let mut breaks: Vec<(f64, f64, usize)> = Vec::new();
        for i in 0..m {
            if in_basis[i] {
                continue;
            }
            let di: f64 = prob.row(i).iter().zip(delta.iter()).map(|(a, b)| a * b).sum();
            if di == 0.0 {
                continue;
            }
            let wi = prob.weights[i];
            if r[i].abs() <= tie {
                // Starts on the kink: take the pre-crossing side, then cross at t = 0.
                let psi_before = if di > 0.0 { hi } else { lo };
                slope -= wi * di * psi_before;
                breaks.push((0.0, 2.0 * wi * di.abs(), i));
                continue;
            }
            let psi = if r[i] > 0.0 { hi } else { lo };
            slope -= wi * di * psi;
            let t = r[i] / di;
            if t > 0.0 {
                breaks.push((t, 2.0 * wi * di.abs(), i));
            }
        }
        if slope >= 0.0 {
            return None;
        }
        breaks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        let mut entering = None;
        for &(t, jump, i) in &breaks {
            slope += jump;
            if slope >= 0.0 {
                entering = Some((t, i));
                break;
            }
        }
        let (t, k) = entering?;
        for (gl, dl) in gamma.iter_mut().zip(delta.iter()) {
            *gl += t * dl;
        }
        in_basis[bj] = false;
        in_basis[k] = true;
        basis[j] = k;
        // Re-anchor on the new basis to avoid drift.
        let yb = DVector::from_iterator(n, basis.iter().map(|&i| prob.y[i]));
        gamma = basis_matrix(&basis).lu().solve(&yb)?.iter().copied().collect();
    }
    None
}

fn solve_lq(prob: &LocalProblem, q: f64, loss: &LossModel, s: &SolverSettings) -> Result<ScaledSolution> {
    let mut gamma = least_squares(prob)?;
    let mut trace = s.record_trace.then(|| vec![prob.objective(loss, &gamma)]);
    let scale = mad(&prob.residuals(&gamma)).max(1e-12);
    let mut iterations = 0;
    let mut converged = false;
    let mut c = vec![0.0; prob.len()];
    if q >= 2.0 {
        // Damped Newton on the smooth convex objective.
        while iterations < s.max_iter {
            iterations += 1;
            let r = prob.residuals(&gamma);
            let mut grad = DVector::<f64>::zeros(prob.n_basis);
            for i in 0..prob.len() {
                c[i] = prob.weights[i] * q * (q - 1.0) * r[i].abs().powf(q - 2.0).max(1e-12);
                let row = prob.row(i);
                let gi = prob.weights[i] * loss.phi(r[i]);
                for l in 0..prob.n_basis {
                    grad[l] += gi * row[l];
                }
            }
            let zeros = vec![0.0; prob.len()];
            let (hess, _) = prob.normal_equations(&c, &zeros);
            let Some(step) = solve_spd(hess, &grad) else { break };
            let f0 = prob.objective(loss, &gamma);
            let mut t = 1.0;
            let mut next: Vec<f64> = gamma.iter().zip(step.iter()).map(|(g, d)| g + d).collect();
            while prob.objective(loss, &next) > f0 && t > 1e-10 {
                t *= 0.5;
                next = gamma.iter().zip(step.iter()).map(|(g, d)| g + t * d).collect();
            }
            let change = sup_diff(&next, &gamma);
            gamma = next;
            if let Some(tr) = trace.as_mut() {
                tr.push(prob.objective(loss, &gamma));
            }
            if change < s.gradient_tol {
                converged = true;
                break;
            }
        }
    } else {
        let mut eps = s.eps_start_factor * scale;
        loop {
            let final_stage = eps <= s.eps_final;
            let inner_cap = if final_stage { s.max_iter } else { 8 };
            let mut inner = 0;
            converged = false;
            while inner < inner_cap && iterations < s.max_iter {
                inner += 1;
                iterations += 1;
                for i in 0..prob.len() {
                    let r = prob.y[i] - prob.fitted(&gamma, i);
                    c[i] = prob.weights[i] * (r * r + eps * eps).powf(0.5 * q - 1.0);
                }
                let (a, b) = prob.normal_equations(&c, &prob.y);
                let Some(next) = solve_spd(a, &b) else { break };
                let next: Vec<f64> = next.iter().copied().collect();
                let change = sup_diff(&next, &gamma);
                gamma = next;
                if let Some(tr) = trace.as_mut() {
                    tr.push(prob.objective(loss, &gamma));
                }
                if change < s.gradient_tol.max(1e-3 * eps) {
                    converged = true;
                    break;
                }
            }
            if final_stage || iterations >= s.max_iter {
                break;
            }
            eps = (0.5 * eps).max(s.eps_final);
        }
    }
    Ok(ScaledSolution {
        gamma,
        iterations,
        converged,
        verified: converged,
        non_unique: false,
        trace,
    })
}

pub(crate) fn solve_local(prob: &LocalProblem, cfg: &FitConfig) -> Result<ScaledSolution> {
    let found = prob.len();
    if found < cfg.min_local_points {
        return Err(Error::InsufficientLocalData {
            found,
            required: cfg.min_local_points,
        });
    }
    let rank = prob.rank();
    if rank < prob.n_basis {
        return Err(Error::SingularDesign {
            rank,
            size: prob.n_basis,
        });
    }
    match cfg.loss {
        LossModel::Squared => solve_squared(prob),
        LossModel::Huber { k } => solve_huber(prob, k, &cfg.loss, &cfg.solver),
        LossModel::Quantile { q } => solve_check_loss(prob, q, &cfg.loss, &cfg.solver),
        LossModel::Lq { q } => solve_lq(prob, q, &cfg.loss, &cfg.solver),
    }
}

/// Minimizes the local objective at `x`.
pub fn fit_point(data: &Dataset, x: &[f64], cfg: &FitConfig) -> Result<FitResult> {
    if x.len() != data.dim() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!("evaluation point {x:?} is invalid for dimension {}", data.dim())));
    }
    let prob = LocalProblem::build(data, x, cfg);
    let sol = solve_local(&prob, cfg)?;
    let hs = cfg.h_scaling();
    let raw = hs.apply_inverse(&sol.gamma);
    let beta_hat = cfg.w_scaling().apply(&raw);
    Ok(FitResult {
        m_hat: beta_hat[0],
        beta_hat,
        raw,
        objective: prob.objective(&cfg.loss, &sol.gamma),
        iterations: sol.iterations,
        local_count: prob.len(),
        converged: sol.converged,
        optimality_verified: sol.verified,
        non_unique: sol.non_unique,
        trace: sol.trace,
    })
}

/// One grid point and its (possibly failed) fit.
#[derive(Debug, Clone)]
pub struct GridFit {
    pub point: Vec<f64>,
    pub result: Result<FitResult>,
}

/// Independent fits at every grid point; failures are kept per point.
pub fn fit_grid(data: &Dataset, grid: &[Vec<f64>], cfg: &FitConfig) -> Vec<GridFit> {
    grid.par_iter()
        .map(|x| GridFit {
            point: x.clone(),
            result: fit_point(data, x, cfg),
        })
        .collect()
}

/// Exact local objective at raw coefficients `beta`.
pub fn objective_value(data: &Dataset, x: &[f64], cfg: &FitConfig, beta: &[f64]) -> f64 {
    let d = data.dim();
    let mut z = vec![0.0; d];
    let mut u = vec![0.0; d];
    let mut mu = vec![0.0; cfg.layout.len()];
    let mut total = 0.0;
    for i in 0..data.len() {
        let row = data.row(i);
        for k in 0..d {
            z[k] = row[k] - x[k];
            u[k] = z[k] / cfg.bandwidths[k];
        }
        let w = cfg.kernel.eval(&u);
        if w == 0.0 {
            continue;
        }
        cfg.layout.mu_into(&z, &mut mu);
        let fit: f64 = mu.iter().zip(beta).map(|(a, b)| a * b).sum();
        total += w * cfg.loss.rho(data.y[i] - fit);
    }
    total
}

/// `[lo, hi]` split into `count` equally spaced points.
pub fn uniform_grid_1d(lo: f64, hi: f64, count: usize) -> Vec<Vec<f64>> {
    if count == 1 {
        return vec![vec![0.5 * (lo + hi)]];
    }
    (0..count)
        .map(|k| vec![lo + (hi - lo) * k as f64 / (count - 1) as f64])
        .collect()
}
