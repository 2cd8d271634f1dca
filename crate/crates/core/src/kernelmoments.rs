//! Product kernels on `[-1, 1]^d` and the kernel-moment matrices built from them.
//!
//! Every shipped 1-D profile is a polynomial on its support, so moments of
//! `K` and `K²` are available in closed form. Tensor Gauss–Legendre
//! quadrature is used for integrands that involve a density, and as an
//! independent route for the closed forms.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polybasis::{enumerate_degree, BasisLayout, MultiIndex};
use crate::quadrature::{TensorRule, DEFAULT_ORDER};

/// Condition-number threshold above which a moment matrix is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Epanechnikov,
    Biweight,
    Uniform,
}

impl KernelFamily {
    /// Coefficients of the 1-D profile as a polynomial in `u` on `[-1, 1]`.
    fn profile(self) -> &'static [f64] {
        match self {
            KernelFamily::Epanechnikov => &[0.75, 0.0, -0.75],
            KernelFamily::Biweight => &[15.0 / 16.0, 0.0, -30.0 / 16.0, 0.0, 15.0 / 16.0],
            KernelFamily::Uniform => &[0.5],
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            KernelFamily::Epanechnikov => "epanechnikov",
            KernelFamily::Biweight => "biweight",
            KernelFamily::Uniform => "uniform",
        };
        f.write_str(s)
    }
}

/// Integration domain for the `K_2` vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentDomain {
    /// The kernel support `[-1, 1]^d`.
    #[default]
    FullSupport,
    /// The unit cube `[0, 1]^d`.
    UnitCube,
}

impl MomentDomain {
    fn bounds(self) -> (f64, f64) {
        match self {
            MomentDomain::FullSupport => (-1.0, 1.0),
            MomentDomain::UnitCube => (0.0, 1.0),
        }
    }
}

/// Symmetric product kernel `K(u) = ∏ k(u_j)` supported on `[-1, 1]^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Kernel {
    pub family: KernelFamily,
    pub dim: usize,
}

fn poly_integral(coeffs: &[f64], power: u32, a: f64, b: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .filter(|(_, c)| **c != 0.0)
        .map(|(j, c)| {
            let e = power as i32 + j as i32 + 1;
            c * (b.powi(e) - a.powi(e)) / e as f64
        })
        .sum()
}

fn poly_square(coeffs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; 2 * coeffs.len() - 1];
    for (i, a) in coeffs.iter().enumerate() {
        for (j, b) in coeffs.iter().enumerate() {
            out[i + j] += a * b;
        }
    }
    out
}

impl Kernel {
    pub fn new(family: KernelFamily, dim: usize) -> Self {
        Self { family, dim }
    }

    /// 1-D profile `k(t)`.
    pub fn profile(&self, t: f64) -> f64 {
        if t.abs() > 1.0 {
            return 0.0;
        }
        let c = self.family.profile();
        c.iter().rev().fold(0.0, |acc, &ck| acc * t + ck)
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        let mut k = 1.0;
        for &t in u {
            if t.abs() > 1.0 {
                return 0.0;
            }
            k *= self.profile(t);
        }
        k
    }

    /// `∫_a^b k(t) t^power dt` in closed form.
    pub fn moment_1d(&self, power: u32, domain: MomentDomain) -> f64 {
        let (a, b) = domain.bounds();
        poly_integral(self.family.profile(), power, a, b)
    }

    /// `∫ k(t)² t^power dt` over `[-1, 1]`.
    pub fn squared_moment_1d(&self, power: u32) -> f64 {
        poly_integral(&poly_square(self.family.profile()), power, -1.0, 1.0)
    }

    /// `ν_i = ∫ K(u) u^i du` as a product of 1-D closed forms.
    pub fn moment(&self, i: &MultiIndex) -> f64 {
        self.moment_on(i, MomentDomain::FullSupport)
    }

    pub fn moment_on(&self, i: &MultiIndex, domain: MomentDomain) -> f64 {
        debug_assert_eq!(i.dim(), self.dim);
        i.entries().iter().map(|&e| self.moment_1d(e, domain)).product()
    }

    /// `ν_i` by tensor Gauss–Legendre quadrature of order [`DEFAULT_ORDER`] per dimension.
    pub fn moment_by_quadrature(&self, i: &MultiIndex) -> f64 {
        TensorRule::new(self.dim, DEFAULT_ORDER).integrate(|u| self.eval(u) * i.monomial(u))
    }

    pub fn squared_moment(&self, i: &MultiIndex) -> f64 {
        i.entries().iter().map(|&e| self.squared_moment_1d(e)).product()
    }
}

/// `ν_i = ∫ K(u) u^i du`.
pub fn kernel_moment(kernel: &Kernel, i: &MultiIndex) -> f64 {
    kernel.moment(i)
}

type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Covariate density `f`, influence slope `g`, and the gradient of `f·g`.
#[derive(Clone)]
pub struct LocalDensityModel {
    f: ScalarField,
    g: ScalarField,
    grad_fg: VectorField,
}

impl fmt::Debug for LocalDensityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LocalDensityModel").finish_non_exhaustive()
    }
}

impl LocalDensityModel {
    pub fn new<F, G, D>(f: F, g: G, grad_fg: D) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        D: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            f: Arc::new(f),
            g: Arc::new(g),
            grad_fg: Arc::new(grad_fg),
        }
    }

    /// `f ≡ f0`, `g ≡ g0` on all of `R^d`.
    pub fn constant(d: usize, f0: f64, g0: f64) -> Self {
        Self::new(move |_| f0, move |_| g0, move |_| vec![0.0; d])
    }

    pub fn f(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    pub fn g(&self, x: &[f64]) -> f64 {
        (self.g)(x)
    }

    pub fn fg(&self, x: &[f64]) -> f64 {
        (self.f)(x) * (self.g)(x)
    }

    pub fn grad_fg(&self, x: &[f64]) -> Vec<f64> {
        (self.grad_fg)(x)
    }

    /// Verifies `f > 0` and `g > 0` at the supplied points.
    pub fn check_positive(&self, points: &[Vec<f64>]) -> Result<()> {
        for x in points {
            let (f, g) = (self.f(x), self.g(x));
            if !(f > 0.0 && g > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "density model not positive at {x:?}: f = {f}, g = {g}"
                )));
            }
        }
        Ok(())
    }
}

/// Moment matrix together with its spectral condition number.
#[derive(Debug, Clone)]
pub struct MomentMatrix {
    pub matrix: DMatrix<f64>,
    pub condition: f64,
    pub min_eigenvalue: f64,
}

impl MomentMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        let eig = matrix.clone().symmetric_eigen();
        let min = eig.eigenvalues.min();
        let max = eig.eigenvalues.max();
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        Self {
            matrix,
            condition,
            min_eigenvalue: min,
        }
    }

    pub fn is_singular(&self) -> bool {
        !(self.condition <= SINGULAR_CONDITION) || self.min_eigenvalue <= 0.0
    }

    /// Inverse via Cholesky; with `jitter`, `1e-10·trace/N` is added to the diagonal first.
    pub fn inverse(&self, jitter: bool) -> Result<DMatrix<f64>> {
        let n = self.matrix.nrows();
        let mut m = self.matrix.clone();
        if jitter {
            let eps = 1e-10 * m.trace() / n as f64;
            for k in 0..n {
                m[(k, k)] += eps;
            }
        } else if self.is_singular() {
            return Err(Error::SingularSnp {
                condition: self.condition,
            });
        }
        m.cholesky()
            .map(|c| c.inverse())
            .ok_or(Error::SingularSnp {
                condition: self.condition,
            })
    }
}

/// Kernel-moment tables for a basis layout.
#[derive(Debug, Clone)]
pub struct MomentTables {
    pub kernel: Kernel,
    pub layout: BasisLayout,
    /// Degree `p+1` and `p+2` blocks (`τ_{p+1}`, `τ_{p+2}`).
    pub next_blocks: [Vec<MultiIndex>; 2],
    pub sp: MomentMatrix,
    pub sp_inv: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub squared_kernel_matrix: DMatrix<f64>,
    nu: HashMap<MultiIndex, f64>,
}

impl MomentTables {
    pub fn new(kernel: Kernel, layout: &BasisLayout) -> Result<Self> {
        if kernel.dim != layout.dim() {
            return Err(Error::InvalidConfig(format!(
                "kernel dimension {} does not match basis dimension {}",
                kernel.dim,
                layout.dim()
            )));
        }
        let d = layout.dim();
        let p = layout.degree();
        let mut nu = HashMap::new();
        for order in 0..=(2 * p + 2) {
            for i in enumerate_degree(d, order) {
                let v = kernel.moment(&i);
                nu.insert(i, v);
            }
        }
        let next_blocks = [enumerate_degree(d, p + 1), enumerate_degree(d, p + 2)];
        let sp = MomentMatrix::new(build_sp(&kernel, layout));
        let sp_inv = sp.inverse(false)?;
        let (b1, b2) = build_b1_b2(&kernel, layout);
        let order = layout.order();
        let squared_kernel_matrix = DMatrix::from_fn(order.len(), order.len(), |l, m| {
            kernel.squared_moment(&order[l].add(&order[m]))
        });
        Ok(Self {
            kernel,
            layout: layout.clone(),
            next_blocks,
            sp,
            sp_inv,
            b1,
            b2,
            squared_kernel_matrix,
            nu,
        })
    }

    pub fn nu(&self, i: &MultiIndex) -> f64 {
        self.nu
            .get(i)
            .copied()
            .unwrap_or_else(|| self.kernel.moment(i))
    }

    /// `K_2 = ∫ K(v) μ(v) dv` over the chosen domain.
    pub fn k2(&self, domain: MomentDomain) -> DVector<f64> {
        build_k2(&self.kernel, &self.layout, domain)
    }
}

/// `S_p` with `[S_{j,k}]_{l,m} = ν_{τ_j(l)+τ_k(m)}`.
pub fn build_sp(kernel: &Kernel, layout: &BasisLayout) -> DMatrix<f64> {
    let order = layout.order();
    DMatrix::from_fn(order.len(), order.len(), |l, m| {
        kernel.moment(&order[l].add(&order[m]))
    })
}

/// Stacked blocks `B_1 = [S_{j,p+1}]_j` and `B_2 = [S_{j,p+2}]_j`.
pub fn build_b1_b2(kernel: &Kernel, layout: &BasisLayout) -> (DMatrix<f64>, DMatrix<f64>) {
    let order = layout.order();
    let d = layout.dim();
    let p = layout.degree();
    let build = |block: Vec<MultiIndex>| {
        DMatrix::from_fn(order.len(), block.len(), |l, m| {
            kernel.moment(&order[l].add(&block[m]))
        })
    };
    (
        build(enumerate_degree(d, p + 1)),
        build(enumerate_degree(d, p + 2)),
    )
}

/// `S_{n,p}(x)` by tensor Gauss–Legendre quadrature of `K(u) μ(u) μ(u)ᵀ (g f)(x + H u)`.
pub fn build_snp(
    x: &[f64],
    bandwidths: &[f64],
    density: &LocalDensityModel,
    kernel: &Kernel,
    layout: &BasisLayout,
) -> MomentMatrix {
    let d = layout.dim();
    let n = layout.len();
    let rule = TensorRule::new(d, DEFAULT_ORDER);
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut mu = vec![0.0; n];
    let mut z = vec![0.0; d];
    for (u, &w) in rule.points.iter().zip(&rule.weights) {
        for k in 0..d {
            z[k] = x[k] + bandwidths[k] * u[k];
        }
        let c = w * kernel.eval(u) * density.fg(&z);
        if c == 0.0 {
            continue;
        }
        layout.mu_into(u, &mut mu);
        for l in 0..n {
            let cl = c * mu[l];
            for k in l..n {
                m[(l, k)] += cl * mu[k];
            }
        }
    }
    for l in 0..n {
        for k in 0..l {
            m[(l, k)] = m[(k, l)];
        }
    }
    MomentMatrix::new(m)
}

/// `N_p(x)` (N×N) and `M̃(x)` (N×N_{p+1}); `gradient` is `∇(f g)(x)`.
pub fn build_np_mtilde(tables: &MomentTables, gradient: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let order = tables.layout.order();
    let d = tables.layout.dim();
    let entry = |a: &MultiIndex, b: &MultiIndex| -> f64 {
        let base = a.add(b);
        (0..d)
            .filter(|&i| gradient[i] != 0.0)
            .map(|i| gradient[i] * tables.nu(&base.add(&MultiIndex::unit(d, i))))
            .sum()
    };
    let np = DMatrix::from_fn(order.len(), order.len(), |l, m| entry(&order[l], &order[m]));
    let next = &tables.next_blocks[0];
    let mt = DMatrix::from_fn(order.len(), next.len(), |l, m| entry(&order[l], &next[m]));
    (np, mt)
}

/// Outcome of the even-parity vanishing check on `S_p^{-1} B_1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VanishingReport {
    pub max_violation: f64,
    pub rows_checked: usize,
    pub entries_checked: usize,
}

/// Largest `|Σ_r [S_p^{-1}]_{N(r₁),N(r)} ν_{r+r₂}|` over rows with `p − |r₁|` even and `|r₂| = p+1`.
pub fn check_even_order_vanishing(tables: &MomentTables) -> VanishingReport {
    let layout = &tables.layout;
    let order = layout.order();
    let next = &tables.next_blocks[0];
    let mut max_violation: f64 = 0.0;
    let mut rows = 0;
    let mut entries = 0;
    for (k1, _) in order.iter().enumerate() {
        if layout.is_odd_branch(k1) {
            continue;
        }
        rows += 1;
        for r2 in next {
            let s: f64 = order
                .iter()
                .enumerate()
                .map(|(k, r)| tables.sp_inv[(k1, k)] * tables.nu(&r.add(r2)))
                .sum();
            max_violation = max_violation.max(s.abs());
            entries += 1;
        }
    }
    VanishingReport {
        max_violation,
        rows_checked: rows,
        entries_checked: entries,
    }
}

/// `K_2 = ∫ K(v) μ(v) dv` over `domain`.
pub fn build_k2(kernel: &Kernel, layout: &BasisLayout, domain: MomentDomain) -> DVector<f64> {
    DVector::from_iterator(
        layout.len(),
        layout.order().iter().map(|r| kernel.moment_on(r, domain)),
    )
}
