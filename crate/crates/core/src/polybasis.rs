//! Multi-index bookkeeping for the multivariate polynomial basis.
//!
//! Within a degree block the indices are ordered lexicographically with the
//! highest priority on the last coordinate, so the block of degree `i` runs
//! from `(0, …, 0, i)` to `(i, 0, …, 0)`. Blocks are concatenated by degree.
//! Positions are 0-based; [`BasisLayout::position_one_based`] gives the
//! 1-based view used in the literature.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported basis size.
pub const MAX_BASIS_SIZE: usize = 10_000;
/// Largest supported polynomial degree.
pub const MAX_DEGREE: usize = 10;

/// A multi-index `r = (r_1, …, r_d)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(entries: Vec<u32>) -> Self {
        Self(entries)
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0; d])
    }

    /// Unit index `e_k` in dimension `d`.
    pub fn unit(d: usize, k: usize) -> Self {
        let mut v = vec![0; d];
        v[k] = 1;
        Self(v)
    }

    pub fn entries(&self) -> &[u32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Total order `|r|`.
    pub fn order(&self) -> u32 {
        self.0.iter().sum()
    }

    /// `r! = r_1! ⋯ r_d!`, rejected when `|r| > 20`.
    pub fn factorial(&self) -> Result<u64> {
        let order = self.order();
        if order > 20 {
            return Err(Error::FactorialOverflow(order));
        }
        Ok(self
            .0
            .iter()
            .map(|&r| (1..=u64::from(r)).product::<u64>())
            .product())
    }

    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        debug_assert_eq!(self.dim(), other.dim());
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn has_odd_component(&self) -> bool {
        self.0.iter().any(|r| r % 2 == 1)
    }

    /// Monomial `z^r`.
    pub fn monomial(&self, z: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(z)
            .map(|(&r, &zk)| zk.powi(r as i32))
            .product()
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, r) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{r}")?;
        }
        write!(f, ")")
    }
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, j| acc * (n - j) / (j + 1))
}

/// Number of multi-indices of order `i` in dimension `d`, `C(i+d-1, d-1)`.
pub fn degree_count(d: usize, i: usize) -> usize {
    binomial(i + d - 1, d - 1)
}

/// All multi-indices of order `i` in dimension `d`, last coordinate decreasing first.
pub fn enumerate_degree(d: usize, i: usize) -> Vec<MultiIndex> {
    assert!(d >= 1, "dimension must be at least 1");
    let mut out = Vec::with_capacity(degree_count(d, i));
    let mut buf = vec![0u32; d];
    fill_degree(&mut buf, d, i as u32, &mut out);
    out
}

// Fixes coordinates from the last one down; the last coordinate takes the
// largest values first.
fn fill_degree(buf: &mut [u32], free: usize, remaining: u32, out: &mut Vec<MultiIndex>) {
    if free == 1 {
        buf[0] = remaining;
        out.push(MultiIndex(buf.to_vec()));
        return;
    }
    for last in (0..=remaining).rev() {
        buf[free - 1] = last;
        fill_degree(buf, free - 1, remaining - last, out);
    }
}

/// Concatenated degree-ordered basis of total degree `p` in dimension `d`.
#[derive(Debug, Clone)]
pub struct BasisLayout {
    d: usize,
    p: usize,
    counts: Vec<usize>,
    order: Vec<MultiIndex>,
    position: HashMap<MultiIndex, usize>,
    offsets: Vec<usize>,
}

impl PartialEq for BasisLayout {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d && self.p == other.p
    }
}

impl BasisLayout {
    pub fn new(d: usize, p: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidConfig("dimension must be at least 1".into()));
        }
        if p > MAX_DEGREE {
            return Err(Error::InvalidConfig(format!(
                "degree {p} exceeds the supported maximum {MAX_DEGREE}"
            )));
        }
        // C(p+d, d) computed incrementally to avoid overflow on silly inputs.
        let mut total = 0usize;
        for i in 0..=p {
            total = total.saturating_add(degree_count(d, i));
            if total > MAX_BASIS_SIZE {
                return Err(Error::BasisTooLarge {
                    size: total,
                    limit: MAX_BASIS_SIZE,
                });
            }
        }
        let counts: Vec<usize> = (0..=p).map(|i| degree_count(d, i)).collect();
        let mut offsets = Vec::with_capacity(p + 2);
        let mut acc = 0;
        for &c in &counts {
            offsets.push(acc);
            acc += c;
        }
        offsets.push(acc);
        let order: Vec<MultiIndex> = (0..=p).flat_map(|i| enumerate_degree(d, i)).collect();
        let position = order
            .iter()
            .enumerate()
            .map(|(k, r)| (r.clone(), k))
            .collect();
        Ok(Self {
            d,
            p,
            counts,
            order,
            position,
            offsets,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn degree(&self) -> usize {
        self.p
    }

    /// `N_0, …, N_p`.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// `N = C(p+d, d)`.
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[MultiIndex] {
        &self.order
    }

    /// Index range of the degree-`i` block.
    pub fn block(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// 0-based position of `r`, if it belongs to the basis.
    pub fn position(&self, r: &MultiIndex) -> Option<usize> {
        self.position.get(r).copied()
    }

    /// 1-based position `N(r)`.
    pub fn position_one_based(&self, r: &MultiIndex) -> Option<usize> {
        self.position(r).map(|k| k + 1)
    }

    /// Design vector `μ(z)`: entry `k` is `z^{order[k]}`.
    pub fn mu_vector(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.mu_into(z, &mut out);
        out
    }

    /// Writes `μ(z)` into `out` without allocating (power tables are built on the stack for small `p`).
    pub fn mu_into(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.d);
        debug_assert_eq!(out.len(), self.len());
        let stride = self.p + 1;
        let mut powers = [0.0f64; 64];
        let mut heap;
        let table: &mut [f64] = if self.d * stride <= powers.len() {
            &mut powers[..self.d * stride]
        } else {
            heap = vec![0.0; self.d * stride];
            &mut heap
        };
        for (k, &zk) in z.iter().enumerate() {
            let row = &mut table[k * stride..(k + 1) * stride];
            row[0] = 1.0;
            for e in 1..stride {
                row[e] = row[e - 1] * zk;
            }
        }
        for (slot, r) in out.iter_mut().zip(&self.order) {
            *slot = r
                .entries()
                .iter()
                .enumerate()
                .map(|(k, &e)| table[k * stride + e as usize])
                .product();
        }
    }

    /// Parity of `p - |r|` for the basis element at `k`.
    pub fn is_odd_branch(&self, k: usize) -> bool {
        (self.p as u32 + self.order[k].order()) % 2 == 1
    }
}

/// Which diagonal scaling a [`DiagonalScaling`] represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingKind {
    /// `W_p`, entries `r!`.
    Factorial,
    /// `H_n`, entries `h^{|r|}` (or `∏ h_k^{r_k}` for per-coordinate bandwidths).
    Bandwidth,
}

/// Diagonal matrix stored as its diagonal, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalScaling {
    kind: ScalingKind,
    diag: Vec<f64>,
}

impl DiagonalScaling {
    pub fn factorial(layout: &BasisLayout) -> Self {
        let diag = layout
            .order()
            .iter()
            .map(|r| r.factorial().expect("degree <= 10 keeps |r| <= 20") as f64)
            .collect();
        Self {
            kind: ScalingKind::Factorial,
            diag,
        }
    }

    pub fn bandwidth(layout: &BasisLayout, h: f64) -> Self {
        Self::bandwidths(layout, &vec![h; layout.dim()])
    }

    /// Per-coordinate bandwidths `(h_1, …, h_d)`.
    pub fn bandwidths(layout: &BasisLayout, h: &[f64]) -> Self {
        assert_eq!(h.len(), layout.dim());
        let diag = layout.order().iter().map(|r| r.monomial(h)).collect();
        Self {
            kind: ScalingKind::Bandwidth,
            diag,
        }
    }

    pub fn kind(&self) -> ScalingKind {
        self.kind
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.diag).map(|(a, s)| a * s).collect()
    }

    pub fn apply_inverse(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.diag).map(|(a, s)| a / s).collect()
    }
}
