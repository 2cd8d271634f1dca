//! Shared fixtures for the benchmarks.

use std::f64::consts::PI;

use lpmreg::dgp::{simulate, Component, RegressionFunction};
use lpmreg::{BasisLayout, Dataset, DgpSpec, ErrorLaw, FitConfig, Kernel, KernelFamily, LossModel};

/// `sin(2πx)` plus N(0, 1) noise on `[0, 1]^d`, errors centered for `loss`.
pub fn sample(n: usize, d: usize, loss: LossModel) -> Dataset {
    let mut components = vec![Component::Sin {
        amplitude: 1.0,
        omega: 2.0 * PI,
        phase: 0.0,
    }];
    components.resize(d, Component::Zero);
    let spec = DgpSpec::iid(
        RegressionFunction {
            constant: 0.0,
            components,
        },
        ErrorLaw::gaussian(1.0),
        loss,
    );
    simulate(&spec, n).expect("valid fixture").dataset
}

pub fn config(d: usize, p: usize, h: f64, loss: LossModel) -> FitConfig {
    FitConfig::new(
        BasisLayout::new(d, p).expect("small basis"),
        Kernel::new(KernelFamily::Epanechnikov, d),
        h,
        loss,
    )
    .expect("valid fixture")
}

pub const LOSSES: [(&str, LossModel); 4] = [
    ("squared", LossModel::Squared),
    ("huber", LossModel::Huber { k: 1.345 }),
    ("quantile", LossModel::Quantile { q: 0.5 }),
    ("lq", LossModel::Lq { q: 1.5 }),
];
