//! Acceptance suite. Each test prints one `[PASS]`/`[FAIL]` line to stderr and
//! asserts the same condition. Reference values are recomputed here from closed
//! forms and brute force, independently of the library code paths under test.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use lpmreg::bahadur::{BahadurContext, SnpMode};
use lpmreg::dgp::{stream_rng, Component, RegressionFunction};
use lpmreg::experiments::{self, ExperimentReport, Study};
use lpmreg::kernelmoments::check_even_order_vanishing;
use lpmreg::{
    fit_point, BasisLayout, Dataset, DgpSpec, ErrorLaw, FitConfig, Kernel, KernelFamily, LossModel, MomentTables,
    MultiIndex, SampleKind,
};
use lpmreg_cli::config::load_experiment;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Writes to the process stderr directly so the line survives test output capture.
fn verdict(name: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let line = format!("[{tag}] {name}: {detail}\n");
    match std::fs::OpenOptions::new().append(true).open("/dev/stderr") {
        Ok(mut f) => {
            let _ = f.write_all(line.as_bytes());
        }
        Err(_) => eprint!("{line}"),
    }
    assert!(pass, "{name}: {detail}");
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn binomial(n: u64, k: u64) -> u64 {
    (1..=k).fold(1, |acc, i| acc * (n + 1 - i) / i)
}

/// All `r` with `|r| = i`, ordered by the last coordinate first, descending.
fn degree_block(d: usize, i: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; d];
    fn rec(k: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if k + 1 == cur.len() {
            cur[k] = left;
            out.push(cur.clone());
            return;
        }
        for v in 0..=left {
            cur[k] = v;
            rec(k + 1, left - v, cur, out);
        }
    }
    rec(0, i, &mut cur, &mut out);
    out.sort_by(|a, b| b.iter().rev().cmp(a.iter().rev()));
    out
}

fn basis(d: usize, p: u32) -> Vec<Vec<u32>> {
    (0..=p).flat_map(|i| degree_block(d, i)).collect()
}

/// `∫_{-1}^{1} ¾(1 − t²) tᵏ dt`.
fn epan_moment_1d(k: u32) -> f64 {
    if k % 2 == 1 {
        0.0
    } else {
        0.75 * (2.0 / (k as f64 + 1.0) - 2.0 / (k as f64 + 3.0))
    }
}

/// Same over `[0, 1]`.
fn epan_moment_1d_half(k: u32) -> f64 {
    0.75 * (1.0 / (k as f64 + 1.0) - 1.0 / (k as f64 + 3.0))
}

fn epan_moment(r: &[u32]) -> f64 {
    r.iter().map(|&k| epan_moment_1d(k)).product()
}

fn epan(u: &[f64]) -> f64 {
    u.iter().map(|&t| if t.abs() <= 1.0 { 0.75 * (1.0 - t * t) } else { 0.0 }).product()
}

fn add(a: &[u32], b: &[u32]) -> Vec<u32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn monomial(r: &[u32], z: &[f64]) -> f64 {
    r.iter().zip(z).map(|(&e, &v)| v.powi(e as i32)).product()
}

fn sp_matrix(b: &[Vec<u32>]) -> DMatrix<f64> {
    DMatrix::from_fn(b.len(), b.len(), |i, j| epan_moment(&add(&b[i], &b[j])))
}

#[test]
fn basis_combinatorics() {
    let start = Instant::now();
    let mut mismatches = Vec::new();
    for d in 1..=4 {
        for p in 0..=4u32 {
            let layout = BasisLayout::new(d, p as usize).unwrap();
            if layout.len() as u64 != binomial(p as u64 + d as u64, d as u64) {
                mismatches.push(format!("size d={d} p={p}"));
            }
            let expected = basis(d, p);
            let got: Vec<Vec<u32>> = layout.order().iter().map(|r| r.entries().to_vec()).collect();
            if got != expected {
                mismatches.push(format!("order d={d} p={p}"));
            }
            for i in 0..=p {
                let block = &layout.order()[layout.block(i as usize)];
                let mut first = vec![0; d];
                first[d - 1] = i;
                if block[0].entries() != first.as_slice() {
                    mismatches.push(format!("first element d={d} p={p} i={i}"));
                }
            }
        }
    }
    let t = start.elapsed().as_secs_f64();
    verdict(
        "basis combinatorics",
        mismatches.is_empty() && t < 1.0,
        format!("20 (d, p) pairs, mismatches {mismatches:?}, {t:.3} s"),
    );
}

#[test]
fn kernel_moments_and_sp() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    let mut asym: f64 = 0.0;
    for d in 1..=3 {
        let kernel = Kernel::new(KernelFamily::Epanechnikov, d);
        for p in 0..=3u32 {
            let b = basis(d, p);
            for r in &b {
                for s in &b {
                    let rs = add(r, s);
                    let idx = MultiIndex::new(rs.clone());
                    let exact = epan_moment(&rs);
                    worst = worst.max((kernel.moment_by_quadrature(&idx) - exact).abs());
                    worst = worst.max((kernel.moment(&idx) - exact).abs());
                }
            }
            let tables = MomentTables::new(kernel, &BasisLayout::new(d, p as usize).unwrap()).unwrap();
            let sp = &tables.sp.matrix;
            asym = asym.max((sp - sp.transpose()).abs().max());
            let diff = (sp - sp_matrix(&b)).abs().max();
            worst = worst.max(diff);
            let eig = sp_matrix(&b).symmetric_eigen().eigenvalues.min();
            min_eig = min_eig.min(eig);
            assert!(sp.clone().cholesky().is_some(), "S_p not positive definite at d={d} p={p}");
        }
    }
    let t = start.elapsed().as_secs_f64();
    verdict(
        "kernel moments",
        worst < 1e-12 && asym == 0.0 && min_eig > 0.0 && t < 5.0,
        format!("max moment gap {worst:.2e} (< 1e-12), S_p asymmetry {asym:.1e}, min eigenvalue {min_eig:.3e}, {t:.2} s"),
    );
}

#[test]
fn even_parity_cofactor_identity() {
    let start = Instant::now();
    let mut oracle: f64 = 0.0;
    let mut library: f64 = 0.0;
    let mut rows = 0;
    for d in 1..=3 {
        for p in 0..=3u32 {
            let b = basis(d, p);
            let inv = sp_matrix(&b).try_inverse().unwrap();
            let next = degree_block(d, p + 1);
            for (k1, r1) in b.iter().enumerate() {
                if (p - r1.iter().sum::<u32>()) % 2 == 1 {
                    continue;
                }
                rows += 1;
                for r2 in &next {
                    let s: f64 = b.iter().enumerate().map(|(k, r)| inv[(k1, k)] * epan_moment(&add(r, r2))).sum();
                    oracle = oracle.max(s.abs());
                }
            }
            let kernel = Kernel::new(KernelFamily::Epanechnikov, d);
            let tables = MomentTables::new(kernel, &BasisLayout::new(d, p as usize).unwrap()).unwrap();
            library = library.max(check_even_order_vanishing(&tables).max_violation);
        }
    }
    let t = start.elapsed().as_secs_f64();
    verdict(
        "even-parity cofactor identity",
        oracle < 1e-10 && library < 1e-10 && t < 5.0,
        format!("{rows} rows, max violation {oracle:.2e} (direct) / {library:.2e} (library), limit 1e-10, {t:.2} s"),
    );
}

/// `m(x) = (x₁³ − ¼) + (x₂² − ⅓)` and its partial derivatives.
fn cubic_square(d: usize) -> (RegressionFunction, impl Fn(&[u32], &[f64]) -> f64) {
    let mut components = vec![Component::Poly { coeffs: vec![-0.25, 0.0, 0.0, 1.0] }];
    if d == 2 {
        components.push(Component::Poly { coeffs: vec![-1.0 / 3.0, 0.0, 1.0] });
    }
    let deriv = |r: &[u32], x: &[f64]| -> f64 {
        let active: Vec<usize> = (0..r.len()).filter(|&k| r[k] > 0).collect();
        let cubic = |e: u32, t: f64| match e {
            0 => t.powi(3) - 0.25,
            1 => 3.0 * t * t,
            2 => 6.0 * t,
            3 => 6.0,
            _ => 0.0,
        };
        let square = |e: u32, t: f64| match e {
            0 => t * t - 1.0 / 3.0,
            1 => 2.0 * t,
            2 => 2.0,
            _ => 0.0,
        };
        let parts = |k: usize, e: u32| if k == 0 { cubic(e, x[0]) } else { square(e, x[1]) };
        match active.len() {
            0 => (0..r.len()).map(|k| parts(k, 0)).sum(),
            1 => parts(active[0], r[active[0]]),
            _ => 0.0,
        }
    };
    (
        RegressionFunction {
            constant: 0.0,
            components,
        },
        deriv,
    )
}

#[test]
fn squared_loss_bahadur_exactness() {
    let start = Instant::now();
    let (n, h) = (200, 0.5);
    let mut gap_vs_leading: f64 = 0.0;
    let mut leading_vs_direct: f64 = 0.0;
    for rep in 0..50u64 {
        let d = 1 + (rep % 2) as usize;
        let p = 1 + ((rep / 2) % 2) as u32;
        let mut rng = stream_rng(917, rep);
        let x_obs: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>()).collect();
        let (m, deriv) = cubic_square(d);
        let y: Vec<f64> = (0..n)
            .map(|i| deriv(&vec![0; d], &x_obs[i * d..(i + 1) * d]) + 2.0 * (rng.random::<f64>() - 0.5))
            .collect();
        let x: Vec<f64> = (0..d).map(|_| 0.3 + 0.4 * rng.random::<f64>()).collect();
        let data = Dataset::new(y.clone(), x_obs.clone(), d, SampleKind::Iid).unwrap();
        let spec = DgpSpec::iid(m, ErrorLaw::gaussian(1.0), LossModel::Squared);
        let cfg = FitConfig::new(
            BasisLayout::new(d, p as usize).unwrap(),
            Kernel::new(KernelFamily::Epanechnikov, d),
            h,
            LossModel::Squared,
        )
        .unwrap();
        let dec = BahadurContext::new(cfg, spec).unwrap().decompose(&data, &x, SnpMode::Empirical).unwrap();
        for (a, b) in dec.fitted_gap.iter().zip(&dec.leading_term) {
            gap_vs_leading = gap_vs_leading.max((a - b).abs());
        }

        // Weighted least squares in u = (X − x)/h, then r!·γ_r − h^|r|·Dʳm(x).
        let b = basis(d, p);
        let mut a = DMatrix::<f64>::zeros(b.len(), b.len());
        let mut rhs = DVector::<f64>::zeros(b.len());
        for i in 0..n {
            let u: Vec<f64> = (0..d).map(|k| (x_obs[i * d + k] - x[k]) / h).collect();
            let w = epan(&u);
            if w == 0.0 {
                continue;
            }
            let mu: Vec<f64> = b.iter().map(|r| monomial(r, &u)).collect();
            for j in 0..b.len() {
                rhs[j] += w * mu[j] * y[i];
                for l in 0..b.len() {
                    a[(j, l)] += w * mu[j] * mu[l];
                }
            }
        }
        let gamma = a.lu().solve(&rhs).unwrap();
        for (j, r) in b.iter().enumerate() {
            let fact: f64 = r.iter().map(|&e| (1..=e).product::<u32>() as f64).product();
            let order: u32 = r.iter().sum();
            let direct = fact * gamma[j] - h.powi(order as i32) * deriv(r, &x);
            leading_vs_direct = leading_vs_direct.max((direct - dec.leading_term[j]).abs());
        }
    }
    let t = start.elapsed().as_secs_f64();
    verdict(
        "squared-loss Bahadur exactness",
        gap_vs_leading < 1e-8 && leading_vs_direct < 1e-8 && t < 30.0,
        format!(
            "50 datasets, max |gap − leading| {gap_vs_leading:.2e}, max |leading − direct WLS| {leading_vs_direct:.2e} (< 1e-8), {t:.2} s"
        ),
    );
}

fn check_loss(q: f64, t: f64) -> f64 {
    (2.0 * q - 1.0) * t + t.abs()
}

#[test]
fn quantile_local_constant_oracle() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut windows = 0;
    let mut rep = 0u64;
    while windows < 100 {
        let mut rng = stream_rng(4242, rep);
        rep += 1;
        let n = 60;
        let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let ys: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() - 0.5) * 6.0 + rng.random::<f64>().powi(3) * 4.0).collect();
        let x = 0.3 + 0.4 * rng.random::<f64>();
        let h = 0.15 + 0.25 * rng.random::<f64>();
        let q = 0.05 + 0.9 * rng.random::<f64>();
        let w: Vec<f64> = xs.iter().map(|&v| epan(&[(v - x) / h])).collect();
        if w.iter().filter(|&&v| v > 0.0).count() < 3 {
            continue;
        }
        let data = Dataset::new(ys.clone(), xs.clone(), 1, SampleKind::Iid).unwrap();
        let cfg = FitConfig::new(
            BasisLayout::new(1, 0).unwrap(),
            Kernel::new(KernelFamily::Epanechnikov, 1),
            h,
            LossModel::Quantile { q },
        )
        .unwrap();
        let fit = fit_point(&data, &[x], &cfg).unwrap();
        let objective = |theta: f64| -> f64 { ys.iter().zip(&w).map(|(&y, &wi)| wi * check_loss(q, y - theta)).sum() };
        let brute = ys
            .iter()
            .zip(&w)
            .filter(|(_, &wi)| wi > 0.0)
            .map(|(&y, _)| objective(y))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max((objective(fit.m_hat) - brute).abs());
        windows += 1;
    }
    let t = start.elapsed().as_secs_f64();
    verdict(
        "quantile local-constant oracle",
        worst < 1e-6 && t < 10.0,
        format!("{windows} windows, max objective gap {worst:.2e} (< 1e-6), {t:.2} s"),
    );
}

#[test]
fn bias_match_at_curvature_point() {
    let start = Instant::now();
    let spec = load_experiment(&configs().join("bias.toml"), Some(Study::BiasCheck), None, None).unwrap();
    assert_eq!((spec.n_schedule.as_slice(), spec.replications, spec.fit.p), (&[500][..], 500, 1));
    assert_eq!(spec.points, vec![vec![0.25]]);
    let report = experiments::run(&spec).unwrap();
    let cell = &report.cells[0];
    let h = spec.fit.bandwidth.at(500);
    assert!((h - 0.15).abs() < 1e-15);
    // Uniform design: h² ν₂ m''(x) / 2 with m = sin(2πx).
    let m2 = -(2.0 * PI).powi(2) * (2.0 * PI * 0.25).sin();
    let oracle = h * h * epan_moment_1d(2) * m2 / 2.0;
    let z = (cell.mean - oracle).abs() / cell.se;
    let t = start.elapsed().as_secs_f64();
    verdict(
        "bias match",
        z <= 3.0 && cell.replications == 500 && t < 120.0,
        format!(
            "mean error {:.5} vs h²ν₂m''/2 = {oracle:.5}, {z:.2} s.e. (≤ 3), se {:.5}, library value {:.5}, {t:.1} s",
            cell.mean, cell.se, cell.reference
        ),
    );
}

fn rate_report() -> &'static (ExperimentReport, f64) {
    static REPORT: OnceLock<(ExperimentReport, f64)> = OnceLock::new();
    REPORT.get_or_init(|| {
        let start = Instant::now();
        let spec = load_experiment(&configs().join("rate.toml"), Some(Study::BahadurRate), None, None).unwrap();
        assert_eq!(spec.n_schedule, [500, 1000, 2000, 4000, 8000]);
        assert_eq!(spec.replications, 200);
        assert_eq!(spec.fit.bandwidth.exponent, 0.2);
        assert!(matches!(spec.fit.loss, LossModel::Quantile { .. }));
        assert!(matches!(spec.rate.compare_with, Some(LossModel::Huber { .. })));
        let report = experiments::run(&spec).unwrap();
        (report, start.elapsed().as_secs_f64())
    })
}

fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn bahadur_remainder_rate() {
    let (report, t) = rate_report();
    let quantile = &report.rate[0];
    let rec = &quantile.records;
    let x: Vec<f64> = rec.iter().map(|r| ((r.n as f64).ln() / (r.n as f64 * r.h)).ln()).collect();
    let y: Vec<f64> = rec.iter().map(|r| r.median_sup_remainder.ln()).collect();
    let slope = ols_slope(&x, &y);
    let fails: usize = rec.iter().map(|r| r.failures).sum();
    verdict(
        "Bahadur remainder rate",
        (0.55..=1.05).contains(&slope) && (slope - quantile.fitted_slope).abs() < 1e-10 && *t < 1200.0,
        format!(
            "quantile slope {slope:.4} (band [0.55, 1.05], point target 0.75), se {:.4}, {fails} failed reps, {t:.0} s",
            quantile.slope_se
        ),
    );
}

#[test]
fn lipschitz_loss_ordering() {
    let (report, _) = rate_report();
    let (quantile, huber) = (&report.rate[0], &report.rate[1]);
    let pairs: Vec<(usize, f64, f64)> = quantile
        .records
        .iter()
        .zip(&huber.records)
        .map(|(a, b)| (a.n, b.median_sup_remainder, a.median_sup_remainder))
        .collect();
    let ok = pairs.len() == 5 && pairs.iter().all(|(_, h, q)| h < q);
    let detail: Vec<String> = pairs
        .iter()
        .map(|(n, h, q)| format!("n={n}: {h:.4} < {q:.4}"))
        .collect();
    verdict("Lipschitz-loss ordering", ok, format!("huber vs quantile median sup-remainder, {}", detail.join(", ")));
}

#[test]
fn additive_clt() {
    let start = Instant::now();
    let spec = load_experiment(&configs().join("additive.toml"), Some(Study::AdditiveClt), None, None).unwrap();
    assert_eq!((spec.dgp.d, spec.fit.p, spec.n_schedule.as_slice(), spec.replications), (2, 1, &[2000][..], 300));
    let LossModel::Quantile { q } = spec.fit.loss else { panic!("median loss expected") };
    let report = experiments::run(&spec).unwrap();
    let cell = &report.cells[0];
    let var = cell.sd * cell.sd;

    // q(1−q) ∫ f⁻¹ f_ε(0)⁻² f₂² dx₂ · (e₁ S_p⁻¹ K₂)²: uniform design, N(0, 1) errors.
    let b = basis(2, 1);
    let inv = sp_matrix(&b).try_inverse().unwrap();
    let k2_full = DVector::from_iterator(b.len(), b.iter().map(|r| epan_moment(r)));
    let k2_cube = DVector::from_iterator(b.len(), b.iter().map(|r| r.iter().map(|&k| epan_moment_1d_half(k)).product()));
    let f0 = 1.0 / (2.0 * PI).sqrt();
    let scale = q * (1.0 - q) / (f0 * f0);
    let sigma2 = scale * (inv.row(0) * &k2_full)[0].powi(2);
    let sigma2_cube = scale * (inv.row(0) * &k2_cube)[0].powi(2);
    let ratio = var / sigma2;

    let check = |suffix: &str| report.checks.iter().find(|c| c.name.ends_with(suffix)).unwrap().value;
    let skew = check("|skewness|");
    let kurt = check("|excess kurtosis|");
    let diag = |suffix: &str| report.diagnostics.iter().find(|c| c.name.ends_with(suffix)).unwrap().value;
    let t = start.elapsed().as_secs_f64();
    verdict(
        "additive CLT",
        (0.7..=1.3).contains(&ratio) && skew < 0.35 && kurt < 0.8 && t < 1800.0,
        format!(
            "variance {var:.4} / sigma2 {sigma2:.4} = {ratio:.3} (band [0.7, 1.3]), |skew| {skew:.3} (< 0.35), |ex. kurt| {kurt:.3} (< 0.8); \
             unit-cube sigma2 {sigma2_cube:.4} (ratio {:.2}), linearized sigma2 {:.4} (ratio {:.3}), {} failed reps, {t:.0} s",
            var / sigma2_cube,
            diag("sigma2 linearized kernel constant"),
            diag("variance / sigma2 (linearized)"),
            cell.failures
        ),
    );
}

/// Writes reduced copies of the bundled configs so every subcommand runs in seconds.
fn reduced_configs(dir: &Path) -> Vec<(&'static str, PathBuf)> {
    let edit = |name: &str, f: &dyn Fn(&mut toml::Table)| -> PathBuf {
        let src = configs().join(name);
        let mut t: toml::Table = std::fs::read_to_string(&src).unwrap().parse().unwrap();
        f(&mut t);
        let out = dir.join(name);
        std::fs::write(&out, toml::to_string(&t).unwrap()).unwrap();
        out
    };
    let set = |t: &mut toml::Table, k: &str, v: toml::Value| {
        t.insert(k.into(), v);
    };
    let ints = |v: &[i64]| toml::Value::Array(v.iter().map(|&x| toml::Value::Integer(x)).collect());
    let bias = edit("bias.toml", &|t| set(t, "replications", 20.into()));
    let rate = edit("rate.toml", &|t| {
        set(t, "replications", 4.into());
        set(t, "n_schedule", ints(&[200, 400, 800, 1600]));
        t["grid"].as_table_mut().unwrap().insert("points".into(), 11.into());
    });
    let additive = edit("additive.toml", &|t| {
        set(t, "replications", 4.into());
        set(t, "n_schedule", ints(&[400]));
    });
    let identity = edit("identity.toml", &|t| set(t, "replications", 6.into()));
    vec![
        ("fit", configs().join("fit.toml")),
        ("bias", bias.clone()),
        ("bahadur", rate),
        ("additive", additive),
        ("identity", identity),
        ("mc", bias),
    ]
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn determinism() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cases = reduced_configs(tmp.path());
    let mut compared = 0;
    let mut differing = Vec::new();
    for (cmd, cfg) in &cases {
        for format in ["csv", "json"] {
            let mut outputs = Vec::new();
            for (run, threads) in [(0, "1"), (1, "2")] {
                let out = tmp.path().join(format!("{cmd}-{format}-{run}"));
                let code = lpmreg_cli::parse_and_dispatch([
                    "lpmreg",
                    cmd,
                    "--config",
                    cfg.to_str().unwrap(),
                    "--seed",
                    "42",
                    "--out",
                    out.to_str().unwrap(),
                    "--format",
                    format,
                    "--threads",
                    threads,
                ]);
                assert!(code == 0 || code == 1, "{cmd} exited with {code}");
                outputs.push(snapshot(&out));
            }
            compared += outputs[0].len();
            if outputs[0].is_empty() || outputs[0] != outputs[1] {
                differing.push(format!("{cmd}/{format}"));
            }
            if format == "json" && *cmd != "fit" {
                let (_, bytes) = &outputs[0][0];
                let parsed: ExperimentReport = serde_json::from_slice(bytes).unwrap();
                let mut again = serde_json::to_vec_pretty(&parsed).unwrap();
                again.push(b'\n');
                if &again != bytes {
                    differing.push(format!("{cmd} json round trip"));
                }
            }
        }
    }
    let t = start.elapsed().as_secs_f64();
    verdict(
        "determinism",
        differing.is_empty(),
        format!(
            "{} subcommands × 2 formats, {compared} files byte-identical across reruns with 1 and 2 threads, differing {differing:?}, {t:.1} s",
            cases.len()
        ),
    );
}
