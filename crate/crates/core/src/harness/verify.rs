//! Numerical verification suite.
//!
//! Each gate measures one property of the posterior machinery on synthetic
//! data with known structure and compares it to a fixed threshold. Hard gates
//! decide the exit status of `verify`; informational gates are only reported.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{init_model, train, Activation, BackboneConfig, BackboneModel, TrainConfig};
use crate::densela::{
    cholesky_solve, cholesky, gram, matmul, min_eigval, spectral_norm, DenseMatrix, JitterPolicy,
};
use crate::error::Result;
use crate::gp_posterior::{fit_posterior, fit_posterior_with, oracle, PosteriorOptions};
use crate::harness::data::SyntheticSpec;
use crate::harness::metrics::{log_log_slope, median};
use crate::harness::report::save_json;
use crate::ntk_features::{extract_bundle, FeatureBundle, HiddenFeatures, HiddenMode, SketchConfig};
use crate::transform::{fit_a_exact, fit_transform, subsample_rows, RichTransform, SubsampleSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub name: String,
    pub hard: bool,
    pub passed: bool,
    pub measured: f64,
    pub threshold: String,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub elapsed_secs: f64,
}

impl GateResult {
    fn new(name: &str, hard: bool, passed: bool, measured: f64, threshold: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            hard,
            passed,
            measured,
            threshold: threshold.into(),
            metrics: BTreeMap::new(),
            elapsed_secs: 0.0,
        }
    }

    fn with(mut self, key: &str, value: f64) -> Self {
        self.metrics.insert(key.into(), value);
        self
    }

    fn timed(mut self, start: Instant) -> Self {
        self.elapsed_secs = start.elapsed().as_secs_f64();
        self
    }

    pub fn status(&self) -> &'static str {
        match (self.passed, self.hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "WARN",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub version: String,
    pub seed: u64,
    pub gates: Vec<GateResult>,
    pub all_hard_passed: bool,
}

impl SuiteReport {
    pub fn new(seed: u64, gates: Vec<GateResult>) -> Self {
        let all_hard_passed = gates.iter().filter(|g| g.hard).all(|g| g.passed);
        Self { version: crate::VERSION.into(), seed, gates, all_hard_passed }
    }

    pub fn gate(&self, name: &str) -> Option<&GateResult> {
        self.gates.iter().find(|g| g.name == name)
    }

    /// `summary.json` and `gates.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_json(&dir.join("summary.json"), self)?;
        let mut w = csv::Writer::from_path(dir.join("gates.csv"))?;
        w.write_record(["name", "hard", "passed", "measured", "threshold", "elapsed_secs"])?;
        for g in &self.gates {
            w.write_record([
                g.name.clone(),
                g.hard.to_string(),
                g.passed.to_string(),
                g.measured.to_string(),
                g.threshold.clone(),
                g.elapsed_secs.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Replace `L` by the identity in the equivalence gate while keeping the
    /// rich inner factor. The gate must then fail.
    #[serde(default)]
    pub mutate_equivalence: bool,
}

pub const EQUIVALENCE_TOL: f64 = 1e-6;
pub const DOMINANCE_TOL: f64 = 1e-8;
pub const PSD_TOL: f64 = 1e-10;
pub const GRADIENT_TOL: f64 = 1e-4;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn hstack(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows(), a.cols() + b.cols(), |i, j| if j < a.cols() { a.get(i, j) } else { b.get(i, j - a.cols()) })
}

fn rel_frobenius(a: &DenseMatrix, reference: &DenseMatrix) -> f64 {
    a.sub(reference).frobenius_norm() / reference.frobenius_norm().max(f64::MIN_POSITIVE)
}

/// One random posterior problem with exact hidden features.
struct Instance {
    bundle: FeatureBundle,
    phi_r_test: DenseMatrix,
    phi_m_test: DenseMatrix,
    noise_var: f64,
}

fn instance(rng: &mut ChaCha8Rng, index: usize) -> Instance {
    let r = rng.random_range(1..=10usize);
    let n = rng.random_range(r..=50usize);
    let m = rng.random_range(1..=200usize);
    let n_test = 8;
    let phi_r = uniform_matrix(rng, n, r);
    let phi_m = uniform_matrix(rng, n, m);
    Instance {
        bundle: FeatureBundle { phi_r, hidden: HiddenFeatures::Exact(phi_m), source_rows: (0..n).collect() },
        phi_r_test: uniform_matrix(rng, n_test, r),
        phi_m_test: uniform_matrix(rng, n_test, m),
        noise_var: [0.01, 0.1, 1.0][index % 3],
    }
}

/// Weight-space vs kernel-space agreement, dominance over the plain last
/// layer and the PSD/normal-equation floor, all on the same 100 instances.
pub fn algebra_gates(opts: &SuiteOptions) -> Result<Vec<GateResult>> {
    let start = Instant::now();
    let mut rng = rng_for(opts.seed, 11);
    let mut equiv_gap = 0.0f64;
    let mut dominance = f64::INFINITY;
    let mut diag_floor = f64::INFINITY;
    let mut asym = 0.0f64;
    let mut inner_eig = f64::INFINITY;
    let mut btb_eig = f64::INFINITY;
    let mut normal_residual = 0.0f64;
    let mut oracle_gaps = Vec::new();
    let mut deterministic = true;
    for i in 0..100 {
        let inst = instance(&mut rng, i);
        let phi_r = &inst.bundle.phi_r;
        let phi_m = inst.bundle.hidden.matrix();
        let t = fit_transform(&inst.bundle, 0.0, None)?;
        let mut rich = fit_posterior(phi_r, Some(&t), inst.noise_var, None)?;
        if opts.mutate_equivalence {
            rich.l = crate::densela::LowerTriangularFactor::identity(t.r());
        }
        let bll = fit_posterior(phi_r, None, inst.noise_var, None)?;
        let s_rich = rich.predictive_cov(&inst.phi_r_test)?;
        let s_kernel = oracle::kernel_space_cov(phi_r, &inst.phi_r_test, &t.gram_btb, inst.noise_var)?;
        equiv_gap = equiv_gap.max(rel_frobenius(s_rich.matrix(), s_kernel.matrix()));

        let s_bll = bll.predictive_cov(&inst.phi_r_test)?;
        let rich_clean = fit_posterior(phi_r, Some(&t), inst.noise_var, None)?.predictive_cov(&inst.phi_r_test)?;
        dominance = dominance.min(min_eigval(&rich_clean.matrix().sub(s_bll.matrix()))?);

        for s in [&rich_clean, &s_bll] {
            asym = asym.max(s.matrix().max_asymmetry());
            diag_floor = diag_floor.min(s.variances().into_iter().fold(f64::INFINITY, f64::min));
        }
        inner_eig = inner_eig.min(min_eigval(&rich.inner_matrix())?);
        btb_eig = btb_eig.min(min_eigval(&t.gram_btb)?);

        let a = fit_a_exact(phi_m, phi_r, 0.0)?;
        let resid = phi_m.sub(&crate::densela::matmul_nt(phi_r, &a)?);
        let lhs = crate::densela::matmul_tn(phi_r, &resid)?;
        let scale = crate::densela::matmul_tn(phi_r, phi_m)?.frobenius_norm().max(1.0);
        normal_residual = normal_residual.max(lhs.frobenius_norm() / scale);

        let phi_p = hstack(phi_m, phi_r);
        let phi_p_test = hstack(&inst.phi_m_test, &inst.phi_r_test);
        let ntk = oracle::ntk_gp_oracle(&phi_p, &phi_p_test, inst.noise_var)?;
        oracle_gaps.push(rel_frobenius(rich_clean.matrix(), ntk.matrix()));

        if i % 10 == 0 && phi_r.rows() > phi_r.cols() {
            let spec = SubsampleSpec::new(phi_r.rows() - 1, opts.seed ^ i as u64);
            let a1 = fit_transform(&inst.bundle, 1e-3, Some(&spec))?;
            let a2 = fit_transform(&inst.bundle, 1e-3, Some(&spec))?;
            deterministic &= a1 == a2 && subsample_rows(phi_r.rows(), &spec)? == subsample_rows(phi_r.rows(), &spec)?;
        }
    }
    let equiv = GateResult::new(
        "equivalence",
        true,
        equiv_gap <= EQUIVALENCE_TOL,
        equiv_gap,
        format!("max relative Frobenius gap <= {EQUIVALENCE_TOL:e}"),
    )
    .with("instances", 100.0)
    .with("median_rel_gap_to_ntk_oracle", median(&oracle_gaps))
    .timed(start);
    let dom = GateResult::new(
        "dominance",
        true,
        dominance >= -DOMINANCE_TOL,
        dominance,
        format!("min eigenvalue of S_rich - S_bll >= -{DOMINANCE_TOL:e}"),
    )
    .timed(start);
    let psd_ok = asym <= PSD_TOL
        && diag_floor >= -PSD_TOL
        && inner_eig >= 1.0 - 1e-8
        && btb_eig >= 1.0 - 1e-8
        && normal_residual <= 1e-8
        && deterministic;
    let psd = GateResult::new(
        "psd_floor",
        true,
        psd_ok,
        diag_floor,
        "symmetric, nonnegative variances, inner and B^T B eigenvalues >= 1, normal equations hold, seeded subsample reproducible",
    )
    .with("max_asymmetry", asym)
    .with("min_variance", diag_floor)
    .with("min_eig_inner", inner_eig)
    .with("min_eig_btb", btb_eig)
    .with("max_normal_residual", normal_residual)
    .with("deterministic", f64::from(u8::from(deterministic)))
    .timed(start);
    Ok(vec![equiv, dom, psd])
}

/// Fixed smooth feature map on `[-1, 1]^3`: `r = 6` last-layer features
/// (5 tanh units plus a constant) and `m = 20` cosine hidden features.
struct Population {
    w_r: DenseMatrix,
    b_r: Vec<f64>,
    w_m: DenseMatrix,
    b_m: Vec<f64>,
}

impl Population {
    fn new(seed: u64) -> Self {
        let mut rng = rng_for(seed, 41);
        Self {
            w_r: normal_matrix(&mut rng, 5, 3),
            b_r: (0..5).map(|_| StandardNormal.sample(&mut rng)).collect(),
            w_m: normal_matrix(&mut rng, 20, 3),
            b_m: (0..20).map(|_| StandardNormal.sample(&mut rng)).collect(),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> (DenseMatrix, DenseMatrix) {
        let mut phi_r = DenseMatrix::zeros(n, 6);
        let mut phi_m = DenseMatrix::zeros(n, 20);
        for i in 0..n {
            let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            for j in 0..5 {
                let z: f64 = (0..3).map(|d| self.w_r.get(j, d) * x[d]).sum::<f64>() + self.b_r[j];
                phi_r.set(i, j, z.tanh());
            }
            phi_r.set(i, 5, 1.0);
            for j in 0..20 {
                let z: f64 = (0..3).map(|d| self.w_m.get(j, d) * x[d]).sum::<f64>() + self.b_m[j];
                phi_m.set(i, j, z.cos());
            }
        }
        (phi_r, phi_m)
    }
}

pub const RATE_SIZES: [usize; 3] = [250, 1000, 4000];

/// Convergence of the least-squares map to its population value.
pub fn regression_rate_gate(opts: &SuiteOptions) -> Result<GateResult> {
    let start = Instant::now();
    let pop = Population::new(opts.seed);
    let reference_n = 64 * RATE_SIZES[RATE_SIZES.len() - 1];
    let mut ref_rng = rng_for(opts.seed, 42);
    let mut g = DenseMatrix::zeros(6, 6);
    let mut h = DenseMatrix::zeros(6, 20);
    let chunk = 8192;
    let mut done = 0;
    while done < reference_n {
        let n = chunk.min(reference_n - done);
        let (phi_r, phi_m) = pop.sample(&mut ref_rng, n);
        g = g.add(&gram(&phi_r));
        h = h.add(&crate::densela::matmul_tn(&phi_r, &phi_m)?);
        done += n;
    }
    let a_ref = cholesky_solve(&cholesky(&g, &JitterPolicy::default())?, &h)?.transpose();
    let mut medians = Vec::new();
    for (si, &n) in RATE_SIZES.iter().enumerate() {
        let errs: Vec<f64> = (0..10)
            .map(|s| {
                let mut rng = rng_for(opts.seed.wrapping_add(1000 * s + 1), 100 + si as u64);
                let (phi_r, phi_m) = pop.sample(&mut rng, n);
                fit_a_exact(&phi_m, &phi_r, 0.0).map(|a| spectral_norm(&a.sub(&a_ref)))
            })
            .collect::<Result<_>>()?;
        medians.push(median(&errs));
    }
    let sizes: Vec<f64> = RATE_SIZES.iter().map(|&n| n as f64).collect();
    let slope = log_log_slope(&sizes, &medians);
    let mut gate = GateResult::new("regression_rate", true, (-0.65..=-0.35).contains(&slope), slope, "slope in [-0.65, -0.35]")
        .with("reference_points", reference_n as f64);
    for (n, m) in RATE_SIZES.iter().zip(&medians) {
        gate = gate.with(&format!("median_err_n{n}"), *m);
    }
    Ok(gate.timed(start))
}

fn unit_sphere(rng: &mut ChaCha8Rng, n: usize, r: usize) -> DenseMatrix {
    let mut m = normal_matrix(rng, n, r);
    for i in 0..n {
        let row = m.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    m
}

pub const SUBSAMPLE_KS: [usize; 4] = [8, 32, 128, 512];
const SUB_R: usize = 8;
const SUB_TEST: usize = 16;
const SUB_SEEDS: u64 = 20;
const SUB_N: usize = 20_000;

struct SubsampleRun {
    medians: Vec<f64>,
    n_change: f64,
    bound_ok: bool,
}

/// Median spectral error of the subsampled posterior covariance against the
/// full-data one, over `SUBSAMPLE_KS`, plus the doubling check at `k = 16 r`.
fn subsample_errors(seed: u64, noise_var: f64) -> Result<SubsampleRun> {
    let identity = RichTransform::identity(SUB_R);
    let mut test_rng = rng_for(seed, 51);
    let test = unit_sphere(&mut test_rng, SUB_TEST, SUB_R);
    let delta: f64 = 0.05;
    let mut per_k: Vec<Vec<f64>> = vec![Vec::new(); SUBSAMPLE_KS.len()];
    let mut doubling: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut lambda_min = f64::INFINITY;
    let mut k_max = 0.0f64;
    for s in 0..SUB_SEEDS {
        let mut rng = rng_for(seed.wrapping_add(7919 * s), 52);
        let data = unit_sphere(&mut rng, 2 * SUB_N, SUB_R);
        for (ni, n) in [SUB_N, 2 * SUB_N].into_iter().enumerate() {
            let phi = data.select_rows(&(0..n).collect::<Vec<_>>());
            let full = fit_posterior(&phi, Some(&identity), noise_var, None)?.predictive_cov(&test)?;
            let ks: &[usize] = if ni == 0 { &SUBSAMPLE_KS } else { &[16 * SUB_R] };
            if ni == 0 {
                lambda_min = lambda_min.min(min_eigval(&gram(&phi).scale(1.0 / n as f64))?);
                k_max = k_max.max((0..n).map(|i| phi.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max));
            }
            for &k in ks {
                let opts = PosteriorOptions {
                    subsample: Some(SubsampleSpec::new(k, seed ^ (s << 20) ^ (k as u64) ^ ((ni as u64) << 40))),
                    allow_k_below_r: true,
                };
                let sub = fit_posterior_with(&phi, Some(&identity), noise_var, &opts)?.predictive_cov(&test)?;
                let err = spectral_norm(&sub.matrix().sub(full.matrix()));
                if ni == 0 {
                    let ki = SUBSAMPLE_KS.iter().position(|&x| x == k).expect("listed k");
                    per_k[ki].push(err);
                }
                if k == 16 * SUB_R {
                    doubling[ni].push(err);
                }
            }
        }
    }
    let medians: Vec<f64> = per_k.iter().map(|v| median(v)).collect();
    let (m1, m2) = (median(&doubling[0]), median(&doubling[1]));
    let sigma = noise_var.sqrt();
    let n = SUB_N as f64;
    let k4 = k_max.powi(4);
    let bound_ok = SUBSAMPLE_KS.iter().zip(&medians).all(|(&k, &err)| {
        let conc = (8.0 * (4.0 * SUB_R as f64 / delta).ln() / (3.0 * k as f64)).sqrt();
        let b1 = SUB_TEST as f64 * 2.0 * k4 / lambda_min * conc;
        let b2 = SUB_TEST as f64 * 4.0 * k4 / (sigma / n + lambda_min / (2.0 * sigma)).powi(2) / n * conc;
        err <= b1.min(b2)
    });
    Ok(SubsampleRun { medians, n_change: (m2 - m1) / m1, bound_ok })
}

/// Subsampled posterior: rate in `k`, independence of `N`, and a bound check.
pub fn subsample_gates(opts: &SuiteOptions) -> Result<Vec<GateResult>> {
    let start = Instant::now();
    let run = subsample_errors(opts.seed, 5000.0)?;
    let ks: Vec<f64> = SUBSAMPLE_KS.iter().map(|&k| k as f64).collect();
    let slope = log_log_slope(&ks, &run.medians);
    let monotone = run.medians.windows(2).all(|w| w[1] <= w[0]);
    let mut rate = GateResult::new(
        "subsample_rate",
        true,
        (-0.7..=-0.3).contains(&slope) && monotone,
        slope,
        "slope in [-0.7, -0.3] with non-increasing medians",
    );
    for (k, m) in SUBSAMPLE_KS.iter().zip(&run.medians) {
        rate = rate.with(&format!("median_err_k{k}"), *m);
    }
    let rate = rate.timed(start);
    let n_gate = GateResult::new(
        "subsample_n_independence",
        true,
        run.n_change.abs() < 0.25,
        run.n_change,
        "relative change of the k = 16r median from N to 2N below 25%",
    )
    .timed(start);
    let bound = GateResult::new(
        "subsample_bound",
        false,
        run.bound_ok,
        f64::from(u8::from(run.bound_ok)),
        "median error below both concentration bounds at every k",
    )
    .timed(start);
    let low_noise = subsample_errors(opts.seed, 1.0)?;
    let grows = GateResult::new(
        "subsample_n_no_growth_low_noise",
        false,
        low_noise.n_change <= 0.25,
        low_noise.n_change,
        "relative change from N to 2N at unit noise <= 25%",
    )
    .timed(start);
    Ok(vec![rate, n_gate, bound, grows])
}

pub const SKETCH_QS: [usize; 4] = [64, 128, 256, 512];

/// Reference backbone for the sketch gates: a [50, 50] ReLU net on 256 rows.
pub fn sketch_reference(seed: u64) -> Result<(BackboneModel, DenseMatrix)> {
    let data = SyntheticSpec::Linear { n: 256, d: 4, noise_std: 0.1, seed }.generate();
    let mut cfg = BackboneConfig::new(4, vec![50, 50]);
    cfg.seed = seed;
    let model = init_model(&cfg)?;
    let tc = TrainConfig { epochs: 50, seed, ..TrainConfig::default() };
    let (model, _) = train(&model, &data, &tc)?;
    Ok((model, data.inputs))
}

/// Sketched hidden Gram fidelity and the sketched transform at `q = 8 r`.
pub fn sketch_gates(opts: &SuiteOptions) -> Result<Vec<GateResult>> {
    let start = Instant::now();
    let (model, x) = sketch_reference(opts.seed)?;
    let exact = extract_bundle(&model, &x, 0, &HiddenMode::Exact { budget: usize::MAX }, None)?;
    let phi_m = exact.hidden.matrix();
    let k_exact = crate::densela::outer_gram(phi_m);
    let mut medians = Vec::new();
    for &q in &SKETCH_QS {
        let errs: Vec<f64> = (0..20u64)
            .map(|s| {
                let sk = SketchConfig::new(q, opts.seed.wrapping_mul(31).wrapping_add(1000 * q as u64 + s));
                let p = sk.projection_block(model.m(), 0);
                matmul(phi_m, &p).map(|h| rel_frobenius(&crate::densela::outer_gram(&h), &k_exact))
            })
            .collect::<Result<_>>()?;
        medians.push(median(&errs));
    }
    let qs: Vec<f64> = SKETCH_QS.iter().map(|&q| q as f64).collect();
    let slope = log_log_slope(&qs, &medians);
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    let mut gram_gate = GateResult::new(
        "sketch_gram_rate",
        true,
        (-0.8..=-0.2).contains(&slope) && monotone,
        slope,
        "slope in [-0.8, -0.2] with non-increasing medians",
    );
    for (q, m) in SKETCH_QS.iter().zip(&medians) {
        gram_gate = gram_gate.with(&format!("median_rel_err_q{q}"), *m);
    }
    let gram_gate = gram_gate.timed(start);

    let q = 8 * model.r();
    let t_exact = fit_transform(&exact, 0.0, None)?;
    let llt_exact = t_exact.l.reconstruct();
    let errs: Vec<f64> = (0..10u64)
        .map(|s| {
            let sk = SketchConfig::new(q, opts.seed.wrapping_mul(17).wrapping_add(s + 1));
            let h = matmul(phi_m, &sk.projection_block(model.m(), 0))?;
            let bundle = FeatureBundle {
                phi_r: exact.phi_r.clone(),
                hidden: HiddenFeatures::Sketched { matrix: h, sketch: sk },
                source_rows: exact.source_rows.clone(),
            };
            fit_transform(&bundle, 0.0, None).map(|t| rel_frobenius(&t.l.reconstruct(), &llt_exact))
        })
        .collect::<Result<_>>()?;
    let med = median(&errs);
    let transform_gate =
        GateResult::new("sketch_transform", true, med <= 0.1, med, "median relative error of L L^T at q = 8r <= 0.1")
            .with("q", q as f64)
            .timed(start);
    Ok(vec![gram_gate, transform_gate])
}

/// Central finite differences of the network output against the analytic
/// gradient. The per-coordinate error is `|fd - g| / max(|fd|, |g|, 1e-6)`.
pub fn gradient_gate(opts: &SuiteOptions) -> Result<GateResult> {
    let start = Instant::now();
    let archs: [(usize, Vec<usize>, Activation, usize); 3] = [
        (3, vec![8], Activation::Relu, 1),
        (4, vec![6, 5], Activation::Tanh, 1),
        (2, vec![7, 7, 7], Activation::Relu, 2),
    ];
    let mut worst = 0.0f64;
    let mut rng = rng_for(opts.seed, 61);
    for (ai, (d, widths, act, out)) in archs.into_iter().enumerate() {
        let mut cfg = BackboneConfig::new(d, widths);
        cfg.activation = act;
        cfg.output_dim = out;
        cfg.seed = opts.seed.wrapping_add(ai as u64);
        let mut model = init_model(&cfg)?;
        let base: Vec<f64> = model.params().iter().map(|&p| p + 0.1 * rng.random_range(-1.0..1.0)).collect();
        model.set_params(&base)?;
        let output = out - 1;
        for _ in 0..5 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
            let analytic = flat_gradient(&model, &x, output);
            let mut probe = model.clone();
            let mut params = base.clone();
            for (j, &g) in analytic.iter().enumerate() {
                let h = 1e-6 * base[j].abs().max(1.0);
                params[j] = base[j] + h;
                probe.set_params(&params)?;
                let up = probe.forward(&x).0[output];
                params[j] = base[j] - h;
                probe.set_params(&params)?;
                let down = probe.forward(&x).0[output];
                params[j] = base[j];
                let fd = (up - down) / (2.0 * h);
                worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-6));
            }
        }
    }
    Ok(GateResult::new("gradient", true, worst <= GRADIENT_TOL, worst, format!("max relative error <= {GRADIENT_TOL:e}"))
        .timed(start))
}

/// The `(hidden, last)` gradient of one output laid out like `params()`:
/// the last layer stores all output rows of weights, then all biases.
fn flat_gradient(model: &BackboneModel, x: &[f64], output: usize) -> Vec<f64> {
    let (gm, gr) = model.param_gradient(x, output);
    let r = model.r();
    let outputs = model.config().output_dim;
    let mut flat = gm;
    let offset = flat.len();
    flat.resize(model.n_params(), 0.0);
    flat[offset + output * (r - 1)..offset + (output + 1) * (r - 1)].copy_from_slice(&gr[..r - 1]);
    flat[offset + outputs * (r - 1) + output] = gr[r - 1];
    flat
}

pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut gates = algebra_gates(opts)?;
    gates.push(regression_rate_gate(opts)?);
    gates.extend(subsample_gates(opts)?);
    gates.extend(sketch_gates(opts)?);
    gates.push(gradient_gate(opts)?);
    Ok(SuiteReport::new(opts.seed, gates))
}
