//! Acceptance criteria. Each test prints one PASS/FAIL line and asserts it.
//!
//! Tests share one lock so that wall-clock budgets are measured without
//! competing for the CPU.

use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use richbll::harness::config::{DatasetSpec, ExperimentConfig, NoisePolicy, Variant};
use richbll::harness::data::SyntheticSpec;
use richbll::harness::experiments::{
    run_ablation, run_bandit_experiment, run_ood_experiment, run_toy1d, run_uci_benchmark, BanditMethods,
};
use richbll::harness::verify::{
    algebra_gates, gradient_gate, regression_rate_gate, sketch_gates, subsample_gates, GateResult, SuiteOptions,
};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, passed: bool, detail: &str, start: Instant, budget_secs: f64) -> bool {
    let secs = start.elapsed().as_secs_f64();
    let in_time = secs < budget_secs;
    let ok = passed && in_time;
    println!(
        "criterion {id:>2} {name}: {} | {detail} | runtime {secs:.1}s (budget {budget_secs:.0}s{})",
        if ok { "PASS" } else { "FAIL" },
        if in_time { "" } else { ", exceeded" }
    );
    ok
}

fn gate_detail(g: &GateResult) -> String {
    let mut s = format!("{} measured {:.4e} ({})", g.name, g.measured, g.threshold);
    for (k, v) in &g.metrics {
        s.push_str(&format!(" {k}={v:.4e}"));
    }
    s
}

fn opts() -> SuiteOptions {
    SuiteOptions { seed: 0, mutate_equivalence: false }
}

fn seeds(n: u64) -> Vec<u64> {
    (0..n).collect()
}

#[test]
fn criterion_01_weight_and_kernel_space_agree() {
    let _g = serial();
    let start = Instant::now();
    let gates = algebra_gates(&opts()).unwrap();
    let g = &gates[0];
    assert!(report(1, "equivalence", g.passed, &gate_detail(g), start, 30.0));
}

#[test]
fn criterion_02_rich_dominates_last_layer() {
    let _g = serial();
    let start = Instant::now();
    let gates = algebra_gates(&opts()).unwrap();
    let ok = gates[1].passed && gates[2].passed;
    let detail = format!("{}; {}", gate_detail(&gates[1]), gate_detail(&gates[2]));
    assert!(report(2, "dominance", ok, &detail, start, 10.0));
}

#[test]
fn criterion_03_least_squares_rate() {
    let _g = serial();
    let start = Instant::now();
    let g = regression_rate_gate(&opts()).unwrap();
    assert!(report(3, "regression rate", g.passed, &gate_detail(&g), start, 120.0));
}

#[test]
fn criterion_04_subsample_rate_and_n_independence() {
    let _g = serial();
    let start = Instant::now();
    let gates = subsample_gates(&opts()).unwrap();
    let ok = gates.iter().filter(|g| g.hard).all(|g| g.passed);
    let detail = gates.iter().map(gate_detail).collect::<Vec<_>>().join("; ");
    assert!(report(4, "subsample rate", ok, &detail, start, 180.0));
}

#[test]
fn criterion_05_sketch_fidelity() {
    let _g = serial();
    let start = Instant::now();
    let gates = sketch_gates(&opts()).unwrap();
    let ok = gates.iter().all(|g| g.passed);
    let detail = gates.iter().map(gate_detail).collect::<Vec<_>>().join("; ");
    assert!(report(5, "sketch fidelity", ok, &detail, start, 120.0));
}

#[test]
fn criterion_06_gradients_match_finite_differences() {
    let _g = serial();
    let start = Instant::now();
    let g = gradient_gate(&opts()).unwrap();
    assert!(report(6, "gradient", g.passed, &gate_detail(&g), start, 30.0));
}

#[test]
fn criterion_07_toy_gap_uncertainty() {
    let _g = serial();
    let start = Instant::now();
    let cfg = ExperimentConfig {
        seeds: seeds(5),
        dataset: DatasetSpec::Synthetic(SyntheticSpec::Sinusoid { n: 200, noise_std: 0.1, seed: 0 }),
        ..ExperimentConfig::default()
    };
    let r = run_toy1d(&cfg).unwrap();
    let (bll, rich, sub, ntk) = (r.mean_gap_std_bll, r.mean_gap_std_rich, r.mean_gap_std_rich_sub, r.mean_gap_std_ntk);
    let sub_rel = (sub - rich).abs() / rich;
    let ok = bll < rich && sub_rel <= 0.15 && rich <= 1.25 * ntk;
    let detail = format!("gap std bll {bll:.4} rich {rich:.4} rich-sub {sub:.4} (rel {sub_rel:.3}) ntk {ntk:.4}");
    assert!(report(7, "toy gap", ok, &detail, start, 120.0));
}

#[test]
fn criterion_08_wheel_bandit_regret() {
    let _g = serial();
    let start = Instant::now();
    let mut cfg = ExperimentConfig { seeds: seeds(5), ..ExperimentConfig::default() };
    cfg.bandit.agent.variant = Variant::Rich;
    cfg.bandit.deltas = vec![0.5];
    cfg.bandit.horizon = 2000;
    let r = run_bandit_experiment(&cfg, BanditMethods::default()).unwrap();
    let rich = r.summary_for(0.5, "rich").unwrap().norm_regret.mean;
    let bll = r.summary_for(0.5, "bll").unwrap().norm_regret.mean;
    let uniform = r.summary_for(0.5, "uniform").unwrap().norm_regret.mean;
    let ok = rich <= 0.8 * bll && (uniform - 1.0).abs() <= 0.05;
    let detail = format!("normalized regret rich {rich:.4} bll {bll:.4} ratio {:.3} uniform {uniform:.4}", rich / bll);
    assert!(report(8, "wheel bandit", ok, &detail, start, 900.0));
}

#[test]
fn criterion_09_ood_auroc() {
    let _g = serial();
    let start = Instant::now();
    let cfg = ExperimentConfig {
        seeds: seeds(10),
        dataset: DatasetSpec::Synthetic(SyntheticSpec::ClusterShift { n: 1000, d: 4, noise_std: 0.1, shift: 2.0, seed: 0 }),
        ..ExperimentConfig::default()
    };
    let r = run_ood_experiment(&cfg).unwrap();
    let auc = |m: &str| r.aggregate(m).and_then(|a| a.auroc).unwrap().mean;
    let (rich, bll) = (auc("rich"), auc("bll"));
    let ok = rich >= bll && rich >= 0.9;
    let detail = format!("mean AUROC rich {rich:.4} bll {bll:.4}");
    assert!(report(9, "ood auroc", ok, &detail, start, 180.0));
}

#[test]
fn criterion_10_ablation_stability() {
    let _g = serial();
    let start = Instant::now();
    let cfg = ExperimentConfig {
        seeds: seeds(5),
        dataset: DatasetSpec::Synthetic(SyntheticSpec::Linear { n: 1000, d: 4, noise_std: 0.1, seed: 0 }),
        sigma2: NoisePolicy::Auto,
        ..ExperimentConfig::default()
    };
    let r = run_ablation(&cfg).unwrap();
    let spread = r.nll_spread();
    let cells = r.grid.iter().map(|c| format!("{}:{:.4}", c.ratio, c.nll.mean)).collect::<Vec<_>>().join(" ");
    let detail = format!("nll spread {spread:.4} over ratios [{cells}]");
    assert!(report(10, "ablation", spread <= 0.1, &detail, start, 300.0));
}

/// Runs only when `RICHBLL_UCI_DIR` points at `<dataset>.csv` files.
#[test]
fn criterion_11_uci_benchmark() {
    let _g = serial();
    let start = Instant::now();
    let Some(dir) = std::env::var_os("RICHBLL_UCI_DIR") else {
        println!("criterion 11 uci benchmark: SKIP | RICHBLL_UCI_DIR not set");
        return;
    };
    let n_seeds = std::env::var("RICHBLL_UCI_SEEDS").ok().and_then(|s| s.parse().ok()).unwrap_or(5);
    let base = ExperimentConfig { seeds: seeds(n_seeds), ..ExperimentConfig::default() };
    let r = run_uci_benchmark(&base, std::path::Path::new(&dir)).unwrap();
    for d in &r.distances {
        println!("  {} {}: nll {} reference {:.2} distance {:+.3}", d.dataset, d.method, d.nll, d.reference_nll, d.distance);
    }
    let needed = (4 * r.reports.len()).div_ceil(5);
    let ok = r.rich_wins >= needed;
    let detail = format!("rich below bll on {} of {} datasets (need {needed})", r.rich_wins, r.reports.len());
    assert!(report(11, "uci benchmark", ok, &detail, start, f64::INFINITY));
}
