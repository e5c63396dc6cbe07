//! End-to-end checks of the experiment drivers at small scale.

use std::sync::Mutex;

use richbll::harness::config::{DatasetSpec, ExperimentConfig, NoisePolicy, TrainSpec, Variant};
use richbll::harness::data::SyntheticSpec;
use richbll::harness::experiments::{
    run_ablation, run_ood_experiment, run_ood_with, run_regression_experiment, run_regression_with, run_toy1d,
    OodSource,
};
use richbll::harness::report::MetricRow;
use richbll::harness::verify::{run_suite, SuiteOptions};

static TIMING: Mutex<()> = Mutex::new(());

fn linear(n: usize, seeds: u64) -> ExperimentConfig {
    ExperimentConfig {
        seeds: (0..seeds).collect(),
        dataset: DatasetSpec::Synthetic(SyntheticSpec::Linear { n, d: 4, noise_std: 0.1, seed: 0 }),
        train: TrainSpec { max_epochs: 60, ..TrainSpec::default() },
        ..ExperimentConfig::default()
    }
}

fn without_time(rows: &[MetricRow]) -> Vec<MetricRow> {
    rows.iter().map(|r| MetricRow { runtime_secs: 0.0, ..r.clone() }).collect()
}

fn mean_nll(rows: &[&MetricRow]) -> f64 {
    rows.iter().map(|r| r.nll).sum::<f64>() / rows.len() as f64
}

#[test]
fn rich_is_not_worse_than_bll_on_linear_data() {
    let cfg = linear(400, 3);
    let r = run_regression_with(&cfg, &[Variant::Bll, Variant::Rich, Variant::RichSub]).unwrap();
    let bll = mean_nll(&r.method_rows("bll"));
    for m in ["rich", "rich-sub"] {
        let v = mean_nll(&r.method_rows(m));
        assert!(v <= bll + 0.05, "{m}: {v} vs bll {bll}");
    }
}

#[test]
fn full_ratio_subsample_matches_the_unsubsampled_fit() {
    let mut cfg = linear(200, 2);
    cfg.subsample_ratio = 1.0;
    let r = run_regression_with(&cfg, &[Variant::Rich, Variant::RichSub]).unwrap();
    for (a, b) in r.method_rows("rich").iter().zip(r.method_rows("rich-sub")) {
        assert_eq!(a.nll, b.nll);
        assert_eq!(a.rmse, b.rmse);
    }
}

#[test]
fn regression_is_deterministic_under_seed() {
    let cfg = linear(150, 2);
    let a = run_regression_experiment(&cfg).unwrap();
    let b = run_regression_experiment(&cfg).unwrap();
    assert_eq!(without_time(&a.rows), without_time(&b.rows));
}

#[test]
fn toy_rich_variance_dominates_outside_the_data() {
    let cfg = ExperimentConfig {
        seeds: vec![0, 1],
        dataset: DatasetSpec::Synthetic(SyntheticSpec::Sinusoid { n: 200, noise_std: 0.1, seed: 0 }),
        toy: richbll::harness::config::ToySpec { epochs: 100, grid_points: 81, ..Default::default() },
        ..ExperimentConfig::default()
    };
    let r = run_toy1d(&cfg).unwrap();
    for s in &r.seeds {
        for b in s.bands.iter().filter(|b| b.x.abs() > 3.0) {
            assert!(b.std_rich * b.std_rich >= b.std_bll * b.std_bll - 1e-8, "x = {}", b.x);
        }
    }
    assert!(r.mean_gap_std_rich > r.mean_gap_std_bll);
}

#[test]
fn shifted_test_inputs_are_detected() {
    let cfg = linear(300, 2);
    let r = run_ood_experiment(&cfg).unwrap();
    let auc = r.aggregate("rich").unwrap().auroc.unwrap().mean;
    assert!(auc >= 0.9, "{auc}");
}

#[test]
fn in_distribution_copy_scores_chance() {
    let cfg = linear(300, 2);
    let data = cfg.dataset.load().unwrap();
    let r = run_ood_with(&cfg, &data, &OodSource::ShiftedTest(0.0)).unwrap();
    for a in &r.aggregates {
        let auc = a.auroc.unwrap().mean;
        assert!((auc - 0.5).abs() <= 0.05, "{}: {auc}", a.method);
    }
}

#[test]
fn ood_is_deterministic_under_seed() {
    let cfg = ExperimentConfig {
        dataset: DatasetSpec::Synthetic(SyntheticSpec::ClusterShift { n: 200, d: 3, noise_std: 0.1, shift: 2.0, seed: 1 }),
        ..linear(0, 1)
    };
    let a = run_ood_experiment(&cfg).unwrap();
    let b = run_ood_experiment(&cfg).unwrap();
    assert_eq!(without_time(&a.rows), without_time(&b.rows));
}

#[test]
fn ablation_at_ratio_one_equals_the_full_run() {
    let mut cfg = linear(200, 2);
    cfg.ablation_ratios = vec![1.0];
    let r = run_ablation(&cfg).unwrap();
    let full = r.report.method_rows("rich");
    let sub = r.report.method_rows("rich-sub@1");
    assert_eq!(full.len(), sub.len());
    for (a, b) in full.iter().zip(sub) {
        assert_eq!(a.nll, b.nll);
    }
}

#[test]
fn ablation_runtime_falls_with_the_ratio() {
    let _g = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let mut cfg = linear(2000, 3);
    cfg.train.max_epochs = 10;
    cfg.sigma2 = NoisePolicy::Fixed(0.05);
    cfg.ablation_ratios = vec![0.2, 0.5, 1.0];
    let r = run_ablation(&cfg).unwrap();
    let t: Vec<f64> = r.grid.iter().map(|c| c.runtime_median_secs).collect();
    assert!(t[0] <= t[1] && t[1] <= t[2], "{t:?}");
}

#[test]
fn default_seed_passes_all_hard_gates() {
    let r = run_suite(&SuiteOptions::default()).unwrap();
    let failed: Vec<String> =
        r.gates.iter().filter(|g| g.hard && !g.passed).map(|g| format!("{} = {:.4e}", g.name, g.measured)).collect();
    assert!(r.all_hard_passed, "failed hard gates: {failed:?}");
}

#[test]
fn suite_reports_the_rate_slopes() {
    let r = run_suite(&SuiteOptions { seed: 3, mutate_equivalence: false }).unwrap();
    for name in ["regression_rate", "subsample_rate", "sketch_gram_rate"] {
        let g = r.gate(name).unwrap();
        assert!(g.measured.is_finite() && g.measured < 0.0, "{name}: {}", g.measured);
    }
    let mutated = run_suite(&SuiteOptions { seed: 3, mutate_equivalence: true }).unwrap();
    assert!(!mutated.gate("equivalence").unwrap().passed);
    assert!(!mutated.all_hard_passed);
}
