//! `richbll` command-line harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use richbll::harness::config::{ExperimentConfig, ExperimentKind, NoisePolicy, Variant};
use richbll::harness::experiments::{
    run_ablation, run_bandit_experiment, run_features, run_ood_experiment, run_regression_experiment, run_toy1d,
    run_uci_benchmark, BanditMethods,
};
use richbll::harness::report::MetricReport;
use richbll::harness::verify::{run_suite, SuiteOptions};
use richbll::ntk_features::SketchConfig;

#[derive(Parser, Debug)]
#[command(name = "richbll", version, about = "Rich Bayesian last-layer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Regression NLL/RMSE for the last-layer and rich posteriors.
    Regress {
        #[command(flatten)]
        common: Common,
        /// Directory of `<dataset>.csv` files (boston, concrete, energy,
        /// power, wine; target in the last column) for the benchmark report.
        #[arg(long)]
        uci_dir: Option<PathBuf>,
    },
    /// Out-of-distribution AUROC from epistemic variances.
    Ood(Common),
    /// Wheel bandit with Thompson sampling.
    Bandit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        horizon: Option<usize>,
        /// Comma-separated wheel radii.
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
    },
    /// Subsample-ratio sweep.
    Ablate(Common),
    /// One-dimensional toy with an input gap.
    Toy1d(Common),
    /// Numerical verification suite; exits nonzero when a hard gate fails.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Swap the rich transform for the identity in the equivalence gate.
        #[arg(long, hide = true)]
        mutate_equivalence: bool,
    },
    /// Train once and cache the checkpoint, features and transform.
    Features(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON file with `ExperimentConfig` fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds; overrides `--seed`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// bll | rich | rich-sub
    #[arg(long)]
    variant: Option<Variant>,
    /// Subsample ratio for rich-sub.
    #[arg(long)]
    ratio: Option<f64>,
    /// Sketch dimension for the hidden block; 0 disables sketching.
    #[arg(long)]
    sketch_q: Option<usize>,
    /// auto | grid | <value>
    #[arg(long)]
    sigma2: Option<NoisePolicy>,
}

impl Common {
    fn config(&self, kind: ExperimentKind) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        cfg.kind = kind;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
            cfg.bandit.agent.variant = v;
        }
        if let Some(r) = self.ratio {
            cfg.subsample_ratio = r;
        }
        if let Some(q) = self.sketch_q {
            let seed = cfg.sketch.as_ref().map_or(cfg.seeds[0], |s| s.seed);
            cfg.sketch = (q > 0).then(|| SketchConfig::new(q, seed));
        }
        if let Some(s) = self.sigma2 {
            cfg.sigma2 = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| Path::new("runs").join(name))
}

fn print_metrics(report: &MetricReport) {
    println!("{:<16} {:>22} {:>22} {:>22}", "method", "nll", "rmse", "auroc");
    for a in &report.aggregates {
        let auroc = a.auroc.map_or_else(|| "-".to_string(), |m| m.to_string());
        println!("{:<16} {:>22} {:>22} {:>22}", a.method, a.nll.to_string(), a.rmse.to_string(), auroc);
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Regress { common, uci_dir: Some(dir) } => {
            let cfg = common.config(ExperimentKind::Regress)?;
            let report = run_uci_benchmark(&cfg, &dir)?;
            report.save(&out_dir(&cfg, "uci"))?;
            println!("{:<10} {:<10} {:>20} {:>10} {:>10}", "dataset", "method", "nll", "reference", "distance");
            for d in &report.distances {
                println!(
                    "{:<10} {:<10} {:>20} {:>10.2} {:>+10.3}",
                    d.dataset,
                    d.method,
                    d.nll.to_string(),
                    d.reference_nll,
                    d.distance
                );
            }
            println!("rich below bll on {} of {} datasets", report.rich_wins, report.reports.len());
        }
        Command::Regress { common, uci_dir: None } => {
            let cfg = common.config(ExperimentKind::Regress)?;
            let report = run_regression_experiment(&cfg)?;
            report.save(&out_dir(&cfg, "regress"))?;
            print_metrics(&report);
        }
        Command::Ood(c) => {
            let cfg = c.config(ExperimentKind::Ood)?;
            let report = run_ood_experiment(&cfg)?;
            report.save(&out_dir(&cfg, "ood"))?;
            print_metrics(&report);
        }
        Command::Bandit { common, horizon, deltas } => {
            let mut cfg = common.config(ExperimentKind::Bandit)?;
            if let Some(h) = horizon {
                cfg.bandit.horizon = h;
            }
            if let Some(d) = deltas {
                cfg.bandit.deltas = d;
            }
            let report = run_bandit_experiment(&cfg, BanditMethods::default())?;
            report.save(&out_dir(&cfg, "bandit"))?;
            println!("{:<8} {:<10} {:>24} {:>24}", "delta", "method", "norm_regret", "simple_regret");
            for s in &report.summary {
                println!(
                    "{:<8} {:<10} {:>24} {:>24}",
                    s.delta,
                    s.method,
                    s.norm_regret.to_string(),
                    s.simple_regret.to_string()
                );
            }
        }
        Command::Ablate(c) => {
            let cfg = c.config(ExperimentKind::Ablate)?;
            let report = run_ablation(&cfg)?;
            report.save(&out_dir(&cfg, "ablate"))?;
            println!("{:<8} {:>22} {:>22} {:>14}", "ratio", "nll", "rmse", "median_secs");
            for cell in &report.grid {
                println!(
                    "{:<8} {:>22} {:>22} {:>14.4}",
                    cell.ratio,
                    cell.nll.to_string(),
                    cell.rmse.to_string(),
                    cell.runtime_median_secs
                );
            }
        }
        Command::Toy1d(c) => {
            let cfg = c.config(ExperimentKind::Toy1d)?;
            let report = run_toy1d(&cfg)?;
            report.save(&out_dir(&cfg, "toy1d"))?;
            println!(
                "mean in-gap std: bll {:.4} rich {:.4} rich-sub {:.4} ntk {:.4}",
                report.mean_gap_std_bll, report.mean_gap_std_rich, report.mean_gap_std_rich_sub, report.mean_gap_std_ntk
            );
        }
        Command::Verify { common, mutate_equivalence } => {
            let cfg = common.config(ExperimentKind::Verify)?;
            let report = run_suite(&SuiteOptions { seed: cfg.seeds[0], mutate_equivalence })?;
            report.save(&out_dir(&cfg, "verify"))?;
            for g in &report.gates {
                let kind = if g.hard { "hard" } else { "info" };
                println!("{} {:<34} {kind} measured {:<12.4e} ({}) {:.1}s", g.status(), g.name, g.measured, g.threshold, g.elapsed_secs);
            }
            return Ok(report.all_hard_passed);
        }
        Command::Features(c) => {
            let cfg = c.config(ExperimentKind::Features)?;
            let cache = run_features(&cfg)?;
            let dir = out_dir(&cfg, "features");
            cache.save(&dir)?;
            println!(
                "{} rows, r = {}, hidden columns = {}, written to {}",
                cache.bundle.len(),
                cache.bundle.r(),
                cache.bundle.hidden.matrix().cols(),
                dir.display()
            );
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed: at least one hard gate did not pass");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let cli = Cli::parse_from([
            "richbll", "regress", "--seeds", "3,4", "--variant", "rich-sub", "--ratio", "0.5", "--sigma2", "0.2",
            "--sketch-q", "64",
        ]);
        let Command::Regress { common: c, .. } = cli.command else { panic!("wrong subcommand") };
        let cfg = c.config(ExperimentKind::Regress).unwrap();
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.variant, Variant::RichSub);
        assert_eq!(cfg.subsample_ratio, 0.5);
        assert_eq!(cfg.sigma2, NoisePolicy::Fixed(0.2));
        assert_eq!(cfg.sketch.as_ref().map(|s| s.q), Some(64));
    }

    #[test]
    fn bad_ratio_is_rejected() {
        let cli = Cli::parse_from(["richbll", "ablate", "--ratio", "1.5"]);
        let Command::Ablate(c) = cli.command else { panic!("wrong subcommand") };
        assert!(c.config(ExperimentKind::Ablate).is_err());
    }
}
