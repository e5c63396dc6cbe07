//! Report types and their JSON / CSV emission.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::MeanSe;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub seed: u64,
    pub method: String,
    pub nll: f64,
    pub rmse: f64,
    pub auroc: Option<f64>,
    pub runtime_secs: f64,
    pub noise_var: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: String,
    pub nll: MeanSe,
    pub rmse: MeanSe,
    pub auroc: Option<MeanSe>,
    pub runtime_secs: MeanSe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub experiment: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub rows: Vec<MetricRow>,
    pub aggregates: Vec<MethodAggregate>,
}

impl MetricReport {
    pub fn new(experiment: &str, config: &ExperimentConfig, rows: Vec<MetricRow>) -> Self {
        let mut methods: Vec<String> = Vec::new();
        for r in &rows {
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
        }
        let aggregates = methods
            .into_iter()
            .map(|method| {
                let mine: Vec<&MetricRow> = rows.iter().filter(|r| r.method == method).collect();
                let col = |f: &dyn Fn(&MetricRow) -> f64| MeanSe::of(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
                let auroc = if mine.iter().all(|r| r.auroc.is_some()) {
                    Some(col(&|r| r.auroc.unwrap_or(f64::NAN)))
                } else {
                    None
                };
                MethodAggregate {
                    nll: col(&|r| r.nll),
                    rmse: col(&|r| r.rmse),
                    runtime_secs: col(&|r| r.runtime_secs),
                    auroc,
                    method,
                }
            })
            .collect();
        Self { experiment: experiment.into(), version: crate::VERSION.into(), config: config.clone(), rows, aggregates }
    }

    pub fn aggregate(&self, method: &str) -> Option<&MethodAggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }

    /// Rows for one method in seed order.
    pub fn method_rows(&self, method: &str) -> Vec<&MetricRow> {
        self.rows.iter().filter(|r| r.method == method).collect()
    }

    pub fn save_rows_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["seed", "method", "nll", "rmse", "auroc", "runtime_secs", "noise_var", "epochs"])?;
        for r in &self.rows {
            w.write_record([
                r.seed.to_string(),
                r.method.clone(),
                r.nll.to_string(),
                r.rmse.to_string(),
                r.auroc.map_or(String::new(), |a| a.to_string()),
                r.runtime_secs.to_string(),
                r.noise_var.to_string(),
                r.epochs.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_aggregate_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method", "nll_mean", "nll_se", "rmse_mean", "rmse_se", "auroc_mean", "auroc_se", "n"])?;
        for a in &self.aggregates {
            w.write_record([
                a.method.clone(),
                a.nll.mean.to_string(),
                a.nll.se.to_string(),
                a.rmse.mean.to_string(),
                a.rmse.se.to_string(),
                a.auroc.map_or(String::new(), |m| m.mean.to_string()),
                a.auroc.map_or(String::new(), |m| m.se.to_string()),
                a.nll.n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `summary.json`, `rows.csv` and `aggregate.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_json(&dir.join("summary.json"), self)?;
        self.save_rows_csv(&dir.join("rows.csv"))?;
        self.save_aggregate_csv(&dir.join("aggregate.csv"))
    }
}

pub fn save_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}
