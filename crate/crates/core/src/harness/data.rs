//! Dataset ingestion, splitting, standardization and synthetic generators.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::LabeledDataset;
use crate::densela::DenseMatrix;
use crate::error::{Error, Result};

/// Numeric table with a header row.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub values: DenseMatrix,
}

/// Reads a numeric CSV with a header row. Rows with non-numeric or
/// non-finite cells are reported together by 0-based data row index.
pub fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut data = Vec::new();
    let mut bad = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let parsed: Option<Vec<f64>> = if record.len() == headers.len() {
            record.iter().map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite())).collect()
        } else {
            None
        };
        match parsed {
            Some(vals) => data.extend(vals),
            None => bad.push(i),
        }
        rows += 1;
    }
    if !bad.is_empty() {
        return Err(Error::BadRows { rows: bad });
    }
    if rows == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(Table { values: DenseMatrix::from_vec(rows, headers.len(), data)?, headers })
}

/// Loads a regression dataset: every column except `target_column` is an input.
pub fn load_csv(path: &Path, target_column: &str) -> Result<LabeledDataset> {
    let table = read_table(path)?;
    table_to_dataset(&table, target_column)
}

pub fn table_to_dataset(table: &Table, target_column: &str) -> Result<LabeledDataset> {
    let t = table
        .headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::MissingColumn { name: target_column.to_string(), available: table.headers.clone() })?;
    let n = table.values.rows();
    let d = table.values.cols() - 1;
    let inputs = DenseMatrix::from_fn(n, d, |i, j| table.values.get(i, if j < t { j } else { j + 1 }));
    let targets = DenseMatrix::from_fn(n, 1, |i, _| table.values.get(i, t));
    LabeledDataset::new(inputs, targets)
}

/// Per-feature statistics from the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub target_mean: f64,
    /// Columns with zero spread; their std was forced to 1.
    pub constant_columns: Vec<usize>,
}

impl StandardizationStats {
    pub fn fit(train: &LabeledDataset) -> Self {
        let n = train.len() as f64;
        let d = train.inputs.cols();
        let mut mean = vec![0.0; d];
        for i in 0..train.len() {
            for (m, v) in mean.iter_mut().zip(train.inputs.row(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for i in 0..train.len() {
            for ((s, v), m) in var.iter_mut().zip(train.inputs.row(i)).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let mut constant_columns = Vec::new();
        let std = var
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let s = v.sqrt();
                if s > 1e-12 {
                    s
                } else {
                    constant_columns.push(j);
                    1.0
                }
            })
            .collect();
        let target_mean = train.targets.as_slice().iter().sum::<f64>() / n;
        Self { mean, std, target_mean, constant_columns }
    }

    pub fn apply(&self, data: &LabeledDataset) -> LabeledDataset {
        let inputs = DenseMatrix::from_fn(data.len(), data.inputs.cols(), |i, j| {
            (data.inputs.get(i, j) - self.mean[j]) / self.std[j]
        });
        let targets = DenseMatrix::from_fn(data.len(), data.targets.cols(), |i, j| data.targets.get(i, j) - self.target_mean);
        LabeledDataset { inputs, targets }
    }

    pub fn apply_inputs(&self, x: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| (x.get(i, j) - self.mean[j]) / self.std[j])
    }
}

#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    pub stats: StandardizationStats,
    /// Original row indices of each split.
    pub indices: [Vec<usize>; 3],
}

/// Seeded shuffle, contiguous train/val/test split, then standardization
/// with training statistics.
pub fn split_standardize(data: &LabeledDataset, fractions: [f64; 3], seed: u64) -> Result<SplitData> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split fractions {fractions:?} must be >= 0 and sum to 1")));
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let train_idx = order[..n_train].to_vec();
    let val_idx = order[n_train..n_train + n_val].to_vec();
    let test_idx = order[n_train + n_val..].to_vec();
    if train_idx.is_empty() || val_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "split of {n} rows leaves an empty part ({} / {} / {})",
            train_idx.len(),
            val_idx.len(),
            test_idx.len()
        )));
    }
    let raw_train = data.select(&train_idx);
    let stats = StandardizationStats::fit(&raw_train);
    Ok(SplitData {
        train: stats.apply(&raw_train),
        val: stats.apply(&data.select(&val_idx)),
        test: stats.apply(&data.select(&test_idx)),
        stats,
        indices: [train_idx, val_idx, test_idx],
    })
}

/// Synthetic data generators shipped with the harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    /// `y = w.x + 0.5 sin(2 x_0) + noise` with Gaussian inputs.
    Linear { n: usize, d: usize, noise_std: f64, seed: u64 },
    /// 1-D sinusoid observed on `[-3, -1] U [1, 3]`, leaving a gap around 0.
    Sinusoid { n: usize, noise_std: f64, seed: u64 },
    /// Smooth nonlinear regression on a Gaussian cluster; the OOD copy is
    /// the same cluster shifted by `shift` standard deviations per coordinate.
    ClusterShift { n: usize, d: usize, noise_std: f64, shift: f64, seed: u64 },
}

impl SyntheticSpec {
    pub fn generate(&self) -> LabeledDataset {
        match *self {
            SyntheticSpec::Linear { n, d, noise_std, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w: Vec<f64> = (0..d).map(|j| 1.0 - 0.3 * j as f64).collect();
                let x = DenseMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
                let y = DenseMatrix::from_fn(n, 1, |i, _| {
                    let lin: f64 = x.row(i).iter().zip(&w).map(|(a, b)| a * b).sum();
                    let z: f64 = StandardNormal.sample(&mut rng);
                    lin + 0.5 * (2.0 * x.get(i, 0)).sin() + noise_std * z
                });
                LabeledDataset { inputs: x, targets: y }
            }
            SyntheticSpec::Sinusoid { n, noise_std, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = DenseMatrix::from_fn(n, 1, |_, _| {
                    let u: f64 = rng.random_range(1.0..3.0);
                    if rng.random_bool(0.5) {
                        u
                    } else {
                        -u
                    }
                });
                let y = DenseMatrix::from_fn(n, 1, |i, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sinusoid(x.get(i, 0)) + noise_std * z
                });
                LabeledDataset { inputs: x, targets: y }
            }
            SyntheticSpec::ClusterShift { n, d, noise_std, seed, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = DenseMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
                cluster_targets(x, noise_std, &mut rng)
            }
        }
    }

    /// Out-of-distribution companion set (cluster-shift only).
    pub fn generate_ood(&self, n_ood: usize) -> Option<LabeledDataset> {
        match *self {
            SyntheticSpec::ClusterShift { d, noise_std, shift, seed, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00D5_EED5);
                let x = DenseMatrix::from_fn(n_ood, d, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z + shift
                });
                Some(cluster_targets(x, noise_std, &mut rng))
            }
            _ => None,
        }
    }
}

pub fn sinusoid(x: f64) -> f64 {
    (2.0 * x).sin() + 0.3 * x
}

fn cluster_targets(x: DenseMatrix, noise_std: f64, rng: &mut ChaCha8Rng) -> LabeledDataset {
    let y = DenseMatrix::from_fn(x.rows(), 1, |i, _| {
        let row = x.row(i);
        let s: f64 = row.iter().enumerate().map(|(j, v)| (v + 0.5 * j as f64).sin()).sum();
        let z: f64 = StandardNormal.sample(rng);
        s + 0.25 * row[0] * row[row.len() - 1] + noise_std * z
    });
    LabeledDataset { inputs: x, targets: y }
}
