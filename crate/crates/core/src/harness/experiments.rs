//! Regression, OOD, ablation, toy and bandit experiment drivers.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{init_model, mse, train_with, BackboneConfig, BackboneModel, LabeledDataset};
use crate::bandit::{run_bandit, AgentSpec, PolicySpec, RegretTrace};
use crate::densela::DenseMatrix;
use crate::error::{Error, Result};
use crate::gp_posterior::{oracle, PredictiveDist};
use crate::harness::config::{DatasetSpec, ExperimentConfig, NoisePolicy, Variant, SIGMA2_GRID};
use crate::harness::data::{read_table, split_standardize, SplitData, SyntheticSpec};
use crate::harness::metrics::{auroc, mean_nll, median, rmse, MeanSe};
use crate::harness::report::{save_json, MetricReport, MetricRow};
use crate::ntk_features::{extract_bundle, extract_last_layer, FeatureBundle, HiddenMode};
use crate::posthoc::{fit_variant, FittedPosterior};
use crate::transform::{fit_transform, RichTransform, SubsampleSpec};

const SUBSAMPLE_SALT: u64 = 0x5EED_5AB5;
const SHUFFLE_SALT: u64 = 1_000_003;

/// Backbone trained for one seed: validation-selected epochs, then
/// retrained on train + val.
#[derive(Clone, Debug)]
pub struct SeedFit {
    pub seed: u64,
    pub split: SplitData,
    pub selection_model: BackboneModel,
    pub final_model: BackboneModel,
    pub epochs: usize,
    pub val_mse: f64,
    pub train_secs: f64,
}

impl SeedFit {
    pub fn train_val(&self) -> LabeledDataset {
        self.split.train.concat(&self.split.val).expect("same shapes")
    }
}

fn backbone_config(cfg: &ExperimentConfig, input_dim: usize, seed: u64) -> BackboneConfig {
    let mut b = BackboneConfig::new(input_dim, cfg.backbone.hidden_widths.clone());
    b.activation = cfg.backbone.activation;
    b.init_scale = cfg.backbone.init_scale;
    b.seed = seed;
    b
}

pub fn hidden_mode(cfg: &ExperimentConfig) -> HiddenMode {
    match &cfg.sketch {
        Some(s) => HiddenMode::Sketched(s.clone()),
        None => HiddenMode::default(),
    }
}

/// Trains with validation RMSE checked every `eval_every` epochs (ties keep
/// the earlier epoch), then retrains from the same initialization on
/// train + val for the selected epoch count.
pub fn train_seed(cfg: &ExperimentConfig, data: &LabeledDataset, seed: u64) -> Result<SeedFit> {
    let start = Instant::now();
    let split = split_standardize(data, cfg.split, seed)?;
    let train_spec = cfg.effective_train();
    let init = init_model(&backbone_config(cfg, data.inputs.cols(), seed))?;
    let tc = train_spec.to_train_config(train_spec.max_epochs, seed.wrapping_add(SHUFFLE_SALT));
    let mut best: Option<(usize, f64, BackboneModel)> = None;
    train_with(&init, &split.train, &tc, |epoch, model, _| {
        if epoch % train_spec.eval_every == 0 || epoch == train_spec.max_epochs {
            let v = mse(model, &split.val);
            if best.as_ref().is_none_or(|b| v < b.1) {
                best = Some((epoch, v, model.clone()));
            }
        }
    })?;
    let (epochs, val_mse, selection_model) = best.expect("at least one evaluation");
    let combined = split.train.concat(&split.val)?;
    let (final_model, _) = train_with(&init, &combined, &train_spec.to_train_config(epochs, tc.seed), |_, _, _| {})?;
    Ok(SeedFit { seed, split, selection_model, final_model, epochs, val_mse, train_secs: start.elapsed().as_secs_f64() })
}

fn subsample_for(variant: Variant, n: usize, ratio: f64, seed: u64) -> Option<SubsampleSpec> {
    (variant == Variant::RichSub).then(|| SubsampleSpec::from_ratio(n, ratio, seed ^ SUBSAMPLE_SALT))
}

fn predictive(model: &BackboneModel, post: &FittedPosterior, x: &DenseMatrix) -> Result<Vec<PredictiveDist>> {
    let means = model.predict_batch(x).into_vec();
    let vars = post.variances(model, x)?;
    let s2 = post.posterior.noise_var;
    Ok(means.into_iter().zip(vars).map(|(mean, v)| PredictiveDist { mean, variance: v.max(0.0) + s2 }).collect())
}

/// Observation noise for one method under the configured policy.
pub fn select_noise(cfg: &ExperimentConfig, fit: &SeedFit, variant: Variant, ratio: f64) -> Result<f64> {
    match cfg.sigma2 {
        NoisePolicy::Fixed(v) => Ok(v),
        NoisePolicy::Auto => Ok(fit.val_mse.max(1e-12)),
        NoisePolicy::Grid => {
            let train = &fit.split.train;
            let sub = subsample_for(variant, train.len(), ratio, fit.seed);
            let ys = fit.split.val.targets.as_slice();
            let mut best = (f64::INFINITY, SIGMA2_GRID[0]);
            for s2 in SIGMA2_GRID {
                let post = fit_variant(&fit.selection_model, &train.inputs, variant, s2, cfg.ridge, sub.as_ref(), &hidden_mode(cfg))?;
                let nll = mean_nll(ys, &predictive(&fit.selection_model, &post, &fit.split.val.inputs)?);
                if nll < best.0 {
                    best = (nll, s2);
                }
            }
            Ok(best.1)
        }
    }
}

/// Fitted posterior on train + val with its wall time (minimum over
/// `repeats` identical fits).
pub fn fit_method(
    cfg: &ExperimentConfig,
    fit: &SeedFit,
    variant: Variant,
    ratio: f64,
    noise_var: f64,
    repeats: usize,
) -> Result<(FittedPosterior, f64)> {
    let x = fit.train_val().inputs;
    let sub = subsample_for(variant, x.rows(), ratio, fit.seed);
    let mut best_time = f64::INFINITY;
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let post = fit_variant(&fit.final_model, &x, variant, noise_var, cfg.ridge, sub.as_ref(), &hidden_mode(cfg))?;
        best_time = best_time.min(t.elapsed().as_secs_f64());
        out = Some(post);
    }
    Ok((out.expect("repeats >= 1"), best_time))
}

fn evaluate(
    cfg: &ExperimentConfig,
    fit: &SeedFit,
    variant: Variant,
    ratio: f64,
    label: String,
    repeats: usize,
) -> Result<(MetricRow, FittedPosterior)> {
    let noise_var = select_noise(cfg, fit, variant, ratio)?;
    let (post, secs) = fit_method(cfg, fit, variant, ratio, noise_var, repeats)?;
    let test = &fit.split.test;
    let dists = predictive(&fit.final_model, &post, &test.inputs)?;
    let ys = test.targets.as_slice();
    let means: Vec<f64> = dists.iter().map(|d| d.mean).collect();
    let row = MetricRow {
        seed: fit.seed,
        method: label,
        nll: mean_nll(ys, &dists),
        rmse: rmse(ys, &means),
        auroc: None,
        runtime_secs: secs,
        noise_var,
        epochs: fit.epochs,
    };
    Ok((row, post))
}

fn methods(cfg: &ExperimentConfig) -> Vec<Variant> {
    let mut m = vec![Variant::Bll];
    if cfg.variant != Variant::Bll {
        m.push(cfg.variant);
    }
    m
}

/// Test NLL / RMSE per seed for BLL and the configured variant.
pub fn run_regression_experiment(cfg: &ExperimentConfig) -> Result<MetricReport> {
    run_regression_with(cfg, &methods(cfg))
}

/// Test NLL / RMSE per seed for each listed variant on a shared backbone.
pub fn run_regression_with(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<MetricReport> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let fit = train_seed(cfg, &data, seed)?;
        for &v in variants {
            rows.push(evaluate(cfg, &fit, v, cfg.subsample_ratio, v.to_string(), 1)?.0);
        }
    }
    Ok(MetricReport::new("regress", cfg, rows))
}

/// Published test NLL means per dataset: `(name, rich, rich-sub, bll)`.
pub const UCI_REFERENCE_NLL: [(&str, f64, f64, f64); 5] = [
    ("boston", 2.61, 2.62, 2.78),
    ("concrete", 3.10, 3.10, 3.39),
    ("energy", 0.75, 0.78, 0.92),
    ("power", 2.78, 2.78, 2.82),
    ("wine", 1.00, 1.01, 1.03),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UciDistance {
    pub dataset: String,
    pub method: String,
    pub nll: MeanSe,
    pub reference_nll: f64,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UciReport {
    pub version: String,
    pub reports: Vec<MetricReport>,
    pub distances: Vec<UciDistance>,
    /// Datasets on which rich has the lower mean test NLL than bll.
    pub rich_wins: usize,
}

impl UciReport {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_json(&dir.join("summary.json"), self)?;
        for r in &self.reports {
            let name = match &r.config.profile {
                Some(p) => p.clone(),
                None => r.experiment.clone(),
            };
            r.save(&dir.join(name))?;
        }
        let mut w = csv::Writer::from_path(dir.join("distance_to_target.csv"))?;
        w.write_record(["dataset", "method", "nll_mean", "nll_se", "reference_nll", "distance"])?;
        for d in &self.distances {
            w.write_record([
                d.dataset.clone(),
                d.method.clone(),
                d.nll.mean.to_string(),
                d.nll.se.to_string(),
                d.reference_nll.to_string(),
                d.distance.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs bll, rich and rich-sub on every `<name>.csv` found in `dir` (target
/// = last column) with the named training profile, and reports the distance
/// of each mean test NLL to the published value.
pub fn run_uci_benchmark(base: &ExperimentConfig, dir: &Path) -> Result<UciReport> {
    let mut reports = Vec::new();
    let mut distances = Vec::new();
    let mut rich_wins = 0;
    for (name, rich, rich_sub, bll) in UCI_REFERENCE_NLL {
        let path = dir.join(format!("{name}.csv"));
        if !path.exists() {
            continue;
        }
        let target = read_table(&path)?.headers.last().cloned().ok_or(Error::EmptyDataset)?;
        let cfg = ExperimentConfig {
            dataset: DatasetSpec::Csv { path, target },
            profile: Some(name.to_string()),
            ..base.clone()
        };
        let report = run_regression_with(&cfg, &[Variant::Bll, Variant::Rich, Variant::RichSub])?;
        let mean = |m: &str| report.aggregate(m).map(|a| a.nll.mean).unwrap_or(f64::NAN);
        if mean("rich") < mean("bll") {
            rich_wins += 1;
        }
        for (method, reference) in [("rich", rich), ("rich-sub", rich_sub), ("bll", bll)] {
            if let Some(a) = report.aggregate(method) {
                distances.push(UciDistance {
                    dataset: name.into(),
                    method: method.into(),
                    nll: a.nll,
                    reference_nll: reference,
                    distance: a.nll.mean - reference,
                });
            }
        }
        reports.push(report);
    }
    if reports.is_empty() {
        return Err(Error::InvalidConfig(format!("no <dataset>.csv files found in {}", dir.display())));
    }
    Ok(UciReport { version: crate::VERSION.into(), reports, distances, rich_wins })
}

/// Where OOD inputs come from.
#[derive(Clone, Debug)]
pub enum OodSource {
    /// Raw (unstandardized) inputs with the ID schema.
    Inputs(DenseMatrix),
    /// The ID test split shifted by this many training standard deviations
    /// in every coordinate.
    ShiftedTest(f64),
}

/// Resolves the OOD source from the config: an explicit dataset (schemas
/// must match), the cluster-shift companion set, or a 5-std shifted test copy.
pub fn ood_source(cfg: &ExperimentConfig, id: &LabeledDataset) -> Result<OodSource> {
    match (&cfg.ood_dataset, &cfg.dataset) {
        (Some(ood), _) => {
            if let (DatasetSpec::Csv { path: a, .. }, DatasetSpec::Csv { path: b, .. }) = (&cfg.dataset, ood) {
                let (ha, hb) = (read_table(a)?.headers, read_table(b)?.headers);
                if ha != hb {
                    return Err(Error::SchemaMismatch(format!("{ha:?} vs {hb:?}")));
                }
            }
            let data = ood.load()?;
            if data.inputs.cols() != id.inputs.cols() {
                return Err(Error::SchemaMismatch(format!(
                    "{} input columns vs {}",
                    data.inputs.cols(),
                    id.inputs.cols()
                )));
            }
            Ok(OodSource::Inputs(data.inputs))
        }
        (None, DatasetSpec::Synthetic(s @ SyntheticSpec::ClusterShift { n, .. })) => {
            let test_n = ((1.0 - cfg.split[0] - cfg.split[1]) * *n as f64).round().max(1.0) as usize;
            Ok(OodSource::Inputs(s.generate_ood(test_n).expect("cluster shift").inputs))
        }
        (None, _) => Ok(OodSource::ShiftedTest(5.0)),
    }
}

/// Posterior variance as OOD score; AUROC of ID test vs OOD per seed.
pub fn run_ood_experiment(cfg: &ExperimentConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    let source = ood_source(cfg, &data)?;
    run_ood_with(cfg, &data, &source)
}

pub fn run_ood_with(cfg: &ExperimentConfig, data: &LabeledDataset, source: &OodSource) -> Result<MetricReport> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let fit = train_seed(cfg, data, seed)?;
        let test_x = &fit.split.test.inputs;
        let ood_x = match source {
            OodSource::Inputs(x) => fit.split.stats.apply_inputs(x),
            OodSource::ShiftedTest(s) => DenseMatrix::from_fn(test_x.rows(), test_x.cols(), |i, j| test_x.get(i, j) + s),
        };
        let mut vs = methods(cfg);
        if !vs.contains(&Variant::Rich) {
            vs.push(Variant::Rich);
        }
        for v in vs {
            let (mut row, post) = evaluate(cfg, &fit, v, cfg.subsample_ratio, v.to_string(), 1)?;
            let id_scores = post.variances(&fit.final_model, test_x)?;
            let ood_scores = post.variances(&fit.final_model, &ood_x)?;
            row.auroc = Some(auroc(&id_scores, &ood_scores)?);
            rows.push(row);
        }
        if cfg.ood_oracle {
            rows.push(ntk_oracle_row(cfg, &fit, &ood_x)?);
        }
    }
    Ok(MetricReport::new("ood", cfg, rows))
}

/// Full-gradient GP reference for the OOD table (`method = "ntk-oracle"`).
fn ntk_oracle_row(cfg: &ExperimentConfig, fit: &SeedFit, ood_x: &DenseMatrix) -> Result<MetricRow> {
    let train = fit.train_val();
    if train.len() > oracle::MAX_ORACLE_ROWS {
        return Err(Error::SizeCapExceeded { what: "ntk oracle rows", size: train.len(), cap: oracle::MAX_ORACLE_ROWS });
    }
    let model = &fit.final_model;
    let noise_var = select_noise(cfg, fit, Variant::Bll, 1.0)?;
    let t = Instant::now();
    let phi_train = model.full_gradients_batch(&train.inputs, 0);
    let test = &fit.split.test;
    let id_var = oracle::ntk_gp_oracle(&phi_train, &model.full_gradients_batch(&test.inputs, 0), noise_var)?.variances();
    let secs = t.elapsed().as_secs_f64();
    let ood_var = oracle::ntk_gp_oracle(&phi_train, &model.full_gradients_batch(ood_x, 0), noise_var)?.variances();
    let means = model.predict_batch(&test.inputs).into_vec();
    let dists: Vec<PredictiveDist> =
        means.iter().zip(&id_var).map(|(&mean, v)| PredictiveDist { mean, variance: v.max(0.0) + noise_var }).collect();
    let ys = test.targets.as_slice();
    Ok(MetricRow {
        seed: fit.seed,
        method: "ntk-oracle".into(),
        nll: mean_nll(ys, &dists),
        rmse: rmse(ys, &means),
        auroc: Some(auroc(&id_var, &ood_var)?),
        runtime_secs: secs,
        noise_var,
        epochs: fit.epochs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub ratio: f64,
    pub nll: MeanSe,
    pub rmse: MeanSe,
    pub runtime_median_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub report: MetricReport,
    pub grid: Vec<AblationCell>,
}

impl AblationReport {
    /// Largest minus smallest seed-mean NLL across ratios.
    pub fn nll_spread(&self) -> f64 {
        let means: Vec<f64> = self.grid.iter().map(|c| c.nll.mean).collect();
        means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - means.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.report.save(dir)?;
        save_json(&dir.join("ablation.json"), self)?;
        let mut w = csv::Writer::from_path(dir.join("ablation_grid.csv"))?;
        w.write_record(["ratio", "nll_mean", "nll_se", "rmse_mean", "rmse_se", "runtime_median_secs"])?;
        for c in &self.grid {
            w.write_record([c.ratio, c.nll.mean, c.nll.se, c.rmse.mean, c.rmse.se, c.runtime_median_secs].map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn ratio_label(ratio: f64) -> String {
    format!("rich-sub@{ratio}")
}

/// Subsampled posterior per ratio on shared seeds and shared backbones; the
/// full rich posterior and BLL are reported alongside.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationReport> {
    cfg.validate()?;
    if cfg.ablation_ratios.is_empty() {
        return Err(Error::InvalidConfig("ablation_ratios is empty".into()));
    }
    let data = cfg.dataset.load()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let fit = train_seed(cfg, &data, seed)?;
        rows.push(evaluate(cfg, &fit, Variant::Bll, 1.0, "bll".into(), 3)?.0);
        rows.push(evaluate(cfg, &fit, Variant::Rich, 1.0, "rich".into(), 3)?.0);
        for &ratio in &cfg.ablation_ratios {
            rows.push(evaluate(cfg, &fit, Variant::RichSub, ratio, ratio_label(ratio), 3)?.0);
        }
    }
    let report = MetricReport::new("ablate", cfg, rows);
    let grid = cfg
        .ablation_ratios
        .iter()
        .map(|&ratio| {
            let label = ratio_label(ratio);
            let agg = report.aggregate(&label).expect("rows for every ratio");
            let times: Vec<f64> = report.method_rows(&label).iter().map(|r| r.runtime_secs).collect();
            AblationCell { ratio, nll: agg.nll, rmse: agg.rmse, runtime_median_secs: median(&times) }
        })
        .collect();
    Ok(AblationReport { report, grid })
}

/// One seed of the 1-D toy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySeed {
    pub seed: u64,
    pub noise_var: f64,
    /// Mean epistemic std over grid points outside the training support.
    pub gap_std_bll: f64,
    pub gap_std_rich: f64,
    pub gap_std_rich_sub: f64,
    pub gap_std_ntk: f64,
    pub bands: Vec<ToyBandRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyBandRow {
    pub x: f64,
    pub truth: f64,
    pub mean: f64,
    pub std_bll: f64,
    pub std_rich: f64,
    pub std_rich_sub: f64,
    pub std_ntk: f64,
    pub in_gap: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<ToySeed>,
    pub mean_gap_std_bll: f64,
    pub mean_gap_std_rich: f64,
    pub mean_gap_std_rich_sub: f64,
    pub mean_gap_std_ntk: f64,
}

impl ToyReport {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_json(&dir.join("summary.json"), self)?;
        let mut w = csv::Writer::from_path(dir.join("bands.csv"))?;
        w.write_record(["seed", "x", "truth", "mean", "std_bll", "std_rich", "std_rich_sub", "std_ntk", "in_gap"])?;
        for s in &self.seeds {
            for b in &s.bands {
                w.write_record([
                    s.seed.to_string(),
                    b.x.to_string(),
                    b.truth.to_string(),
                    b.mean.to_string(),
                    b.std_bll.to_string(),
                    b.std_rich.to_string(),
                    b.std_rich_sub.to_string(),
                    b.std_ntk.to_string(),
                    u8::from(b.in_gap).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Sinusoid-with-gap toy: every posterior plus the full-gradient GP oracle
/// on a 1-D grid. Inputs stay unstandardized so the gap keeps its meaning.
pub fn run_toy1d(cfg: &ExperimentConfig) -> Result<ToyReport> {
    cfg.validate()?;
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let spec = match cfg.dataset {
            DatasetSpec::Synthetic(SyntheticSpec::Sinusoid { n, noise_std, .. }) => SyntheticSpec::Sinusoid { n, noise_std, seed },
            _ => SyntheticSpec::Sinusoid { n: 200, noise_std: 0.1, seed },
        };
        let raw = spec.generate();
        let target_mean = raw.targets.as_slice().iter().sum::<f64>() / raw.len() as f64;
        let data = LabeledDataset::new(raw.inputs.clone(), raw.targets.as_slice().iter().map(|y| y - target_mean).collect::<Vec<_>>().into_col())?;
        let init = init_model(&backbone_config(cfg, 1, seed))?;
        let train_spec = cfg.effective_train();
        let (model, _) = train_with(&init, &data, &train_spec.to_train_config(cfg.toy.epochs, seed.wrapping_add(SHUFFLE_SALT)), |_, _, _| {})?;
        let noise_var = match cfg.sigma2 {
            NoisePolicy::Fixed(v) => v,
            _ => mse(&model, &data).max(1e-6),
        };
        let mode = hidden_mode(cfg);
        let n = data.len();
        let ridge = cfg.toy.ridge;
        let bll = fit_variant(&model, &data.inputs, Variant::Bll, noise_var, ridge, None, &mode)?;
        let rich = fit_variant(&model, &data.inputs, Variant::Rich, noise_var, ridge, None, &mode)?;
        let sub = SubsampleSpec::from_ratio(n, cfg.subsample_ratio, seed ^ SUBSAMPLE_SALT);
        let rich_sub = fit_variant(&model, &data.inputs, Variant::RichSub, noise_var, ridge, Some(&sub), &mode)?;
        let t = &cfg.toy;
        let grid = DenseMatrix::from_fn(t.grid_points, 1, |i, _| {
            t.grid_min + (t.grid_max - t.grid_min) * i as f64 / (t.grid_points.max(2) - 1) as f64
        });
        let ntk = oracle::ntk_gp_oracle(&model.full_gradients_batch(&data.inputs, 0), &model.full_gradients_batch(&grid, 0), noise_var)?
            .variances();
        let means = model.predict_batch(&grid).into_vec();
        let vb = bll.variances(&model, &grid)?;
        let vr = rich.variances(&model, &grid)?;
        let vs = rich_sub.variances(&model, &grid)?;
        let sd = |v: f64| v.max(0.0).sqrt();
        let bands: Vec<ToyBandRow> = (0..grid.rows())
            .map(|i| {
                let x = grid.get(i, 0);
                ToyBandRow {
                    x,
                    truth: crate::harness::data::sinusoid(x),
                    mean: means[i] + target_mean,
                    std_bll: sd(vb[i]),
                    std_rich: sd(vr[i]),
                    std_rich_sub: sd(vs[i]),
                    std_ntk: sd(ntk[i]),
                    in_gap: !(1.0..=3.0).contains(&x.abs()),
                }
            })
            .collect();
        let gap: Vec<&ToyBandRow> = bands.iter().filter(|b| b.in_gap).collect();
        let avg = |f: &dyn Fn(&ToyBandRow) -> f64| gap.iter().map(|b| f(b)).sum::<f64>() / gap.len().max(1) as f64;
        seeds.push(ToySeed {
            seed,
            noise_var,
            gap_std_bll: avg(&|b| b.std_bll),
            gap_std_rich: avg(&|b| b.std_rich),
            gap_std_rich_sub: avg(&|b| b.std_rich_sub),
            gap_std_ntk: avg(&|b| b.std_ntk),
            bands,
        });
    }
    let mean = |f: &dyn Fn(&ToySeed) -> f64| seeds.iter().map(f).sum::<f64>() / seeds.len() as f64;
    Ok(ToyReport {
        version: crate::VERSION.into(),
        config: cfg.clone(),
        mean_gap_std_bll: mean(&|s| s.gap_std_bll),
        mean_gap_std_rich: mean(&|s| s.gap_std_rich),
        mean_gap_std_rich_sub: mean(&|s| s.gap_std_rich_sub),
        mean_gap_std_ntk: mean(&|s| s.gap_std_ntk),
        seeds,
    })
}

trait IntoCol {
    fn into_col(self) -> DenseMatrix;
}

impl IntoCol for Vec<f64> {
    fn into_col(self) -> DenseMatrix {
        let n = self.len();
        DenseMatrix::from_vec(n, 1, self).expect("finite targets")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditResult {
    pub delta: f64,
    pub seed: u64,
    pub method: String,
    pub final_norm_regret: f64,
    pub final_cum_regret: f64,
    pub simple_regret: f64,
    pub runtime_secs: f64,
    #[serde(skip)]
    pub trace: RegretTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditMethodSummary {
    pub delta: f64,
    pub method: String,
    pub norm_regret: MeanSe,
    pub simple_regret: MeanSe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditReport {
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub results: Vec<BanditResult>,
    pub summary: Vec<BanditMethodSummary>,
}

impl BanditReport {
    pub fn summary_for(&self, delta: f64, method: &str) -> Option<&BanditMethodSummary> {
        self.summary.iter().find(|s| s.delta == delta && s.method == method)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_json(&dir.join("summary.json"), self)?;
        for r in &self.results {
            r.trace.save_csv(&dir.join(format!("trace_{}_delta{}_seed{}.csv", r.method, r.delta, r.seed)))?;
        }
        Ok(())
    }
}

/// Which bandit policies to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BanditMethods {
    pub configured: bool,
    pub bll: bool,
    pub uniform: bool,
}

impl Default for BanditMethods {
    fn default() -> Self {
        Self { configured: true, bll: true, uniform: true }
    }
}

/// Thompson agents (configured variant and BLL) and a uniform policy over
/// every `(delta, seed)`.
pub fn run_bandit_experiment(cfg: &ExperimentConfig, which: BanditMethods) -> Result<BanditReport> {
    cfg.validate()?;
    let b = &cfg.bandit;
    let mut results = Vec::new();
    for &delta in &b.deltas {
        for &seed in &cfg.seeds {
            let wheel = crate::bandit::WheelConfig { delta, seed, ..b.wheel.clone() };
            let mut policies: Vec<(String, PolicySpec)> = Vec::new();
            let agent = |variant: Variant| AgentSpec { variant, seed, ..b.agent.clone() };
            if which.configured {
                policies.push((b.agent.variant.to_string(), PolicySpec::Thompson(agent(b.agent.variant))));
            }
            if which.bll && b.agent.variant != Variant::Bll {
                policies.push(("bll".into(), PolicySpec::Thompson(agent(Variant::Bll))));
            }
            if which.uniform {
                policies.push(("uniform".into(), PolicySpec::Uniform { seed: seed.wrapping_add(SHUFFLE_SALT) }));
            }
            for (method, policy) in policies {
                let t = Instant::now();
                let run = run_bandit(&wheel, &policy, b.horizon)?;
                results.push(BanditResult {
                    delta,
                    seed,
                    method,
                    final_norm_regret: run.trace.final_norm_regret(),
                    final_cum_regret: run.trace.final_cum_regret(),
                    simple_regret: run.trace.simple_regret(b.horizon / 10),
                    runtime_secs: t.elapsed().as_secs_f64(),
                    trace: run.trace,
                });
            }
        }
    }
    let mut summary: Vec<BanditMethodSummary> = Vec::new();
    for r in &results {
        if summary.iter().any(|s| s.delta == r.delta && s.method == r.method) {
            continue;
        }
        let mine: Vec<&BanditResult> = results.iter().filter(|x| x.delta == r.delta && x.method == r.method).collect();
        summary.push(BanditMethodSummary {
            delta: r.delta,
            method: r.method.clone(),
            norm_regret: MeanSe::of(&mine.iter().map(|x| x.final_norm_regret).collect::<Vec<_>>()),
            simple_regret: MeanSe::of(&mine.iter().map(|x| x.simple_regret).collect::<Vec<_>>()),
        });
    }
    Ok(BanditReport { version: crate::VERSION.into(), config: cfg.clone(), seeds: cfg.seeds.clone(), results, summary })
}

/// Cached features for the first seed: checkpoint, feature bundle and the
/// fitted transform.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    pub model: BackboneModel,
    pub bundle: FeatureBundle,
    pub transform: RichTransform,
}

impl FeatureCache {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.save_json(&dir.join("model.json"))?;
        self.bundle.save(&dir.join("features.rbll"))?;
        self.transform.save_json(&dir.join("transform.json"))
    }
}

pub fn run_features(cfg: &ExperimentConfig) -> Result<FeatureCache> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    let fit = train_seed(cfg, &data, cfg.seeds[0])?;
    let x = fit.train_val().inputs;
    let bundle = extract_bundle(&fit.final_model, &x, 0, &hidden_mode(cfg), None)?;
    let transform = fit_transform(&bundle, cfg.ridge, None)?;
    debug_assert_eq!(extract_last_layer(&fit.final_model, &x).cols(), transform.r());
    Ok(FeatureCache { model: fit.final_model, bundle, transform })
}
