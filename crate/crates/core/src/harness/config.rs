//! Experiment configuration, mirrored 1:1 by the JSON config files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{Activation, AdamParams, TrainConfig};
use crate::bandit::{AgentSpec, WheelConfig};
use crate::error::{Error, Result};
use crate::harness::data::{self, SyntheticSpec};
use crate::backbone::LabeledDataset;
use crate::ntk_features::SketchConfig;
pub use crate::posthoc::Variant;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    #[default]
    Regress,
    Ood,
    Bandit,
    Ablate,
    Toy1d,
    Verify,
    Features,
}

pub const SIGMA2_GRID: [f64; 5] = [0.01, 0.05, 0.1, 0.5, 1.0];

/// Observation-noise policy: validation MSE, grid by validation NLL, or fixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NoiseRepr", into = "NoiseRepr")]
pub enum NoisePolicy {
    #[default]
    Auto,
    Grid,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NoiseRepr {
    Value(f64),
    Name(String),
}

impl TryFrom<NoiseRepr> for NoisePolicy {
    type Error = Error;
    fn try_from(r: NoiseRepr) -> Result<Self> {
        match r {
            NoiseRepr::Value(v) => NoisePolicy::fixed(v),
            NoiseRepr::Name(s) => s.parse(),
        }
    }
}

impl From<NoisePolicy> for NoiseRepr {
    fn from(p: NoisePolicy) -> Self {
        match p {
            NoisePolicy::Fixed(v) => NoiseRepr::Value(v),
            other => NoiseRepr::Name(other.to_string()),
        }
    }
}

impl NoisePolicy {
    fn fixed(v: f64) -> Result<Self> {
        if v > 0.0 && v.is_finite() {
            Ok(NoisePolicy::Fixed(v))
        } else {
            Err(Error::InvalidConfig(format!("sigma2 must be > 0, got {v}")))
        }
    }
}

impl FromStr for NoisePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(NoisePolicy::Auto),
            "grid" => Ok(NoisePolicy::Grid),
            other => other
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("sigma2 must be auto, grid or a number, got {other:?}")))
                .and_then(NoisePolicy::fixed),
        }
    }
}

impl fmt::Display for NoisePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoisePolicy::Auto => f.write_str("auto"),
            NoisePolicy::Grid => f.write_str("grid"),
            NoisePolicy::Fixed(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Csv { path: PathBuf, target: String },
    Synthetic(SyntheticSpec),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticSpec::Linear { n: 1000, d: 4, noise_std: 0.1, seed: 0 })
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<LabeledDataset> {
        match self {
            DatasetSpec::Csv { path, target } => data::load_csv(path, target),
            DatasetSpec::Synthetic(s) => Ok(s.generate()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSpec {
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub init_scale: f64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self { hidden_widths: vec![50, 50], activation: Activation::Relu, init_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub learning_rate: f64,
    /// Upper bound on epochs; the selected count comes from validation.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub eval_every: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self { learning_rate: 1e-3, max_epochs: 200, batch_size: 32, grad_clip: 1.0, eval_every: 10 }
    }
}

impl TrainSpec {
    pub fn to_train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs,
            batch_size: self.batch_size,
            grad_clip: self.grad_clip,
            adam: AdamParams::default(),
            seed,
        }
    }
}

/// Named dataset profile: `(name, epochs, batch size)`.
pub const UCI_PROFILES: [(&str, usize, usize); 5] =
    [("boston", 3000, 32), ("concrete", 3000, 32), ("energy", 2000, 32), ("power", 3000, 256), ("wine", 1000, 32)];

pub fn uci_profile(name: &str) -> Option<(usize, usize)> {
    let key = name.to_ascii_lowercase();
    UCI_PROFILES.iter().find(|p| p.0 == key).map(|p| (p.1, p.2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub grid_points: usize,
    pub grid_min: f64,
    pub grid_max: f64,
    pub epochs: usize,
    /// Transform ridge for the toy; 1-D ReLU features are nearly collinear.
    pub ridge: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self { grid_points: 201, grid_min: -5.0, grid_max: 5.0, epochs: 400, ridge: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BanditSpec {
    pub wheel: WheelConfig,
    pub agent: AgentSpec,
    pub horizon: usize,
    pub deltas: Vec<f64>,
}

impl Default for BanditSpec {
    fn default() -> Self {
        Self { wheel: WheelConfig::default(), agent: AgentSpec::default(), horizon: 2000, deltas: vec![0.5] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub dataset: DatasetSpec,
    /// Second dataset for OOD scoring; synthetic cluster-shift specs bring
    /// their own shifted copy when this is absent.
    pub ood_dataset: Option<DatasetSpec>,
    /// Also score OOD with the full-gradient GP (train + val <= 2000 rows).
    pub ood_oracle: bool,
    pub split: [f64; 3],
    pub seeds: Vec<u64>,
    pub backbone: BackboneSpec,
    pub train: TrainSpec,
    /// Named epoch/batch profile (boston, concrete, energy, power, wine).
    pub profile: Option<String>,
    pub variant: Variant,
    pub sigma2: NoisePolicy,
    pub ridge: f64,
    pub subsample_ratio: f64,
    pub ablation_ratios: Vec<f64>,
    pub sketch: Option<SketchConfig>,
    pub toy: ToySpec,
    pub bandit: BanditSpec,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Regress,
            dataset: DatasetSpec::default(),
            ood_dataset: None,
            ood_oracle: false,
            split: [0.72, 0.18, 0.10],
            seeds: vec![0],
            backbone: BackboneSpec::default(),
            train: TrainSpec::default(),
            profile: None,
            variant: Variant::Rich,
            sigma2: NoisePolicy::Auto,
            ridge: 0.0,
            subsample_ratio: 0.4,
            ablation_ratios: vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            sketch: None,
            toy: ToySpec::default(),
            bandit: BanditSpec::default(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.split.iter().any(|f| !(*f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("split fractions {:?} must sum to 1", self.split)));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be nonempty".into()));
        }
        if !(self.subsample_ratio > 0.0 && self.subsample_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!("subsample_ratio {} not in (0, 1]", self.subsample_ratio)));
        }
        if let Some(r) = self.ablation_ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::InvalidConfig(format!("ablation ratio {r} not in (0, 1]")));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::InvalidConfig("ridge must be >= 0".into()));
        }
        if self.train.eval_every == 0 || self.train.max_epochs == 0 {
            return Err(Error::InvalidConfig("eval_every and max_epochs must be >= 1".into()));
        }
        if let Some(p) = &self.profile {
            if uci_profile(p).is_none() {
                return Err(Error::InvalidConfig(format!("unknown profile {p:?}")));
            }
        }
        Ok(())
    }

    /// Training settings after applying the named profile, if any.
    pub fn effective_train(&self) -> TrainSpec {
        let mut t = self.train.clone();
        if let Some((epochs, batch)) = self.profile.as_deref().and_then(uci_profile) {
            t.max_epochs = epochs;
            t.batch_size = batch;
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_partial_configs() {
        let cfg = ExperimentConfig { sigma2: NoisePolicy::Fixed(0.05), variant: Variant::RichSub, ..Default::default() };
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"sigma2\":0.05") && s.contains("\"rich-sub\""));
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&s).unwrap(), cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"sigma2":"grid","seeds":[3,4]}"#).unwrap();
        assert_eq!(partial.sigma2, NoisePolicy::Grid);
        assert_eq!(partial.seeds, vec![3, 4]);
        assert_eq!(partial.split, [0.72, 0.18, 0.10]);
        let csv: ExperimentConfig =
            serde_json::from_str(r#"{"dataset":{"source":"csv","path":"a.csv","target":"y"}}"#).unwrap();
        assert!(matches!(csv.dataset, DatasetSpec::Csv { .. }));
    }

    #[test]
    fn validation_rules() {
        let bad = ExperimentConfig { split: [0.5, 0.5, 0.5], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig { seeds: vec![], ..Default::default() };
        assert!(bad.validate().is_err());
        assert!("-1".parse::<NoisePolicy>().is_err());
        assert!("banana".parse::<Variant>().is_err());
        assert_eq!("0.5".parse::<NoisePolicy>().unwrap(), NoisePolicy::Fixed(0.5));
    }

    #[test]
    fn profiles() {
        let cfg = ExperimentConfig { profile: Some("Power".into()), ..Default::default() };
        cfg.validate().unwrap();
        let t = cfg.effective_train();
        assert_eq!((t.max_epochs, t.batch_size), (3000, 256));
    }
}
