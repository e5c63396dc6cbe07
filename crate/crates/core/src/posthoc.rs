//! Post-hoc posterior construction from a trained backbone.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneModel;
use crate::densela::DenseMatrix;
use crate::error::{Error, Result};
use crate::gp_posterior::{fit_posterior, PosteriorModel};
use crate::ntk_features::{extract_last_layer, HiddenMode};
use crate::transform::{fit_transform_from_model, RichTransform, SubsampleSpec};

/// Posterior family: plain last layer, rich, or rich with subsampled rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "bll")]
    Bll,
    #[default]
    #[serde(rename = "rich")]
    Rich,
    #[serde(rename = "rich-sub")]
    RichSub,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bll" => Ok(Variant::Bll),
            "rich" => Ok(Variant::Rich),
            "rich-sub" => Ok(Variant::RichSub),
            other => Err(Error::InvalidConfig(format!("unknown variant {other:?} (bll|rich|rich-sub)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Bll => "bll",
            Variant::Rich => "rich",
            Variant::RichSub => "rich-sub",
        })
    }
}

/// A fitted posterior plus the transform behind it (`None` for BLL).
#[derive(Clone, Debug)]
pub struct FittedPosterior {
    pub posterior: PosteriorModel,
    pub transform: Option<RichTransform>,
}

impl FittedPosterior {
    /// Epistemic variances at `inputs`.
    pub fn variances(&self, model: &BackboneModel, inputs: &DenseMatrix) -> Result<Vec<f64>> {
        self.posterior.predictive_var(&extract_last_layer(model, inputs))
    }
}

/// Fits `variant` on `inputs`. A subsample (required for `RichSub`) selects
/// the rows used for both the transform and the rescaled second moment.
pub fn fit_variant(
    model: &BackboneModel,
    inputs: &DenseMatrix,
    variant: Variant,
    noise_var: f64,
    ridge: f64,
    subsample: Option<&SubsampleSpec>,
    mode: &HiddenMode,
) -> Result<FittedPosterior> {
    let phi_r = extract_last_layer(model, inputs);
    match variant {
        Variant::Bll => {
            let posterior = fit_posterior(&phi_r, None, noise_var, subsample)?;
            Ok(FittedPosterior { posterior, transform: None })
        }
        Variant::Rich | Variant::RichSub => {
            if variant == Variant::RichSub && subsample.is_none() {
                return Err(Error::InvalidConfig("rich-sub needs a subsample".into()));
            }
            let transform = fit_transform_from_model(model, inputs, 0, ridge, subsample, mode)?;
            let posterior = fit_posterior(&phi_r, Some(&transform), noise_var, subsample)?;
            Ok(FittedPosterior { posterior, transform: Some(transform) })
        }
    }
}
