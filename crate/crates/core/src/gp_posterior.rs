//! Feature-space Gaussian posteriors.
//!
//! With transformed features `phi_L = L^T phi_r` the predictive covariance
//! of the rich posterior is
//!
//! ```text
//! S = Phi_L' (sigma^-2 * scale * Phi_L^T Phi_L + I_r)^-1 Phi_L'^T
//! ```
//!
//! where `scale = N / k` when the second-moment matrix is estimated from a
//! uniform subsample of `k` rows. `L = I` gives the plain Bayesian last layer.
//! The [`oracle`] submodule holds the kernel-space references used to check
//! these formulas.

use serde::{Deserialize, Serialize};

use crate::densela::{cholesky, gram, matmul, tri_solve, DenseMatrix, JitterPolicy, LowerTriangularFactor, Side};
use crate::error::{Error, Result};
use crate::transform::{selected_rows, RichTransform, SubsampleSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorVariant {
    Bll,
    RichBll,
    RichBllSub { k: usize },
}

/// Options for [`fit_posterior_with`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PosteriorOptions {
    pub subsample: Option<SubsampleSpec>,
    /// Permit `k < r` (rate experiments); the default refuses it.
    pub allow_k_below_r: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorModel {
    pub variant: PosteriorVariant,
    pub l: LowerTriangularFactor,
    pub noise_var: f64,
    /// Cholesky factor of `sigma^-2 * scale * Phi_L^T Phi_L + I_r`.
    pub inner: LowerTriangularFactor,
    pub n_train: usize,
    pub k_used: usize,
}

/// Symmetric predictive covariance block (`N' x N'`).
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceBlock(DenseMatrix);

impl CovarianceBlock {
    fn from_symmetric(mut m: DenseMatrix) -> Self {
        m.symmetrize();
        Self(m)
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.0
    }

    pub fn variances(&self) -> Vec<f64> {
        self.0.diag()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDist {
    pub mean: f64,
    pub variance: f64,
}

impl PredictiveDist {
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Fits the posterior on `phi_r_train`. `transform = None` gives the plain
/// last-layer posterior; a subsample switches to the rescaled `N/k` moment.
pub fn fit_posterior(
    phi_r_train: &DenseMatrix,
    transform: Option<&RichTransform>,
    noise_var: f64,
    subsample: Option<&SubsampleSpec>,
) -> Result<PosteriorModel> {
    let opts = PosteriorOptions { subsample: subsample.cloned(), allow_k_below_r: false };
    fit_posterior_with(phi_r_train, transform, noise_var, &opts)
}

pub fn fit_posterior_with(
    phi_r_train: &DenseMatrix,
    transform: Option<&RichTransform>,
    noise_var: f64,
    opts: &PosteriorOptions,
) -> Result<PosteriorModel> {
    if !(noise_var > 0.0) || !noise_var.is_finite() {
        return Err(Error::InvalidConfig(format!("noise variance must be > 0, got {noise_var}")));
    }
    let r = phi_r_train.cols();
    let l = match transform {
        Some(t) if t.r() != r => {
            return Err(Error::DimensionMismatch {
                op: "fit_posterior",
                detail: format!("transform dim {} vs feature dim {r}", t.r()),
            })
        }
        Some(t) => t.l.clone(),
        None => LowerTriangularFactor::identity(r),
    };
    let n = phi_r_train.rows();
    if let Some(spec) = &opts.subsample {
        if spec.k > n {
            return Err(Error::SubsampleTooLarge { k: spec.k, n });
        }
        if spec.k < r && !opts.allow_k_below_r {
            return Err(Error::SubsampleBelowDim { k: spec.k, r });
        }
    }
    let rows = selected_rows(n, opts.subsample.as_ref())?;
    let k = rows.len();
    let phi_l = matmul(&phi_r_train.select_rows(&rows), &l.to_dense())?;
    let scale = if opts.subsample.is_some() && k > 0 { n as f64 / k as f64 } else { 1.0 };
    let moment = gram(&phi_l);
    let inner_matrix = moment.scale(scale / noise_var).add_diag(1.0);
    let inner = cholesky(&inner_matrix, &JitterPolicy::default())?;
    let variant = match (transform, &opts.subsample) {
        (None, _) => PosteriorVariant::Bll,
        (Some(_), None) => PosteriorVariant::RichBll,
        (Some(_), Some(s)) => PosteriorVariant::RichBllSub { k: s.k },
    };
    Ok(PosteriorModel { variant, l, noise_var, inner, n_train: n, k_used: k })
}

impl PosteriorModel {
    pub fn r(&self) -> usize {
        self.l.dim()
    }

    /// `W = inner^-1 L^T Phi'^T` so that `S = W^T W`.
    fn whitened(&self, phi_r_test: &DenseMatrix) -> Result<DenseMatrix> {
        if phi_r_test.cols() != self.r() {
            return Err(Error::DimensionMismatch {
                op: "predictive_cov",
                detail: format!("test features have {} columns, posterior expects {}", phi_r_test.cols(), self.r()),
            });
        }
        let phi_l = matmul(phi_r_test, &self.l.to_dense())?;
        tri_solve(&self.inner, &phi_l.transpose(), Side::Lower)
    }

    /// Full predictive covariance over the test rows.
    pub fn predictive_cov(&self, phi_r_test: &DenseMatrix) -> Result<CovarianceBlock> {
        let w = self.whitened(phi_r_test)?;
        Ok(CovarianceBlock::from_symmetric(gram(&w)))
    }

    /// Diagonal of [`predictive_cov`](Self::predictive_cov) only.
    pub fn predictive_var(&self, phi_r_test: &DenseMatrix) -> Result<Vec<f64>> {
        let w = self.whitened(phi_r_test)?;
        let mut out = vec![0.0; w.cols()];
        for i in 0..w.rows() {
            for (o, v) in out.iter_mut().zip(w.row(i)) {
                *o += v * v;
            }
        }
        Ok(out)
    }

    /// Gaussian predictive distribution with the backbone output as mean.
    pub fn predict(&self, backbone_mean: f64, phi_r_row: &[f64], include_noise: bool) -> Result<PredictiveDist> {
        let row = DenseMatrix::from_vec(1, phi_r_row.len(), phi_r_row.to_vec())?;
        let var = self.predictive_var(&row)?[0].max(0.0);
        Ok(PredictiveDist { mean: backbone_mean, variance: if include_noise { var + self.noise_var } else { var } })
    }

    /// The matrix `inner` was factorized from.
    pub fn inner_matrix(&self) -> DenseMatrix {
        self.inner.reconstruct()
    }
}

/// Kernel-space reference computations (dense `N x N` inversions).
pub mod oracle {
    use super::*;
    use crate::densela::{matmul_nt, outer_gram};

    pub const MAX_ORACLE_ROWS: usize = 2000;

    /// `k_ss - k_sx (k_xx + sigma^2 I)^-1 k_xs`.
    pub fn gp_cov_from_kernels(
        k_xx: &DenseMatrix,
        k_xs: &DenseMatrix,
        k_ss: &DenseMatrix,
        noise_var: f64,
    ) -> Result<CovarianceBlock> {
        let n = k_xx.rows();
        if n > MAX_ORACLE_ROWS {
            return Err(Error::SizeCapExceeded { what: "oracle training set", size: n, cap: MAX_ORACLE_ROWS });
        }
        if n == 0 {
            return Ok(CovarianceBlock::from_symmetric(k_ss.clone()));
        }
        let chol = cholesky(&k_xx.add_diag(noise_var), &JitterPolicy::default())?;
        let v = tri_solve(&chol, k_xs, Side::Lower)?;
        Ok(CovarianceBlock::from_symmetric(k_ss.sub(&gram(&v))))
    }

    /// Exact NTK-GP predictive covariance from full parameter gradients.
    pub fn ntk_gp_oracle(phi_p_train: &DenseMatrix, phi_p_test: &DenseMatrix, noise_var: f64) -> Result<CovarianceBlock> {
        if phi_p_train.rows() > MAX_ORACLE_ROWS {
            return Err(Error::SizeCapExceeded {
                what: "oracle training set",
                size: phi_p_train.rows(),
                cap: MAX_ORACLE_ROWS,
            });
        }
        let k_xx = outer_gram(phi_p_train);
        let k_xs = if phi_p_train.rows() == 0 {
            DenseMatrix::zeros(0, phi_p_test.rows())
        } else {
            matmul_nt(phi_p_train, phi_p_test)?
        };
        let k_ss = outer_gram(phi_p_test);
        gp_cov_from_kernels(&k_xx, &k_xs, &k_ss, noise_var)
    }

    /// GP covariance with kernel `k^B(x, x') = phi_r(x)^T (B^T B) phi_r(x')`.
    pub fn kernel_space_cov(
        phi_r_train: &DenseMatrix,
        phi_r_test: &DenseMatrix,
        btb: &DenseMatrix,
        noise_var: f64,
    ) -> Result<CovarianceBlock> {
        let tr = matmul(phi_r_train, btb)?;
        let ts = matmul(phi_r_test, btb)?;
        let k_xx = matmul_nt(&tr, phi_r_train)?;
        let mut k_xx = k_xx;
        k_xx.symmetrize();
        let k_xs = matmul_nt(&tr, phi_r_test)?;
        let mut k_ss = matmul_nt(&ts, phi_r_test)?;
        k_ss.symmetrize();
        gp_cov_from_kernels(&k_xx, &k_xs, &k_ss, noise_var)
    }

    /// Parameter-space Woodbury form `Phi' (sigma^-2 Phi^T Phi + I_p)^-1 Phi'^T`.
    pub fn weight_space_cov(phi_train: &DenseMatrix, phi_test: &DenseMatrix, noise_var: f64) -> Result<CovarianceBlock> {
        let precision = gram(phi_train).scale(1.0 / noise_var).add_diag(1.0);
        let chol = cholesky(&precision, &JitterPolicy::none())?;
        let w = tri_solve(&chol, &phi_test.transpose(), Side::Lower)?;
        Ok(CovarianceBlock::from_symmetric(gram(&w)))
    }
}
