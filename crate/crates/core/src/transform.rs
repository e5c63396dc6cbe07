//! The rich feature transform.
//!
//! The hidden-block features are regressed onto the last-layer features,
//! `phi_m(x) ~ A phi_r(x)`, and the transform is the Cholesky factor `L` of
//! `B^T B = A^T A + I_r`. `A` itself is never needed: with
//! `M = phi_r (phi_r^T phi_r + ridge I)^-1` we have `A = phi_m^T M`, so
//! `A^T A = C^T C` for `C = H^T M` where `H` is either the exact hidden block
//! or its sketch `phi_m P` (then `C` is only `q x r`).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneModel;
use crate::densela::{
    cholesky, cholesky_solve, gram, matmul_tn, DenseMatrix, JitterPolicy, LowerTriangularFactor,
};
use crate::error::{Error, Result};
use crate::ntk_features::{
    extract_hidden_sketched, extract_last_layer, hidden_transpose_times, FeatureBundle, HiddenMode, SketchConfig,
};

/// Uniform subsample of `k` rows drawn without replacement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    pub k: usize,
    pub seed: u64,
}

impl SubsampleSpec {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, seed }
    }

    /// `k = max(1, round(ratio * n))`.
    pub fn from_ratio(n: usize, ratio: f64, seed: u64) -> Self {
        let k = ((ratio * n as f64).round() as usize).clamp(1, n.max(1));
        Self { k, seed }
    }
}

/// Partial Fisher-Yates: the first `k` entries of a seeded shuffle of `0..n`.
pub fn subsample_rows(n: usize, spec: &SubsampleSpec) -> Result<Vec<usize>> {
    if spec.k > n {
        return Err(Error::SubsampleTooLarge { k: spec.k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..spec.k {
        let j = rand::Rng::random_range(&mut rng, i..n);
        idx.swap(i, j);
    }
    idx.truncate(spec.k);
    Ok(idx)
}

/// Sorted subsample positions, or all of `0..n`.
pub(crate) fn selected_rows(n: usize, subsample: Option<&SubsampleSpec>) -> Result<Vec<usize>> {
    match subsample {
        None => Ok((0..n).collect()),
        Some(spec) => {
            let mut idx = subsample_rows(n, spec)?;
            idx.sort_unstable();
            Ok(idx)
        }
    }
}

fn normal_factor(phi_r: &DenseMatrix, ridge: f64) -> Result<LowerTriangularFactor> {
    if !(ridge >= 0.0) {
        return Err(Error::InvalidConfig(format!("ridge must be >= 0, got {ridge}")));
    }
    if phi_r.rows() < phi_r.cols() && ridge == 0.0 {
        return Err(Error::RankDeficient { rows: phi_r.rows(), dim: phi_r.cols() });
    }
    cholesky(&gram(phi_r).add_diag(ridge), &JitterPolicy::default())
}

/// `M = phi_r (phi_r^T phi_r + ridge I)^-1`, `N x r`.
fn solve_weights(phi_r: &DenseMatrix, ridge: f64) -> Result<DenseMatrix> {
    let l = normal_factor(phi_r, ridge)?;
    Ok(cholesky_solve(&l, &phi_r.transpose())?.transpose())
}

/// Least-squares map `A = phi_m^T phi_r (phi_r^T phi_r + ridge I)^-1` (`m x r`).
pub fn fit_a_exact(phi_m: &DenseMatrix, phi_r: &DenseMatrix, ridge: f64) -> Result<DenseMatrix> {
    if phi_m.rows() != phi_r.rows() {
        return Err(Error::DimensionMismatch {
            op: "fit_a_exact",
            detail: format!("{} hidden rows vs {} last-layer rows", phi_m.rows(), phi_r.rows()),
        });
    }
    let l = normal_factor(phi_r, ridge)?;
    let at = cholesky_solve(&l, &matmul_tn(phi_r, phi_m)?)?;
    Ok(at.transpose())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RichTransform {
    pub l: LowerTriangularFactor,
    pub ridge: f64,
    /// Dataset indices the transform was fitted on.
    pub fit_rows: Vec<usize>,
    pub sketch: Option<SketchConfig>,
    /// The `B^T B` that was factorized.
    pub gram_btb: DenseMatrix,
}

impl RichTransform {
    /// The transform for plain last-layer features (`L = I`).
    pub fn identity(r: usize) -> Self {
        Self {
            l: LowerTriangularFactor::identity(r),
            ridge: 0.0,
            fit_rows: Vec::new(),
            sketch: None,
            gram_btb: DenseMatrix::identity(r),
        }
    }

    pub fn r(&self) -> usize {
        self.l.dim()
    }

    /// `phi_L = phi_r L`, row-wise `L^T phi_r(x)`.
    pub fn apply(&self, phi_r: &DenseMatrix) -> Result<DenseMatrix> {
        crate::densela::matmul(phi_r, &self.l.to_dense())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    fn from_projection(c: &DenseMatrix, ridge: f64, fit_rows: Vec<usize>, sketch: Option<SketchConfig>) -> Result<Self> {
        let gram_btb = gram(c).add_diag(1.0);
        let l = cholesky(&gram_btb, &JitterPolicy::default())?;
        Ok(Self { l, ridge, fit_rows, sketch, gram_btb })
    }
}

/// Ridge applied to a `k`-row subsample of `n` rows: `ridge * k / n`, so the
/// subsampled normal equations match the rescaled full-data ones.
pub fn subsample_ridge(ridge: f64, k: usize, n: usize) -> f64 {
    if n == 0 {
        ridge
    } else {
        ridge * k as f64 / n as f64
    }
}

/// Fits the transform from a feature bundle, optionally on a uniform subsample
/// of its rows.
pub fn fit_transform(bundle: &FeatureBundle, ridge: f64, subsample: Option<&SubsampleSpec>) -> Result<RichTransform> {
    let rows = selected_rows(bundle.len(), subsample)?;
    let phi_r = bundle.phi_r.select_rows(&rows);
    let hidden = bundle.hidden.matrix().select_rows(&rows);
    let weights = solve_weights(&phi_r, subsample_ridge(ridge, rows.len(), bundle.len()))?;
    let c = matmul_tn(&hidden, &weights)?;
    let fit_rows = rows.iter().map(|&i| bundle.source_rows[i]).collect();
    RichTransform::from_projection(&c, ridge, fit_rows, bundle.hidden.sketch().cloned())
}

/// Fits the transform straight from a backbone without keeping the hidden
/// block in memory: exact mode streams `phi_m^T M` over row chunks, sketched
/// mode keeps only `phi_m P`.
pub fn fit_transform_from_model(
    model: &BackboneModel,
    inputs: &DenseMatrix,
    output_index: usize,
    ridge: f64,
    subsample: Option<&SubsampleSpec>,
    mode: &HiddenMode,
) -> Result<RichTransform> {
    let rows = selected_rows(inputs.rows(), subsample)?;
    let x = inputs.select_rows(&rows);
    let phi_r = extract_last_layer(model, &x);
    let weights = solve_weights(&phi_r, subsample_ridge(ridge, rows.len(), inputs.rows()))?;
    let (c, sketch) = match mode {
        HiddenMode::Exact { .. } => (hidden_transpose_times(model, &x, output_index, &weights)?, None),
        HiddenMode::Sketched(s) => {
            let h = extract_hidden_sketched(model, &x, output_index, s)?;
            (matmul_tn(&h, &weights)?, Some(s.clone()))
        }
    };
    RichTransform::from_projection(&c, ridge, rows, sketch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densela::{matmul, min_eigval};
    use crate::ntk_features::HiddenFeatures;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn bundle(phi_r: DenseMatrix, phi_m: DenseMatrix) -> FeatureBundle {
        let n = phi_r.rows();
        FeatureBundle { phi_r, hidden: HiddenFeatures::Exact(phi_m), source_rows: (0..n).collect() }
    }

    #[test]
    fn exact_linear_dependence_recovers_scaled_identity() {
        let r = 4;
        let phi_r = random(12, r, 1);
        // phi_m = (2 phi_r, 0, 0)
        let phi_m = DenseMatrix::from_fn(12, r + 2, |i, j| if j < r { 2.0 * phi_r.get(i, j) } else { 0.0 });
        let a = fit_a_exact(&phi_m, &phi_r, 0.0).unwrap();
        for i in 0..r + 2 {
            for j in 0..r {
                let want = if i == j { 2.0 } else { 0.0 };
                assert!((a.get(i, j) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rank_deficient_without_ridge() {
        let r = 5;
        let err = fit_a_exact(&random(r - 1, 7, 0), &random(r - 1, r, 1), 0.0);
        assert!(matches!(err, Err(Error::RankDeficient { .. })));
        assert!(fit_a_exact(&random(r - 1, 7, 0), &random(r - 1, r, 1), 1.0).is_ok());
    }

    #[test]
    fn zero_hidden_block_gives_identity() {
        let t = fit_transform(&bundle(random(10, 3, 2), DenseMatrix::zeros(10, 6)), 0.0, None).unwrap();
        assert_eq!(t.l.to_dense(), DenseMatrix::identity(3));
        assert_eq!(t.gram_btb, DenseMatrix::identity(3));
    }

    #[test]
    fn matches_direct_a_route() {
        let (n, m, r) = (40, 80, 6);
        let phi_r = random(n, r, 3);
        let phi_m = random(n, m, 4);
        let t = fit_transform(&bundle(phi_r.clone(), phi_m.clone()), 0.0, None).unwrap();
        let a = fit_a_exact(&phi_m, &phi_r, 0.0).unwrap();
        let want = gram(&a).add_diag(1.0);
        let got = t.l.reconstruct();
        assert!(got.sub(&want).max_abs() < 1e-8 * want.max_abs());
    }

    #[test]
    fn full_subsample_is_identical_to_no_subsample() {
        let b = bundle(random(30, 4, 5), random(30, 9, 6));
        let full = fit_transform(&b, 0.0, None).unwrap();
        let sub = fit_transform(&b, 0.0, Some(&SubsampleSpec::new(30, 77))).unwrap();
        assert_eq!(full, sub);
    }

    #[test]
    fn subsampled_ridge_is_rescaled() {
        let b = bundle(random(40, 4, 5), random(40, 9, 6));
        let spec = SubsampleSpec::new(10, 2);
        let sub = fit_transform(&b, 0.8, Some(&spec)).unwrap();
        let mut rows = subsample_rows(40, &spec).unwrap();
        rows.sort_unstable();
        let direct = fit_transform(&b.select(&rows), 0.2, None).unwrap();
        assert!(sub.gram_btb.sub(&direct.gram_btb).max_abs() < 1e-10 * direct.gram_btb.max_abs());
        assert_eq!(sub.ridge, 0.8);
    }

    #[test]
    fn subsample_rows_basics() {
        let mut perm = subsample_rows(10, &SubsampleSpec::new(10, 3)).unwrap();
        perm.sort_unstable();
        assert_eq!(perm, (0..10).collect::<Vec<_>>());
        assert_eq!(
            subsample_rows(50, &SubsampleSpec::new(7, 9)).unwrap(),
            subsample_rows(50, &SubsampleSpec::new(7, 9)).unwrap()
        );
        assert!(matches!(subsample_rows(3, &SubsampleSpec::new(4, 0)), Err(Error::SubsampleTooLarge { .. })));
    }

    #[test]
    fn subsample_inclusion_frequency() {
        let n = 20;
        let draws = 10_000;
        let hits = (0..draws)
            .filter(|&s| subsample_rows(n, &SubsampleSpec::new(n / 2, s as u64)).unwrap().contains(&0))
            .count();
        let freq = hits as f64 / draws as f64;
        assert!((freq - 0.5).abs() <= 0.02, "frequency {freq}");
    }

    #[test]
    fn streaming_fit_matches_bundle_fit() {
        use crate::backbone::{init_model, BackboneConfig};
        use crate::ntk_features::extract_bundle;
        let model = init_model(&BackboneConfig::new(3, vec![7, 5])).unwrap();
        let x = random(300, 3, 8);
        let b = extract_bundle(&model, &x, 0, &HiddenMode::default(), None).unwrap();
        let spec = SubsampleSpec::new(120, 4);
        let t1 = fit_transform(&b, 0.0, Some(&spec)).unwrap();
        let t2 = fit_transform_from_model(&model, &x, 0, 0.0, Some(&spec), &HiddenMode::default()).unwrap();
        assert_eq!(t1.fit_rows, t2.fit_rows);
        assert!(t1.gram_btb.sub(&t2.gram_btb).max_abs() < 1e-9 * t1.gram_btb.max_abs());
    }

    #[test]
    fn serialization_round_trip() {
        let t = fit_transform(&bundle(random(20, 3, 1), random(20, 5, 2)), 0.5, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        t.save_json(&path).unwrap();
        assert_eq!(RichTransform::load_json(&path).unwrap(), t);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn normal_equations_hold(n in 6usize..30, m in 1usize..20, r in 1usize..6, ridge in 0.0f64..2.0, seed in any::<u64>()) {
            prop_assume!(n >= r);
            let phi_r = random(n, r, seed);
            let phi_m = random(n, m, seed ^ 1);
            let a = fit_a_exact(&phi_m, &phi_r, ridge).unwrap();
            // phi_r^T (phi_m - phi_r A^T) = ridge A^T
            let resid = phi_m.sub(&matmul(&phi_r, &a.transpose()).unwrap());
            let lhs = matmul_tn(&phi_r, &resid).unwrap();
            let rhs = a.transpose().scale(ridge);
            prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-8);
        }

        #[test]
        fn btb_dominates_identity(n in 4usize..25, m in 1usize..15, r in 1usize..5, seed in any::<u64>()) {
            prop_assume!(n >= r);
            let t = fit_transform(&bundle(random(n, r, seed), random(n, m, seed ^ 3)), 0.0, None).unwrap();
            prop_assert!(min_eigval(&t.gram_btb).unwrap() >= 1.0 - 1e-8);
            let rec = t.l.reconstruct();
            prop_assert!(rec.sub(&t.gram_btb).frobenius_norm() <= 1e-10 * t.gram_btb.frobenius_norm());
        }
    }
}
