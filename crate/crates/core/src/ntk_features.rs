//! Empirical NTK feature extraction.
//!
//! `phi_r` are the last-layer features (last hidden activation plus a bias
//! slot); the hidden block `phi_m` is the parameter gradient w.r.t. every
//! other layer. For wide models the hidden block can be replaced by a
//! Gaussian sketch `phi_m P` whose columns are generated block by block from
//! a seeded stream and never stored in full.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneModel;
use crate::densela::{matmul, matmul_tn, outer_gram, DenseMatrix};
use crate::error::{Error, Result};

/// Default cap on `N * m` entries for exact hidden features (256 MiB of f64).
pub const DEFAULT_HIDDEN_BUDGET: usize = 32 * 1024 * 1024;

/// Rows processed per gradient batch when streaming.
const ROW_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    /// Entries i.i.d. `N(0, 1/q)`.
    #[default]
    Gaussian,
    /// Debug hook: `P = I` (requires `q == m`).
    #[doc(hidden)]
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchConfig {
    pub q: usize,
    pub seed: u64,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default)]
    pub projection: ProjectionKind,
}

fn default_block_size() -> usize {
    4096
}

impl SketchConfig {
    pub fn new(q: usize, seed: u64) -> Self {
        Self { q, seed, block_size: default_block_size(), projection: ProjectionKind::Gaussian }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.q == 0 || self.q > m {
            return Err(Error::InvalidConfig(format!("sketch dimension q = {} must lie in [1, {m}]", self.q)));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidConfig("sketch block_size must be >= 1".into()));
        }
        if self.projection == ProjectionKind::Identity && self.q != m {
            return Err(Error::InvalidConfig("identity projection needs q == m".into()));
        }
        Ok(())
    }

    /// Columns `[start, start + width)` of `P` (`m x width`). Column block `b`
    /// is drawn from ChaCha stream `b` of the sketch seed.
    pub fn projection_block(&self, m: usize, block: usize) -> DenseMatrix {
        let start = block * self.block_size;
        let width = self.block_size.min(self.q - start);
        match self.projection {
            ProjectionKind::Identity => DenseMatrix::from_fn(m, width, |i, j| if i == start + j { 1.0 } else { 0.0 }),
            ProjectionKind::Gaussian => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(block as u64);
                let scale = 1.0 / (self.q as f64).sqrt();
                DenseMatrix::from_fn(m, width, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
            }
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.q.div_ceil(self.block_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HiddenFeatures {
    Exact(DenseMatrix),
    Sketched { matrix: DenseMatrix, sketch: SketchConfig },
}

impl HiddenFeatures {
    pub fn matrix(&self) -> &DenseMatrix {
        match self {
            HiddenFeatures::Exact(m) => m,
            HiddenFeatures::Sketched { matrix, .. } => matrix,
        }
    }

    pub fn sketch(&self) -> Option<&SketchConfig> {
        match self {
            HiddenFeatures::Exact(_) => None,
            HiddenFeatures::Sketched { sketch, .. } => Some(sketch),
        }
    }
}

/// Per-dataset feature matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub phi_r: DenseMatrix,
    pub hidden: HiddenFeatures,
    pub source_rows: Vec<usize>,
}

/// How to represent the hidden block.
#[derive(Clone, Debug, PartialEq)]
pub enum HiddenMode {
    Exact { budget: usize },
    Sketched(SketchConfig),
}

impl Default for HiddenMode {
    fn default() -> Self {
        HiddenMode::Exact { budget: DEFAULT_HIDDEN_BUDGET }
    }
}

impl FeatureBundle {
    pub fn len(&self) -> usize {
        self.phi_r.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn r(&self) -> usize {
        self.phi_r.cols()
    }

    /// Restricts the bundle to positions `idx` (positions into this bundle).
    pub fn select(&self, idx: &[usize]) -> Self {
        let hidden = match &self.hidden {
            HiddenFeatures::Exact(m) => HiddenFeatures::Exact(m.select_rows(idx)),
            HiddenFeatures::Sketched { matrix, sketch } => {
                HiddenFeatures::Sketched { matrix: matrix.select_rows(idx), sketch: sketch.clone() }
            }
        };
        Self { phi_r: self.phi_r.select_rows(idx), hidden, source_rows: idx.iter().map(|&i| self.source_rows[i]).collect() }
    }

    fn check(&self) -> Result<()> {
        if self.hidden.matrix().rows() != self.phi_r.rows() || self.source_rows.len() != self.phi_r.rows() {
            return Err(Error::Format("feature bundle row counts disagree".into()));
        }
        Ok(())
    }

    /// Writes the bundle as a little-endian columnar file.
    ///
    /// Layout: magic `RBLLFB01`, then u64 `N`, `r`, `width`, u8 kind
    /// (0 exact, 1 sketched), u64 sketch `q`, `seed`, `block_size`, u8
    /// projection, `N` u64 source rows, `phi_r` column-major, hidden column-major.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.check()?;
        let hidden = self.hidden.matrix();
        w.write_all(BUNDLE_MAGIC)?;
        for v in [self.len(), self.r(), hidden.cols()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        let sketch = self.hidden.sketch();
        w.write_all(&[u8::from(sketch.is_some())])?;
        let (q, seed, block, proj) = sketch.map_or((0, 0, 0, 0), |s| {
            (s.q as u64, s.seed, s.block_size as u64, u8::from(s.projection == ProjectionKind::Identity))
        });
        for v in [q, seed, block] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[proj])?;
        for &s in &self.source_rows {
            w.write_all(&(s as u64).to_le_bytes())?;
        }
        for m in [&self.phi_r, hidden] {
            for j in 0..m.cols() {
                for i in 0..m.rows() {
                    w.write_all(&m.get(i, j).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BUNDLE_MAGIC {
            return Err(Error::Format("not a feature bundle file".into()));
        }
        let n = read_u64(r)? as usize;
        let rdim = read_u64(r)? as usize;
        let width = read_u64(r)? as usize;
        let kind = read_u8(r)?;
        let q = read_u64(r)? as usize;
        let seed = read_u64(r)?;
        let block_size = read_u64(r)? as usize;
        let proj = read_u8(r)?;
        let source_rows = (0..n).map(|_| read_u64(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let phi_r = read_columnar(r, n, rdim)?;
        let hidden_m = read_columnar(r, n, width)?;
        let hidden = match kind {
            0 => HiddenFeatures::Exact(hidden_m),
            1 => HiddenFeatures::Sketched {
                matrix: hidden_m,
                sketch: SketchConfig {
                    q,
                    seed,
                    block_size,
                    projection: if proj == 1 { ProjectionKind::Identity } else { ProjectionKind::Gaussian },
                },
            },
            other => return Err(Error::Format(format!("unknown hidden kind {other}"))),
        };
        Ok(Self { phi_r, hidden, source_rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

const BUNDLE_MAGIC: &[u8; 8] = b"RBLLFB01";

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_columnar(r: &mut impl Read, rows: usize, cols: usize) -> Result<DenseMatrix> {
    let mut m = DenseMatrix::zeros(rows, cols);
    let mut b = [0u8; 8];
    for j in 0..cols {
        for i in 0..rows {
            r.read_exact(&mut b)?;
            m.set(i, j, f64::from_le_bytes(b));
        }
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("feature bundle"));
    }
    Ok(m)
}

/// Last-layer features: row `i` is `(penultimate(x_i), 1)`.
pub fn extract_last_layer(model: &BackboneModel, inputs: &DenseMatrix) -> DenseMatrix {
    let r = model.r();
    if inputs.rows() == 0 {
        return DenseMatrix::zeros(0, r);
    }
    let pen = model.penultimate_batch(inputs);
    DenseMatrix::from_fn(inputs.rows(), r, |i, j| if j + 1 == r { 1.0 } else { pen.get(i, j) })
}

/// Exact hidden-block gradients, `N x m`, refusing sizes above `budget` entries.
pub fn extract_hidden_exact(
    model: &BackboneModel,
    inputs: &DenseMatrix,
    output_index: usize,
    budget: usize,
) -> Result<DenseMatrix> {
    let needed = inputs.rows().saturating_mul(model.m());
    if needed > budget {
        return Err(Error::MemoryBudgetExceeded { needed, budget });
    }
    let mut out = DenseMatrix::zeros(0, model.m());
    for chunk in row_chunks(inputs.rows()) {
        let x = inputs.select_rows(&chunk);
        let (hidden, _) = model.param_gradients_batch(&x, output_index);
        out = out.vstack(&hidden)?;
    }
    Ok(out)
}

fn row_chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(ROW_CHUNK).map(move |s| (s..(s + ROW_CHUNK).min(n)).collect())
}

/// Sketched hidden features `phi_m P`, `N x q`. Only one `m x block_size`
/// block of `P` exists at a time; gradients are recomputed per block.
pub fn extract_hidden_sketched(
    model: &BackboneModel,
    inputs: &DenseMatrix,
    output_index: usize,
    sketch: &SketchConfig,
) -> Result<DenseMatrix> {
    let m = model.m();
    sketch.validate(m)?;
    let n = inputs.rows();
    let mut out = DenseMatrix::zeros(n, sketch.q);
    let single_pass = sketch.n_blocks() == 1;
    // with a single block the gradients are computed once and reused
    let cached: Option<Vec<DenseMatrix>> = single_pass.then(|| {
        row_chunks(n).map(|c| model.param_gradients_batch(&inputs.select_rows(&c), output_index).0).collect()
    });
    for block in 0..sketch.n_blocks() {
        let p = sketch.projection_block(m, block);
        let c0 = block * sketch.block_size;
        for (ci, chunk) in row_chunks(n).enumerate() {
            let proj = match &cached {
                Some(grads) => matmul(&grads[ci], &p)?,
                None => matmul(&model.param_gradients_batch(&inputs.select_rows(&chunk), output_index).0, &p)?,
            };
            for (local, &row) in chunk.iter().enumerate() {
                out.row_mut(row)[c0..c0 + p.cols()].copy_from_slice(proj.row(local));
            }
        }
    }
    Ok(out)
}

/// `phi_m^T rhs` (`m x k`) accumulated over row chunks without storing `phi_m`.
pub fn hidden_transpose_times(
    model: &BackboneModel,
    inputs: &DenseMatrix,
    output_index: usize,
    rhs: &DenseMatrix,
) -> Result<DenseMatrix> {
    if rhs.rows() != inputs.rows() {
        return Err(Error::DimensionMismatch {
            op: "hidden_transpose_times",
            detail: format!("{} inputs vs {} rhs rows", inputs.rows(), rhs.rows()),
        });
    }
    let mut acc = DenseMatrix::zeros(model.m(), rhs.cols());
    for chunk in row_chunks(inputs.rows()) {
        let (hidden, _) = model.param_gradients_batch(&inputs.select_rows(&chunk), output_index);
        acc = acc.add(&matmul_tn(&hidden, &rhs.select_rows(&chunk))?);
    }
    Ok(acc)
}

/// Extracts last-layer and hidden features for `inputs`, tagging rows with
/// `source_rows` (defaults to `0..N`).
pub fn extract_bundle(
    model: &BackboneModel,
    inputs: &DenseMatrix,
    output_index: usize,
    mode: &HiddenMode,
    source_rows: Option<Vec<usize>>,
) -> Result<FeatureBundle> {
    let source_rows = source_rows.unwrap_or_else(|| (0..inputs.rows()).collect());
    if source_rows.len() != inputs.rows() {
        return Err(Error::DimensionMismatch {
            op: "extract_bundle",
            detail: format!("{} source rows for {} inputs", source_rows.len(), inputs.rows()),
        });
    }
    let phi_r = extract_last_layer(model, inputs);
    let hidden = match mode {
        HiddenMode::Exact { budget } => HiddenFeatures::Exact(extract_hidden_exact(model, inputs, output_index, *budget)?),
        HiddenMode::Sketched(sketch) => HiddenFeatures::Sketched {
            matrix: extract_hidden_sketched(model, inputs, output_index, sketch)?,
            sketch: sketch.clone(),
        },
    };
    Ok(FeatureBundle { phi_r, hidden, source_rows })
}

/// Hidden Gram `H H^T` using whichever representation the bundle stores.
pub fn sketch_gram(bundle: &FeatureBundle) -> DenseMatrix {
    outer_gram(bundle.hidden.matrix())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_model, Activation, BackboneConfig};
    use crate::densela::dot;
    use rand::Rng;

    fn model(seed: u64) -> BackboneModel {
        init_model(&BackboneConfig {
            input_dim: 3,
            hidden_widths: vec![8, 6],
            activation: Activation::Tanh,
            output_dim: 1,
            init_scale: 1.0,
            seed,
        })
        .unwrap()
    }

    fn inputs(n: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn last_layer_has_bias_column() {
        let m = model(0);
        let x = inputs(5, 1);
        let phi = extract_last_layer(&m, &x);
        assert_eq!(phi.cols(), m.r());
        assert!((0..5).all(|i| phi.get(i, m.r() - 1) == 1.0));
        let (_, pen) = m.forward(x.row(2));
        assert_eq!(&phi.row(2)[..m.r() - 1], pen.as_slice());
        assert_eq!(extract_last_layer(&m, &DenseMatrix::zeros(0, 3)).shape(), (0, m.r()));
    }

    #[test]
    fn exact_rows_match_per_point_gradient() {
        let m = model(1);
        let x = inputs(3, 2);
        let h = extract_hidden_exact(&m, &x, 0, DEFAULT_HIDDEN_BUDGET).unwrap();
        for i in 0..3 {
            let (g, _) = m.param_gradient(x.row(i), 0);
            for (a, b) in h.row(i).iter().zip(&g) {
                assert!((a - b).abs() <= 1e-15);
            }
        }
        let gram = outer_gram(&h);
        for i in 0..3 {
            for j in 0..3 {
                let gi = m.param_gradient(x.row(i), 0).0;
                let gj = m.param_gradient(x.row(j), 0).0;
                assert!((gram.get(i, j) - dot(&gi, &gj)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn budget_zero_is_rejected() {
        let m = model(1);
        assert!(matches!(
            extract_hidden_exact(&m, &inputs(2, 0), 0, 0),
            Err(Error::MemoryBudgetExceeded { .. })
        ));
    }

    #[test]
    fn identity_sketch_equals_exact() {
        let m = model(2);
        let x = inputs(7, 3);
        let mut sketch = SketchConfig::new(m.m(), 0);
        sketch.projection = ProjectionKind::Identity;
        sketch.block_size = 17;
        let s = extract_hidden_sketched(&m, &x, 0, &sketch).unwrap();
        let e = extract_hidden_exact(&m, &x, 0, DEFAULT_HIDDEN_BUDGET).unwrap();
        assert!(s.sub(&e).max_abs() < 1e-15);
    }

    #[test]
    fn sketch_is_deterministic_and_blocking_consistent() {
        let m = model(3);
        let x = inputs(6, 4);
        let sketch = SketchConfig { block_size: 5, ..SketchConfig::new(12, 9) };
        let a = extract_hidden_sketched(&m, &x, 0, &sketch).unwrap();
        let b = extract_hidden_sketched(&m, &x, 0, &sketch).unwrap();
        assert_eq!(a, b);
        // explicit P assembled from its blocks
        let e = extract_hidden_exact(&m, &x, 0, DEFAULT_HIDDEN_BUDGET).unwrap();
        let blocks: Vec<DenseMatrix> = (0..sketch.n_blocks()).map(|b| sketch.projection_block(m.m(), b)).collect();
        let p = DenseMatrix::from_fn(m.m(), 12, |i, j| blocks[j / 5].get(i, j % 5));
        assert!(matmul(&e, &p).unwrap().sub(&a).max_abs() < 1e-12);
    }

    #[test]
    fn invalid_sketch_rejected() {
        let m = model(0);
        assert!(extract_hidden_sketched(&m, &inputs(2, 0), 0, &SketchConfig::new(0, 0)).is_err());
        assert!(extract_hidden_sketched(&m, &inputs(2, 0), 0, &SketchConfig::new(m.m() + 1, 0)).is_err());
    }

    #[test]
    fn gram_is_symmetric_with_nonnegative_diagonal() {
        let m = model(4);
        let bundle = extract_bundle(&m, &inputs(9, 5), 0, &HiddenMode::Sketched(SketchConfig::new(16, 1)), None).unwrap();
        let g = sketch_gram(&bundle);
        assert_eq!(g.max_asymmetry(), 0.0);
        assert!(g.diag().iter().all(|&d| d >= 0.0));
        let exact = extract_bundle(&m, &inputs(9, 5), 0, &HiddenMode::default(), None).unwrap();
        let h = exact.hidden.matrix();
        assert_eq!(sketch_gram(&exact), outer_gram(h));
    }

    #[test]
    fn transpose_product_matches_explicit() {
        let m = model(5);
        let x = inputs(300, 6);
        let rhs = DenseMatrix::from_fn(300, 4, |i, j| ((i * 7 + j) % 5) as f64 - 2.0);
        let e = extract_hidden_exact(&m, &x, 0, DEFAULT_HIDDEN_BUDGET).unwrap();
        let want = matmul_tn(&e, &rhs).unwrap();
        let got = hidden_transpose_times(&m, &x, 0, &rhs).unwrap();
        assert!(got.sub(&want).max_abs() < 1e-10);
    }

    #[test]
    fn bundle_file_round_trip() {
        let m = model(6);
        let x = inputs(5, 7);
        let dir = tempfile::tempdir().unwrap();
        for mode in [HiddenMode::default(), HiddenMode::Sketched(SketchConfig::new(10, 42))] {
            let bundle = extract_bundle(&m, &x, 0, &mode, Some(vec![4, 3, 9, 0, 1])).unwrap();
            let path = dir.path().join("b.bin");
            bundle.save(&path).unwrap();
            assert_eq!(FeatureBundle::load(&path).unwrap(), bundle);
        }
    }

    #[test]
    fn projection_has_identity_mean() {
        // E[P P^T] = I: fixed entries of P P^T averaged over seeds
        let m = 20;
        let q = 8;
        let seeds = 200;
        let mut diag = Vec::new();
        let mut off = Vec::new();
        for s in 0..seeds {
            let p = SketchConfig::new(q, s).projection_block(m, 0);
            diag.push(dot(p.row(3), p.row(3)));
            off.push(dot(p.row(3), p.row(11)));
        }
        let stats = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (mean, (var / v.len() as f64).sqrt())
        };
        let (md, sd) = stats(&diag);
        let (mo, so) = stats(&off);
        assert!((md - 1.0).abs() <= 3.0 * sd, "diag mean {md} se {sd}");
        assert!(mo.abs() <= 3.0 * so, "off mean {mo} se {so}");
    }
}
