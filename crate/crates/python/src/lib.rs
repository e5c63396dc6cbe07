//! Python bindings. Matrices cross the boundary as lists of row lists.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use richbll::backbone::{self, Activation, BackboneConfig, BackboneModel, LabeledDataset, TrainConfig};
use richbll::densela::DenseMatrix;
use richbll::gp_posterior::{self, oracle, PosteriorModel};
use richbll::harness::verify::{run_suite, SuiteOptions};
use richbll::ntk_features::{self, HiddenMode, SketchConfig, DEFAULT_HIDDEN_BUDGET};
use richbll::posthoc::{self, Variant};
use richbll::transform::{self, SubsampleSpec};

fn err(e: richbll::Error) -> PyErr {
    match e {
        richbll::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(&rows).map_err(err)
}

fn to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn hidden_mode(sketch_q: Option<usize>, sketch_seed: u64) -> HiddenMode {
    match sketch_q {
        Some(q) => HiddenMode::Sketched(SketchConfig::new(q, sketch_seed)),
        None => HiddenMode::Exact { budget: DEFAULT_HIDDEN_BUDGET },
    }
}

fn subsample(k: Option<usize>, seed: u64) -> Option<SubsampleSpec> {
    k.map(|k| SubsampleSpec::new(k, seed))
}

/// A fully connected network with a scalar (or vector) linear head.
#[pyclass(name = "Backbone", module = "pyrichbll")]
struct PyBackbone {
    inner: BackboneModel,
}

#[pymethods]
impl PyBackbone {
    #[new]
    #[pyo3(signature = (input_dim, hidden_widths, activation="relu", seed=0, init_scale=1.0, output_dim=1))]
    fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        activation: &str,
        seed: u64,
        init_scale: f64,
        output_dim: usize,
    ) -> PyResult<Self> {
        let activation = match activation {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            other => return Err(PyValueError::new_err(format!("unknown activation {other:?}"))),
        };
        let cfg = BackboneConfig { input_dim, hidden_widths, activation, output_dim, init_scale, seed };
        Ok(Self { inner: backbone::init_model(&cfg).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: BackboneModel::load_json(path.as_ref()).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save_json(path.as_ref()).map_err(err)
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn r(&self) -> usize {
        self.inner.r()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    /// Adam training on mean squared error; returns the per-epoch losses.
    #[pyo3(signature = (x, y, epochs=100, learning_rate=1e-3, batch_size=32, seed=0))]
    fn fit(
        &mut self,
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let data = LabeledDataset::new(to_matrix(x)?, to_matrix(y)?).map_err(err)?;
        let cfg = TrainConfig { epochs, learning_rate, batch_size, seed, ..TrainConfig::default() };
        let model = self.inner.clone();
        let (trained, losses) = py.detach(|| backbone::train(&model, &data, &cfg)).map_err(err)?;
        self.inner = trained;
        Ok(losses)
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.inner.predict_batch(&to_matrix(x)?)))
    }

    /// `(penultimate activations, 1)` per row.
    fn last_layer_features(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&ntk_features::extract_last_layer(&self.inner, &to_matrix(x)?)))
    }

    /// Hidden-parameter gradients, exact or sketched to `sketch_q` columns.
    #[pyo3(signature = (x, sketch_q=None, sketch_seed=0, output_index=0))]
    fn hidden_features(
        &self,
        x: Vec<Vec<f64>>,
        sketch_q: Option<usize>,
        sketch_seed: u64,
        output_index: usize,
    ) -> PyResult<Vec<Vec<f64>>> {
        let x = to_matrix(x)?;
        let h = match hidden_mode(sketch_q, sketch_seed) {
            HiddenMode::Exact { budget } => ntk_features::extract_hidden_exact(&self.inner, &x, output_index, budget),
            HiddenMode::Sketched(s) => ntk_features::extract_hidden_sketched(&self.inner, &x, output_index, &s),
        }
        .map_err(err)?;
        Ok(to_rows(&h))
    }
}

/// The `r x r` Cholesky transform of `A^T A + I`.
#[pyclass(name = "RichTransform", module = "pyrichbll")]
struct PyRichTransform {
    inner: transform::RichTransform,
}

#[pymethods]
impl PyRichTransform {
    #[staticmethod]
    fn identity(r: usize) -> Self {
        Self { inner: transform::RichTransform::identity(r) }
    }

    #[staticmethod]
    #[pyo3(signature = (backbone, x, ridge=0.0, subsample_k=None, subsample_seed=0, sketch_q=None, sketch_seed=0))]
    fn fit(
        backbone: &PyBackbone,
        x: Vec<Vec<f64>>,
        ridge: f64,
        subsample_k: Option<usize>,
        subsample_seed: u64,
        sketch_q: Option<usize>,
        sketch_seed: u64,
    ) -> PyResult<Self> {
        let inner = transform::fit_transform_from_model(
            &backbone.inner,
            &to_matrix(x)?,
            0,
            ridge,
            subsample(subsample_k, subsample_seed).as_ref(),
            &hidden_mode(sketch_q, sketch_seed),
        )
        .map_err(err)?;
        Ok(Self { inner })
    }

    /// Fit from explicit feature matrices (`phi_m` may be a sketch).
    #[staticmethod]
    #[pyo3(signature = (phi_r, phi_m, ridge=0.0))]
    fn from_features(phi_r: Vec<Vec<f64>>, phi_m: Vec<Vec<f64>>, ridge: f64) -> PyResult<Self> {
        let phi_r = to_matrix(phi_r)?;
        let bundle = ntk_features::FeatureBundle {
            source_rows: (0..phi_r.rows()).collect(),
            phi_r,
            hidden: ntk_features::HiddenFeatures::Exact(to_matrix(phi_m)?),
        };
        Ok(Self { inner: transform::fit_transform(&bundle, ridge, None).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: transform::RichTransform::load_json(path.as_ref()).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save_json(path.as_ref()).map_err(err)
    }

    #[getter]
    fn r(&self) -> usize {
        self.inner.r()
    }

    #[getter]
    fn l(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.l.to_dense())
    }

    #[getter]
    fn gram_btb(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.gram_btb)
    }

    fn apply(&self, phi_r: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.inner.apply(&to_matrix(phi_r)?).map_err(err)?))
    }
}

/// Gaussian posterior over transformed last-layer features.
#[pyclass(name = "Posterior", module = "pyrichbll")]
struct PyPosterior {
    inner: PosteriorModel,
}

#[pymethods]
impl PyPosterior {
    #[staticmethod]
    #[pyo3(signature = (phi_r, noise_var, transform=None, subsample_k=None, subsample_seed=0))]
    fn fit(
        phi_r: Vec<Vec<f64>>,
        noise_var: f64,
        transform: Option<&PyRichTransform>,
        subsample_k: Option<usize>,
        subsample_seed: u64,
    ) -> PyResult<Self> {
        let inner = gp_posterior::fit_posterior(
            &to_matrix(phi_r)?,
            transform.map(|t| &t.inner),
            noise_var,
            subsample(subsample_k, subsample_seed).as_ref(),
        )
        .map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn variant(&self) -> String {
        match self.inner.variant {
            gp_posterior::PosteriorVariant::Bll => "bll".into(),
            gp_posterior::PosteriorVariant::RichBll => "rich".into(),
            gp_posterior::PosteriorVariant::RichBllSub { k } => format!("rich-sub(k={k})"),
        }
    }

    #[getter]
    fn noise_var(&self) -> f64 {
        self.inner.noise_var
    }

    fn predictive_cov(&self, phi_r_test: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(self.inner.predictive_cov(&to_matrix(phi_r_test)?).map_err(err)?.matrix()))
    }

    fn predictive_var(&self, phi_r_test: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.predictive_var(&to_matrix(phi_r_test)?).map_err(err)
    }
}

/// Fits `bll`, `rich` or `rich-sub` on a backbone and returns epistemic
/// variances at `x_test`.
#[pyfunction]
#[pyo3(signature = (backbone, x_train, x_test, variant="rich", noise_var=0.1, ridge=0.0, ratio=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn posterior_variances(
    py: Python<'_>,
    backbone: &PyBackbone,
    x_train: Vec<Vec<f64>>,
    x_test: Vec<Vec<f64>>,
    variant: &str,
    noise_var: f64,
    ridge: f64,
    ratio: Option<f64>,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let variant: Variant = variant.parse().map_err(err)?;
    let x_train = to_matrix(x_train)?;
    let x_test = to_matrix(x_test)?;
    let sub = ratio.map(|r| SubsampleSpec::from_ratio(x_train.rows(), r, seed));
    let model = &backbone.inner;
    py.detach(|| {
        let fitted = posthoc::fit_variant(model, &x_train, variant, noise_var, ridge, sub.as_ref(), &HiddenMode::default())?;
        fitted.variances(model, &x_test)
    })
    .map_err(err)
}

/// Exact GP covariance with the full-gradient kernel (`N <= 2000`).
#[pyfunction]
fn ntk_gp_cov(phi_p_train: Vec<Vec<f64>>, phi_p_test: Vec<Vec<f64>>, noise_var: f64) -> PyResult<Vec<Vec<f64>>> {
    let cov = oracle::ntk_gp_oracle(&to_matrix(phi_p_train)?, &to_matrix(phi_p_test)?, noise_var).map_err(err)?;
    Ok(to_rows(cov.matrix()))
}

/// Runs the numerical verification suite; returns `(all_hard_passed, json)`.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn verify(py: Python<'_>, seed: u64) -> PyResult<(bool, String)> {
    let report = py.detach(|| run_suite(&SuiteOptions { seed, mutate_equivalence: false })).map_err(err)?;
    let json = serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((report.all_hard_passed, json))
}

#[pymodule]
fn pyrichbll(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", richbll::VERSION)?;
    m.add_class::<PyBackbone>()?;
    m.add_class::<PyRichTransform>()?;
    m.add_class::<PyPosterior>()?;
    m.add_function(wrap_pyfunction!(posterior_variances, m)?)?;
    m.add_function(wrap_pyfunction!(ntk_gp_cov, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
