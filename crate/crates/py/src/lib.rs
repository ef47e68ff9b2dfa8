//! Python bindings for the fallscope detector.
//!
//! Images, patches and feature vectors cross the boundary as flat lists of
//! floats; models and forests as the same bytes the CLI writes to disk.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use fallscope::{anomaly, cli, iforest, imagegrid, metrics, persist, synthgen, vae};

create_exception!(pyfallscope, FallscopeError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    FallscopeError::new_err(e.to_string())
}

/// A grayscale image with intensities in `[0, 1]`, row-major.
#[pyclass(module = "pyfallscope", name = "GrayImage", frozen)]
struct PyGrayImage {
    inner: imagegrid::GrayImage,
}

#[pymethods]
impl PyGrayImage {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<f32>) -> PyResult<Self> {
        let inner = imagegrid::GrayImage::new(width, height, pixels).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn filled(width: usize, height: usize, value: f32) -> PyResult<Self> {
        let inner = imagegrid::GrayImage::filled(width, height, value).map_err(err)?;
        Ok(Self { inner })
    }

    /// Parses binary (P5) PGM bytes.
    #[staticmethod]
    fn from_pgm(data: &[u8]) -> PyResult<Self> {
        let inner = imagegrid::read_pgm(data).map_err(err)?;
        Ok(Self { inner })
    }

    /// Synthetic road surface with the given scene seed.
    #[staticmethod]
    #[pyo3(signature = (seed, width=640, height=256))]
    fn road_frame(seed: u64, width: usize, height: usize) -> PyResult<Self> {
        let cfg = synthgen::SceneConfig {
            width,
            height,
            seed,
            ..synthgen::SceneConfig::default()
        };
        let inner = synthgen::gen_road_frame(&cfg).map_err(err)?;
        Ok(Self { inner })
    }

    fn to_pgm<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &imagegrid::write_pgm(&self.inner))
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn pixels(&self) -> Vec<f32> {
        self.inner.pixels().to_vec()
    }

    /// Road-cell patches as `(grid_index, pixels)` on the default grid.
    fn road_patches(&self) -> PyResult<Vec<(usize, Vec<f32>)>> {
        let grid = imagegrid::PatchGridSpec::default();
        let mask = imagegrid::RoadMask::default_road();
        let rect = imagegrid::CropRect::full(&self.inner);
        let patches = imagegrid::road_patches(&self.inner, rect, &grid, &mask, 0).map_err(err)?;
        Ok(patches.into_iter().map(|p| (p.grid_index, p.data)).collect())
    }

    fn __repr__(&self) -> String {
        format!("GrayImage({}x{})", self.inner.width(), self.inner.height())
    }
}

/// A trained (or freshly initialized) variational auto-encoder.
#[pyclass(module = "pyfallscope", name = "Vae", frozen)]
struct PyVae {
    params: vae::VaeParams,
    meta: persist::ModelMeta,
}

fn arch(hidden: Option<Vec<usize>>, latent: Option<usize>) -> vae::VaeArch {
    let default = vae::VaeArch::default();
    vae::VaeArch {
        input: default.input,
        hidden: hidden.unwrap_or(default.hidden),
        latent: latent.unwrap_or(default.latent),
    }
}

#[pymethods]
impl PyVae {
    #[staticmethod]
    #[pyo3(signature = (seed, hidden=None, latent=None))]
    fn init(seed: u64, hidden: Option<Vec<usize>>, latent: Option<usize>) -> PyResult<Self> {
        let params = vae::Vae::init(arch(hidden, latent), seed).map_err(err)?;
        Ok(Self {
            params,
            meta: persist::ModelMeta {
                train_seed: seed,
                epochs: 0,
            },
        })
    }

    /// Loads `.fsva` bytes.
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let (params, meta) = persist::load_model(data).map_err(err)?;
        Ok(Self { params, meta })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &persist::save_model(&self.params, &self.meta))
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.params.input_dim()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.params.latent_dim()
    }

    #[getter]
    fn epochs(&self) -> u64 {
        self.meta.epochs
    }

    /// Returns `(mu, logvar)`.
    fn encode(&self, x: Vec<f32>) -> PyResult<(Vec<f32>, Vec<f32>)> {
        let out = self.params.encode(&x).map_err(err)?;
        Ok((out.mu, out.logvar))
    }

    /// Deterministic reconstruction through the posterior mean.
    fn reconstruct(&self, x: Vec<f32>) -> PyResult<Vec<f32>> {
        self.params.reconstruct(&x).map_err(err)
    }
}

/// `(epoch, recon, kl, total)` per epoch.
type Trace = Vec<(usize, f64, f64, f64)>;

/// Trains a VAE on clean patches. Returns the model and the per-epoch
/// `(epoch, recon, kl, total)` trace.
#[pyfunction]
#[pyo3(signature = (patches, epochs=50, batch_size=128, learning_rate=1e-3, seed=0, hidden=None, latent=None))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    patches: Vec<Vec<f32>>,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
    hidden: Option<Vec<usize>>,
    latent: Option<usize>,
) -> PyResult<(PyVae, Trace)> {
    let cfg = vae::TrainConfig {
        arch: arch(hidden, latent),
        epochs,
        batch_size,
        learning_rate,
        seed,
        ..vae::TrainConfig::default()
    };
    let outcome = py
        .detach(|| {
            let refs: Vec<&[f32]> = patches.iter().map(Vec::as_slice).collect();
            vae::train(&refs, &cfg)
        })
        .map_err(err)?;
    let trace = outcome
        .trace
        .iter()
        .map(|e| (e.epoch, e.recon, e.kl, e.total))
        .collect();
    let model = PyVae {
        params: outcome.params,
        meta: persist::ModelMeta {
            train_seed: seed,
            epochs: epochs as u64,
        },
    };
    Ok((model, trace))
}

/// `(mean, std, max, p99)` of the squared-error map between a patch and
/// its reconstruction.
#[pyfunction]
fn patch_features(x: Vec<f32>, xhat: Vec<f32>) -> PyResult<(f64, f64, f64, f64)> {
    let f = anomaly::patch_features(&anomaly::error_map(&x, &xhat).map_err(err)?);
    Ok((f.mean, f.std, f.max, f.p99))
}

/// Isolation forest over fixed-length feature vectors.
#[pyclass(module = "pyfallscope", name = "IsolationForest", frozen)]
struct PyIsolationForest {
    inner: iforest::IsolationForest,
}

#[pymethods]
impl PyIsolationForest {
    #[new]
    #[pyo3(signature = (data, psi=256, trees=100, seed=0))]
    fn new(py: Python<'_>, data: Vec<Vec<f64>>, psi: usize, trees: usize, seed: u64) -> PyResult<Self> {
        let inner = py
            .detach(|| iforest::IsolationForest::fit(&data, psi, trees, seed))
            .map_err(err)?;
        Ok(Self { inner })
    }

    /// Loads `.fsif` bytes.
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let inner = persist::load_forest(data).map_err(err)?;
        Ok(Self { inner })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &persist::save_forest(&self.inner))
    }

    #[getter]
    fn n_trees(&self) -> usize {
        self.inner.trees.len()
    }

    #[getter]
    fn psi(&self) -> usize {
        self.inner.psi
    }

    fn score(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.score(&x).map_err(err)
    }

    fn score_all(&self, xs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.score_all(&xs).map_err(err)
    }
}

/// Flags the top `ceil(fraction * n)` scores. Returns `(threshold, flags)`.
#[pyfunction]
fn threshold_by_fraction(scores: Vec<f64>, fraction: f64) -> PyResult<(f64, Vec<bool>)> {
    let d = iforest::threshold_by_fraction(&scores, fraction).map_err(err)?;
    Ok((d.threshold, d.flags))
}

#[pyfunction]
fn avg_path_c(n: usize) -> f64 {
    iforest::avg_path_c(n)
}

#[pyfunction]
fn dice(a: Vec<bool>, b: Vec<bool>) -> PyResult<f64> {
    metrics::dice(&a, &b).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, window=7))]
fn ssim(a: &PyGrayImage, b: &PyGrayImage, window: usize) -> PyResult<f64> {
    metrics::ssim(&a.inner, &b.inner, window).map_err(err)
}

/// Returns `(tn, fp, fn, tp, recall, precision)`; undefined ratios are `None`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn confusion(
    predicted: Vec<bool>,
    actual: Vec<bool>,
) -> PyResult<(usize, usize, usize, usize, Option<f64>, Option<f64>)> {
    let m = metrics::confusion(&predicted, &actual).map_err(err)?;
    Ok((m.tn, m.fp, m.fn_, m.tp, m.recall(), m.precision()))
}

/// Runs a `fallscope` command line, e.g. `["gen-data", "--n-train", "10"]`.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> PyResult<()> {
    py.detach(|| cli::run(&args)).map_err(err)
}

#[pymodule]
fn pyfallscope(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FallscopeError", m.py().get_type::<FallscopeError>())?;
    m.add_class::<PyGrayImage>()?;
    m.add_class::<PyVae>()?;
    m.add_class::<PyIsolationForest>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(patch_features, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_by_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(avg_path_c, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
