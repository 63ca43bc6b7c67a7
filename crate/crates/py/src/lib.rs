//! Python bindings. Images travel as flat row-major lists of floats plus a
//! height and width, so the module needs nothing beyond the standard
//! interpreter.

use std::borrow::Cow;
use std::collections::BTreeMap;

use fusekit_core::imagedata::{self, Dataset, Modality};
use fusekit_core::metrics;
use fusekit_core::trainer::{self, Checkpoint, TrainConfig};
use fusekit_core::warpfield;
use fusekit_core::FuseError;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: FuseError) -> PyErr {
    match e {
        FuseError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_modality(name: &str) -> PyResult<Modality> {
    Ok(match name.to_ascii_lowercase().as_str() {
        "pat" => Modality::Pat,
        "mri" => Modality::Mri,
        "pseudo_mri" => Modality::PseudoMri,
        "fused" => Modality::Fused,
        other => return Err(PyValueError::new_err(format!("unknown modality `{other}`"))),
    })
}

/// A single-channel image with intensities in [0, 1].
#[pyclass(name = "Image", module = "fusekit", from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    pub inner: imagedata::Image,
}

#[pymethods]
impl PyImage {
    #[new]
    #[pyo3(signature = (height, width, pixels, modality = "pat"))]
    fn new(height: usize, width: usize, pixels: Vec<f32>, modality: &str) -> PyResult<Self> {
        let inner = imagedata::Image::new(height, width, pixels, parse_modality(modality)?).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Reads a PNG or R32F file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: imagedata::load_image(path).map_err(to_py)?,
        })
    }

    /// Writes PNG or R32F, chosen by the file extension.
    fn save(&self, path: &str) -> PyResult<()> {
        imagedata::save_image(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// Row-major pixel values.
    fn pixels(&self) -> Vec<f32> {
        self.inner.pixels().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{}, {:?})", self.inner.height(), self.inner.width(), self.inner.modality())
    }
}

/// A dense displacement field; `warp(img, field)` samples `img` at
/// `x + field(x)`.
#[pyclass(name = "DeformationField", module = "fusekit", from_py_object)]
#[derive(Clone)]
pub struct PyField {
    pub inner: warpfield::DeformationField,
}

#[pymethods]
impl PyField {
    #[new]
    fn new(height: usize, width: usize, dx: Vec<f32>, dy: Vec<f32>) -> PyResult<Self> {
        let inner = warpfield::DeformationField::new(height, width, dx, dy).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (height, width, dx = 0.0, dy = 0.0))]
    fn constant(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        Self {
            inner: warpfield::DeformationField::constant(height, width, dx, dy),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: warpfield::load_field(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        warpfield::save_field(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn dx(&self) -> Vec<f32> {
        self.inner.dx().to_vec()
    }

    fn dy(&self) -> Vec<f32> {
        self.inner.dy().to_vec()
    }

    fn max_norm(&self) -> f64 {
        self.inner.max_norm()
    }
}

/// A synthetic PAT/MRI pair with its ground-truth deformation.
#[pyclass(name = "PhantomPair", module = "fusekit", from_py_object)]
#[derive(Clone)]
pub struct PyPair {
    pub inner: imagedata::PhantomPair,
}

#[pymethods]
impl PyPair {
    #[getter]
    fn pat(&self) -> PyImage {
        PyImage {
            inner: self.inner.pat.clone(),
        }
    }

    #[getter]
    fn mri(&self) -> PyImage {
        PyImage {
            inner: self.inner.mri.clone(),
        }
    }

    #[getter]
    fn aligned_mri(&self) -> PyImage {
        PyImage {
            inner: self.inner.aligned_mri.clone(),
        }
    }

    #[getter]
    fn true_field(&self) -> PyField {
        PyField {
            inner: self.inner.true_field.clone(),
        }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
}

/// Training configuration; start from a preset and adjust keys with `set`.
#[pyclass(name = "TrainConfig", module = "fusekit", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    pub inner: TrainConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (preset = "desk"))]
    fn new(preset: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TrainConfig::preset(preset).map_err(to_py)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    /// All keys as `key=value` lines.
    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    /// The phantom pairs this configuration trains and tests on.
    fn dataset(&self) -> PyResult<Vec<PyPair>> {
        Ok(self
            .inner
            .dataset()
            .map_err(to_py)?
            .pairs
            .into_iter()
            .map(|inner| PyPair { inner })
            .collect())
    }
}

/// Trained (or freshly initialized) parameters with their configuration.
/// Held in its serialized form, which is what crosses thread boundaries.
#[pyclass(name = "Checkpoint", module = "fusekit")]
pub struct PyCheckpoint {
    bytes: Vec<u8>,
}

impl PyCheckpoint {
    fn wrap(ckpt: &Checkpoint) -> Self {
        Self { bytes: ckpt.to_bytes() }
    }

    fn decode(&self) -> PyResult<Checkpoint> {
        Checkpoint::from_bytes(&self.bytes).map_err(to_py)
    }
}

#[pymethods]
impl PyCheckpoint {
    /// Untrained parameters for `config`.
    #[staticmethod]
    fn initial(config: &PyConfig) -> PyResult<Self> {
        Ok(Self::wrap(&Checkpoint::initial(&config.inner).map_err(to_py)?))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self::wrap(&Checkpoint::load(path).map_err(to_py)?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.decode()?.save(path).map_err(to_py)
    }

    /// The serialized checkpoint.
    fn to_bytes(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }

    #[getter]
    fn stage(&self) -> PyResult<&'static str> {
        Ok(self.decode()?.stage.as_str())
    }

    #[getter]
    fn epoch(&self) -> PyResult<usize> {
        Ok(self.decode()?.epoch)
    }

    #[getter]
    fn config(&self) -> PyResult<PyConfig> {
        Ok(PyConfig {
            inner: self.decode()?.config,
        })
    }

    /// SHA-256 over the parameters whose names start with `prefix`.
    #[pyo3(signature = (prefix = ""))]
    fn digest(&self, prefix: &str) -> PyResult<String> {
        Ok(self.decode()?.params.digest(prefix))
    }

    /// Runs synthesis, registration and fusion on one pair. Returns a dict
    /// with `pseudo_mri`, `field`, `registered` and `fused`.
    fn run(&self, py: Python<'_>, pat: &PyImage, mri: &PyImage) -> PyResult<Py<pyo3::types::PyDict>> {
        let pipeline = trainer::Pipeline::from_checkpoint(&self.decode()?).map_err(to_py)?;
        let out = pipeline.run(&pat.inner, &mri.inner).map_err(to_py)?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("pseudo_mri", PyImage { inner: out.pseudo_mri })?;
        d.set_item("field", PyField { inner: out.field })?;
        d.set_item("registered", PyImage { inner: out.registered })?;
        d.set_item("fused", PyImage { inner: out.fused })?;
        Ok(d.unbind())
    }
}

/// Trains on `pairs` and returns the final checkpoint and the loss log as
/// CSV text.
#[pyfunction]
fn train(config: &PyConfig, pairs: Vec<PyPair>) -> PyResult<(PyCheckpoint, String)> {
    let data: Vec<_> = pairs.into_iter().map(|p| p.inner).collect();
    let out = trainer::train(&config.inner, &data).map_err(to_py)?;
    Ok((PyCheckpoint::wrap(&out.checkpoint), trainer::loss_log_csv(&out.log)))
}

#[pyfunction]
fn make_phantom_pair(seed: u64, size: usize, deform_magnitude: f64) -> PyResult<PyPair> {
    Ok(PyPair {
        inner: imagedata::make_phantom_pair(seed, size, size, deform_magnitude).map_err(to_py)?,
    })
}

#[pyfunction]
fn generate_dataset(seed: u64, count: usize, size: usize, deform_magnitude: f64) -> PyResult<Vec<PyPair>> {
    let data = Dataset::generate(seed, count, size, deform_magnitude).map_err(to_py)?;
    Ok(data.pairs.into_iter().map(|inner| PyPair { inner }).collect())
}

#[pyfunction]
fn warp(img: &PyImage, field: &PyField) -> PyResult<PyImage> {
    Ok(PyImage {
        inner: warpfield::warp(&img.inner, &field.inner).map_err(to_py)?,
    })
}

#[pyfunction]
fn compose_fields(outer: &PyField, inner: &PyField) -> PyResult<PyField> {
    Ok(PyField {
        inner: warpfield::compose_fields(&outer.inner, &inner.inner).map_err(to_py)?,
    })
}

#[pyfunction]
fn smoothness_loss(field: &PyField) -> f64 {
    warpfield::smoothness_loss(&field.inner)
}

fn named(columns: &[&str], values: Vec<f64>) -> BTreeMap<String, f64> {
    columns.iter().map(|c| c.to_string()).zip(values).collect()
}

/// MI, NMI and CC of a registered image against the fixed one.
#[pyfunction]
fn registration_metrics(registered: &PyImage, fixed: &PyImage) -> PyResult<BTreeMap<String, f64>> {
    let v = metrics::registration_metrics(&registered.inner, &fixed.inner).map_err(to_py)?;
    Ok(named(&metrics::REGISTRATION_COLUMNS, v))
}

/// The eight fusion scores of `fused` against its two sources.
#[pyfunction]
fn fusion_metrics(fused: &PyImage, a: &PyImage, b: &PyImage) -> PyResult<BTreeMap<String, f64>> {
    let v = metrics::fusion_metrics(&fused.inner, &a.inner, &b.inner).map_err(to_py)?;
    Ok(named(&metrics::FUSION_COLUMNS, v))
}

#[pyfunction]
#[pyo3(signature = (a, b, bins = metrics::BINS))]
fn mutual_information(a: &PyImage, b: &PyImage, bins: usize) -> PyResult<f64> {
    metrics::mutual_information(&a.inner, &b.inner, bins).map_err(to_py)
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    metrics::ssim_index(&a.inner, &b.inner).map_err(to_py)
}

#[pyfunction]
fn spatial_frequency(img: &PyImage) -> f64 {
    metrics::spatial_frequency(&img.inner)
}

#[pymodule]
fn fusekit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PyPair>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(make_phantom_pair, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(compose_fields, m)?)?;
    m.add_function(wrap_pyfunction!(smoothness_loss, m)?)?;
    m.add_function(wrap_pyfunction!(registration_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(fusion_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(spatial_frequency, m)?)?;
    Ok(())
}
