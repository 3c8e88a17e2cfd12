use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use padnet::checkpoint::Checkpoint;
use padnet::data::{generate_scene as synth_scene, LabelMap, Sample, SceneConfig, IGNORE_LABEL};
use padnet::gradcheck::GradcheckOptions;
use padnet::metrics::{depth_metrics as depth_metrics_impl, parsing_metrics as parsing_metrics_impl, RelDenominator};
use padnet::model::build_params;
use padnet::train::{evaluate, predict, two_phase_train};
use padnet::{ExperimentConfig, NetworkConfig as CoreNetworkConfig, ParamStore, Shape4, Tensor4};

fn err(e: padnet::Error) -> PyErr {
    match e {
        padnet::Error::Config(_) | padnet::Error::Usage(_) | padnet::Error::Data(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Architecture settings.
#[pyclass(name = "NetworkConfig", from_py_object)]
#[derive(Clone)]
struct PyNetworkConfig {
    inner: CoreNetworkConfig,
}

#[pymethods]
impl PyNetworkConfig {
    #[staticmethod]
    #[pyo3(signature = (num_classes = 5))]
    fn desk(num_classes: usize) -> Self {
        Self {
            inner: CoreNetworkConfig::desk(num_classes),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (num_classes = 3))]
    fn tiny(num_classes: usize) -> Self {
        Self {
            inner: CoreNetworkConfig::tiny(num_classes),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: CoreNetworkConfig = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("config serializes")
    }

    fn digest(&self) -> u64 {
        self.inner.digest()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn distill_variant(&self) -> &'static str {
        self.inner.distill_variant.name()
    }

    fn __repr__(&self) -> String {
        format!(
            "NetworkConfig(variant={}, head_width={}, classes={})",
            self.inner.distill_variant.name(),
            self.inner.head_width,
            self.inner.num_classes
        )
    }
}

/// One synthetic scene; maps are flat row-major lists.
#[pyclass(name = "Sample", from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: Sample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// `3*H*W` values, channel-major.
    fn image(&self) -> Vec<f64> {
        self.inner.image.data().to_vec()
    }

    fn depth(&self) -> Vec<f64> {
        self.inner.depth.data().to_vec()
    }

    fn valid_mask(&self) -> Vec<f64> {
        self.inner.valid_mask.data().to_vec()
    }

    fn labels(&self) -> Vec<u8> {
        self.inner.labels.data.clone()
    }

    fn normals(&self) -> Vec<f64> {
        self.inner.normal.data().to_vec()
    }

    fn contours(&self) -> Vec<f64> {
        self.inner.contour.data().to_vec()
    }
}

#[pyfunction]
#[pyo3(signature = (seed, height = 64, width = 64, num_classes = 5))]
fn generate_scene(seed: u64, height: usize, width: usize, num_classes: usize) -> PyResult<PySample> {
    let cfg = SceneConfig {
        height,
        width,
        num_classes,
        ..SceneConfig::default()
    };
    Ok(PySample {
        inner: synth_scene(seed, &cfg).map_err(err)?,
    })
}

/// Network parameters bound to a config.
#[pyclass(name = "Model", skip_from_py_object)]
struct PyModel {
    config: CoreNetworkConfig,
    params: ParamStore,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: PyNetworkConfig, seed: u64) -> PyResult<Self> {
        let params = build_params(&config.inner, seed).map_err(err)?;
        Ok(Self {
            config: config.inner,
            params,
        })
    }

    /// Trains with the desk schedule on `samples`; returns the loss curve as
    /// `(iteration, phase, L_all)` tuples.
    #[staticmethod]
    #[pyo3(signature = (config, samples, seed = 0, phase1_epochs = 2, phase2_epochs = 4))]
    fn train(
        config: PyNetworkConfig,
        samples: Vec<PySample>,
        seed: u64,
        phase1_epochs: usize,
        phase2_epochs: usize,
    ) -> PyResult<(Self, Vec<(u64, u8, f64)>)> {
        let mut training = ExperimentConfig::desk().training;
        training.phase1_epochs = phase1_epochs;
        training.phase2_epochs = phase2_epochs;
        let data: Vec<Sample> = samples.into_iter().map(|s| s.inner).collect();
        let state = two_phase_train(&config.inner, &training, &data, seed, |_, _| Ok(())).map_err(|f| err(f.error))?;
        let curve = state.curve.iter().map(|r| (r.iteration, r.phase, r.report.total)).collect();
        Ok((
            Self {
                config: config.inner,
                params: state.params,
            },
            curve,
        ))
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Final depth map and argmax labels for one sample; `None` for tasks the
    /// config does not predict.
    fn predict(&self, sample: &PySample) -> PyResult<(Option<Vec<f64>>, Option<Vec<u8>>)> {
        let (depth, labels) = predict(&self.params, &self.config, &sample.inner.image).map_err(err)?;
        Ok((depth.map(Tensor4::into_vec), labels.map(|l| l.data)))
    }

    /// Depth and parsing metrics over `samples`.
    #[pyo3(signature = (samples, rel_denominator = "gt"))]
    fn evaluate<'py>(&self, py: Python<'py>, samples: Vec<PySample>, rel_denominator: &str) -> PyResult<Bound<'py, PyDict>> {
        let denom: RelDenominator = rel_denominator.parse().map_err(PyValueError::new_err)?;
        let data: Vec<Sample> = samples.into_iter().map(|s| s.inner).collect();
        let e = evaluate(&self.params, &self.config, &data, denom, false).map_err(err)?;
        let out = PyDict::new(py);
        if let Some(d) = e.depth {
            out.set_item("rel", d.rel)?;
            out.set_item("rms", d.rms)?;
            out.set_item("log10", d.log10)?;
            out.set_item("delta1", d.delta1)?;
        }
        if let Some(p) = e.parsing {
            out.set_item("mean_iou", p.mean_iou)?;
            out.set_item("mean_accuracy", p.mean_accuracy)?;
            out.set_item("pixel_accuracy", p.pixel_accuracy)?;
        }
        Ok(out)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let ckpt = Checkpoint {
            config_digest: self.config.digest(),
            iteration: 0,
            phase: 0,
            params: self.params.clone(),
            velocities: Default::default(),
        };
        ckpt.save(path).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str, config: PyNetworkConfig) -> PyResult<Self> {
        let ckpt = Checkpoint::load(path).map_err(err)?;
        if ckpt.config_digest != config.inner.digest() {
            return Err(PyValueError::new_err("checkpoint was saved for a different architecture"));
        }
        Ok(Self {
            config: config.inner,
            params: ckpt.params,
        })
    }
}

/// Depth metrics of flat `pred`/`gt`/`mask` lists.
#[pyfunction]
#[pyo3(signature = (pred, gt, mask, rel_denominator = "gt"))]
fn depth_metrics<'py>(
    py: Python<'py>,
    pred: Vec<f64>,
    gt: Vec<f64>,
    mask: Vec<f64>,
    rel_denominator: &str,
) -> PyResult<Option<Bound<'py, PyDict>>> {
    let denom: RelDenominator = rel_denominator.parse().map_err(PyValueError::new_err)?;
    let s = Shape4::new(1, 1, 1, pred.len());
    let t = |v: Vec<f64>| Tensor4::from_vec(s, v).map_err(err);
    let Some(m) = depth_metrics_impl(&t(pred)?, &t(gt)?, &t(mask)?, denom).map_err(err)? else {
        return Ok(None);
    };
    let out = PyDict::new(py);
    for (k, v) in [
        ("rel", m.rel),
        ("rms", m.rms),
        ("log10", m.log10),
        ("delta1", m.delta1),
        ("delta2", m.delta2),
        ("delta3", m.delta3),
    ] {
        out.set_item(k, v)?;
    }
    Ok(Some(out))
}

/// Parsing metrics of flat label lists; 255 is ignored.
#[pyfunction]
fn parsing_metrics<'py>(py: Python<'py>, pred: Vec<u8>, gt: Vec<u8>, num_classes: usize) -> PyResult<Option<Bound<'py, PyDict>>> {
    let n = pred.len();
    let p = LabelMap::from_vec(1, 1, n, pred).map_err(err)?;
    let g = LabelMap::from_vec(1, 1, gt.len(), gt).map_err(err)?;
    let Some(m) = parsing_metrics_impl(&p, &g, num_classes, IGNORE_LABEL).map_err(err)? else {
        return Ok(None);
    };
    let out = PyDict::new(py);
    out.set_item("mean_iou", m.mean_iou)?;
    out.set_item("mean_accuracy", m.mean_accuracy)?;
    out.set_item("pixel_accuracy", m.pixel_accuracy)?;
    out.set_item("per_class_iou", m.per_class_iou)?;
    Ok(Some(out))
}

/// Finite-difference gradient check; returns `(passed, max_rel_error, table)`.
#[pyfunction]
#[pyo3(signature = (config, seed = 0))]
fn gradcheck(config: PyNetworkConfig, seed: u64) -> PyResult<(bool, f64, String)> {
    let r = padnet::gradcheck::gradcheck(&config.inner, seed, &GradcheckOptions::default()).map_err(err)?;
    Ok((r.passed(), r.max_rel_error(), r.to_table()))
}

#[pymodule]
fn padnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetworkConfig>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(depth_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(parsing_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
