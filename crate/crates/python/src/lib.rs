//! Python bindings for `mssdepth`.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mssdepth::config::RunConfig as CoreRunConfig;
use mssdepth::events::{self, DepthFrame, Event, Geometry, Polarity, StackMode, StackedTensor};
use mssdepth::harness::{self, Dataset};
use mssdepth::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mssdepth::model::{Block, Model as CoreModel};
use mssdepth::neuron::{if_multistep as core_if_multistep, IfParams};
use mssdepth::objective::{self, LossConfig, SsiSign};
use mssdepth::synth::{dataset_manifest, generate, SceneSpec};
use mssdepth::tensor::{io, ParamStore, Tape, Tensor as CoreTensor};
use mssdepth::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for mssdepth::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Dense f64 tensor, row-major.
#[pyclass(module = "mssdepth_py", from_py_object)]
#[derive(Clone)]
struct Tensor {
    inner: CoreTensor,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Tensor {
            inner: CoreTensor::new(shape, data).py()?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Tensor {
            inner: CoreTensor::zeros(&shape),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn sum(&self) -> f64 {
        self.inner.sum()
    }

    fn get(&self, index: Vec<usize>) -> PyResult<f64> {
        let s = self.inner.shape();
        if index.len() != s.len() || index.iter().zip(s).any(|(i, n)| i >= n) {
            return Err(PyValueError::new_err(format!("index {index:?} out of range for shape {s:?}")));
        }
        Ok(self.inner.get(&index))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &Tensor) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn wrap(t: CoreTensor) -> Tensor {
    Tensor { inner: t }
}

#[pyfunction]
fn read_tensor(path: PathBuf) -> PyResult<Tensor> {
    io::read_tensor(&path).py().map(wrap)
}

#[pyfunction]
fn write_tensor(path: PathBuf, tensor: &Tensor) -> PyResult<()> {
    io::write_tensor(&path, &tensor.inner).py()
}

type PyEvent = (u64, u32, u32, i8);

fn to_events(events: Vec<PyEvent>) -> PyResult<Vec<Event>> {
    events
        .into_iter()
        .map(|(t, x, y, p)| {
            let p = match p {
                1 => Polarity::Positive,
                -1 | 0 => Polarity::Negative,
                other => return Err(PyValueError::new_err(format!("polarity must be 1, 0 or -1, got {other}"))),
            };
            Ok(Event { t, x, y, p })
        })
        .collect()
}

/// Reads an event CSV into `(t_us, x, y, polarity)` tuples, polarity ±1.
#[pyfunction]
fn read_events(path: PathBuf) -> PyResult<Vec<PyEvent>> {
    Ok(events::read_events(&path)
        .py()?
        .into_iter()
        .map(|e| (e.t, e.x, e.y, e.p.sign()))
        .collect())
}

fn stack_with(
    mode: StackMode,
    events: Vec<PyEvent>,
    window_start_us: u64,
    window_len_us: u64,
    steps: usize,
    height: usize,
    width: usize,
) -> PyResult<Tensor> {
    let evs = to_events(events)?;
    let g = Geometry::new(height, width);
    Ok(wrap(
        events::stack(mode, &evs, window_start_us, window_len_us, steps, g).py()?.data,
    ))
}

/// Per-sub-bin running event counts `[T, 2, H, W]`.
#[pyfunction]
#[pyo3(signature = (events, window_start_us, window_len_us, steps, height, width))]
fn cumulative_stack(
    events: Vec<PyEvent>,
    window_start_us: u64,
    window_len_us: u64,
    steps: usize,
    height: usize,
    width: usize,
) -> PyResult<Tensor> {
    stack_with(StackMode::Cumulative, events, window_start_us, window_len_us, steps, height, width)
}

/// The whole-window histogram repeated `steps` times.
#[pyfunction]
#[pyo3(signature = (events, window_start_us, window_len_us, steps, height, width))]
fn repeat_stack(
    events: Vec<PyEvent>,
    window_start_us: u64,
    window_len_us: u64,
    steps: usize,
    height: usize,
    width: usize,
) -> PyResult<Tensor> {
    stack_with(StackMode::Repeat, events, window_start_us, window_len_us, steps, height, width)
}

/// Runs IF neurons over the leading axis; returns (spikes, final membrane).
#[pyfunction]
#[pyo3(signature = (input, v_threshold = 1.0, v_reset = 0.0))]
fn if_multistep(input: &Tensor, v_threshold: f64, v_reset: f64) -> PyResult<(Tensor, Tensor)> {
    let p = IfParams {
        v_threshold,
        v_reset,
        ..IfParams::default()
    };
    p.validate().py()?;
    let (s, v) = core_if_multistep(&input.inner, &p).py()?;
    Ok((wrap(s.expect("spiking mode emits spikes")), wrap(v)))
}

fn frame(gt: &Tensor, valid: Option<Vec<bool>>) -> PyResult<DepthFrame> {
    let valid = valid.unwrap_or_else(|| vec![true; gt.inner.len()]);
    if valid.len() != gt.inner.len() {
        return Err(PyValueError::new_err(format!(
            "mask has {} entries for {} pixels",
            valid.len(),
            gt.inner.len()
        )));
    }
    Ok(DepthFrame {
        depth: gt.inner.clone(),
        valid,
        t: 0,
    })
}

fn loss_config(lambda_reg: f64, sign: &str) -> PyResult<LossConfig> {
    let cfg = LossConfig {
        lambda_reg,
        ssi_sign: sign.parse::<SsiSign>().py()?,
    };
    cfg.validate().py()?;
    Ok(cfg)
}

/// Loss terms of one prediction as a dict with keys `ssi`, `reg`, `total`.
#[pyfunction]
#[pyo3(signature = (pred, gt, valid = None, lambda_reg = 0.5, ssi_sign = "minus"))]
fn loss<'py>(
    py: Python<'py>,
    pred: &Tensor,
    gt: &Tensor,
    valid: Option<Vec<bool>>,
    lambda_reg: f64,
    ssi_sign: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let l = objective::loss_values(&pred.inner, &frame(gt, valid)?, &loss_config(lambda_reg, ssi_sign)?).py()?;
    let d = PyDict::new(py);
    d.set_item("ssi", l.ssi)?;
    d.set_item("reg", l.reg)?;
    d.set_item("total", l.total)?;
    Ok(d)
}

/// Mean absolute depth error over valid pixels, in centimetres.
#[pyfunction]
#[pyo3(signature = (pred, gt, valid = None))]
fn mde(pred: &Tensor, gt: &Tensor, valid: Option<Vec<bool>>) -> PyResult<f64> {
    objective::mde(&pred.inner, &frame(gt, valid)?).py()
}

/// Generates a synthetic dataset from scene-spec text; returns the
/// manifest path.
#[pyfunction]
fn synth(spec: &str, out_dir: PathBuf) -> PyResult<PathBuf> {
    let spec = SceneSpec::parse(spec).py()?;
    let scene = generate(&spec).py()?;
    std::fs::create_dir_all(&out_dir).map_err(|e| PyOSError::new_err(format!("{}: {e}", out_dir.display())))?;
    dataset_manifest(&spec, &scene, &out_dir).py()
}

/// Run configuration; construct from `key = value` text.
#[pyclass(module = "mssdepth_py", from_py_object)]
#[derive(Clone)]
struct RunConfig {
    inner: CoreRunConfig,
}

#[pymethods]
impl RunConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(RunConfig {
            inner: CoreRunConfig::parse(text).py()?,
        })
    }

    /// Sets one key from its text form.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(0, key, value).py()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py()
    }

    fn __eq__(&self, other: &RunConfig) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("RunConfig({} keys)", self.inner.to_text().lines().count())
    }
}

/// Trains on a dataset directory; returns the outcome as a dict.
#[pyfunction]
#[pyo3(signature = (config, data_dir, out_dir, resume = None))]
fn train<'py>(
    py: Python<'py>,
    config: &RunConfig,
    data_dir: PathBuf,
    out_dir: PathBuf,
    resume: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let data = Dataset::load(&data_dir).py()?;
    let o = harness::train(&config.inner, &data, &out_dir, resume.as_deref(), false).py()?;
    let d = PyDict::new(py);
    d.set_item("steps", o.steps)?;
    d.set_item("epochs", o.epochs)?;
    d.set_item("final_train_mde_cm", o.final_train_mde_cm)?;
    d.set_item("final_mde_cm", o.final_mde_cm)?;
    d.set_item("best_val_mde_cm", o.best_val_mde_cm)?;
    d.set_item("last_checkpoint", o.last_checkpoint)?;
    d.set_item("best_checkpoint", o.best_checkpoint)?;
    Ok(d)
}

/// A network with its parameters, either freshly initialised or loaded
/// from a checkpoint.
#[pyclass(module = "mssdepth_py")]
struct Model {
    ck: Checkpoint,
    net: CoreModel,
}

fn report_dict<'py>(py: Python<'py>, r: &harness::EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("windows", r.windows)?;
    d.set_item("mde_cm", r.mde_cm)?;
    d.set_item("loss_ssi", r.loss_ssi)?;
    d.set_item("loss_reg", r.loss_reg)?;
    d.set_item("loss_total", r.loss_total)?;
    d.set_item("firing_rate_encoder", r.stats.rate(Block::Encoder))?;
    d.set_item("firing_rate_residual", r.stats.rate(Block::Residual))?;
    d.set_item("firing_rate_decoder", r.stats.rate(Block::Decoder))?;
    d.set_item("firing_rate_total", r.stats.total_rate())?;
    d.set_item("ac_ops", r.stats.ac_ops())?;
    d.set_item("dense_macs", r.dense_macs)?;
    Ok(d)
}

#[pymethods]
impl Model {
    /// Fresh model for `config` at the given input geometry.
    #[new]
    #[pyo3(signature = (config, in_channels, height, width))]
    fn new(config: &RunConfig, in_channels: usize, height: usize, width: usize) -> PyResult<Self> {
        use rand::SeedableRng;
        let cfg = config.inner.model(in_channels, Geometry::new(height, width));
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.inner.seed);
        let net = CoreModel::new(cfg, &mut store, &mut rng).py()?;
        Ok(Model {
            ck: Checkpoint {
                config: cfg,
                store,
                train: Vec::new(),
            },
            net,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).py()?;
        let net = ck.model().py()?;
        Ok(Model { ck, net })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.ck.config, &self.ck.store, &self.ck.train).py()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.ck.store.scalar_count()
    }

    #[getter]
    fn time_steps(&self) -> usize {
        self.ck.config.time_steps
    }

    #[getter]
    fn in_channels(&self) -> usize {
        self.ck.config.in_channels
    }

    /// Forward pass on a stacked input `[T, C, H, W]` from reset
    /// membranes; returns `(depth [H, W], total firing rate)`.
    fn forward(&mut self, input: &Tensor) -> PyResult<(Tensor, f64)> {
        if input.inner.rank() != 4 {
            return Err(PyValueError::new_err(format!("expected [T, C, H, W], got {:?}", input.inner.shape())));
        }
        let x = StackedTensor {
            data: input.inner.clone(),
            window_start: 0,
            window_len: 0,
        };
        let mut tape = Tape::new();
        let vars = self.ck.store.bind(&mut tape);
        let out = self.net.forward(&mut tape, &vars, &x).py()?;
        Ok((wrap(tape.value(out.depth).clone()), out.stats.total_rate()))
    }

    /// Depth for the 50 ms window starting at `window_start_us`.
    #[pyo3(signature = (left, right = None, window_start_us = 0))]
    fn predict(&self, left: Vec<PyEvent>, right: Option<Vec<PyEvent>>, window_start_us: u64) -> PyResult<Tensor> {
        let left = to_events(left)?;
        let right = right.map(to_events).transpose()?;
        harness::predict(&self.ck, &left, right.as_deref(), window_start_us)
            .py()
            .map(wrap)
    }

    /// Metrics over every window of a dataset directory.
    fn evaluate<'py>(&self, py: Python<'py>, data_dir: PathBuf) -> PyResult<Bound<'py, PyDict>> {
        let data = Dataset::load(&data_dir).py()?;
        let r = harness::evaluate_checkpoint(&self.ck, &data).py()?;
        report_dict(py, &r)
    }

    /// The text firing-rate report.
    fn inspect(&self, data_dir: PathBuf) -> PyResult<String> {
        let data = Dataset::load(&data_dir).py()?;
        Ok(harness::evaluate_checkpoint(&self.ck, &data).py()?.inspect_text())
    }

    fn __repr__(&self) -> String {
        let c = &self.ck.config;
        format!(
            "Model(T={}, in_channels={}, base={}, layers={}, {}x{}, params={})",
            c.time_steps,
            c.in_channels,
            c.base_channels,
            c.layers,
            c.geometry.height,
            c.geometry.width,
            self.ck.store.scalar_count()
        )
    }
}

#[pymodule]
fn mssdepth_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<RunConfig>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(read_events, m)?)?;
    m.add_function(wrap_pyfunction!(cumulative_stack, m)?)?;
    m.add_function(wrap_pyfunction!(repeat_stack, m)?)?;
    m.add_function(wrap_pyfunction!(if_multistep, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(mde, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
