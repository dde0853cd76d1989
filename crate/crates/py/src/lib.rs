//! Python bindings for the `fedcpu` simulator.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;

use fedcpu::bound::{optimality_gap_bound, BoundConstants, ScheduleEntry};
use fedcpu::channel::{sample_channel, ChannelConfig, ChannelRealization};
use fedcpu::coeff_select::{self, LearningTerms, MetricInputs, SelectionConfig};
use fedcpu::encoder::{self, LocalUpdate};
use fedcpu::harness::{self, ExperimentConfig};
use fedcpu::lattice::{LatticeKind, LatticeSpec};
use fedcpu::receiver;
use fedcpu::seed::SimRng;

fn err(e: fedcpu::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<nalgebra::DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("expected a non-empty rectangular matrix"));
    }
    Ok(nalgebra::DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn rows_of(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Scaled lattice `ρ·G·ℤⁿ`.
#[pyclass(name = "Lattice", skip_from_py_object)]
#[derive(Clone)]
struct PyLattice {
    inner: LatticeSpec,
}

#[pymethods]
impl PyLattice {
    #[new]
    #[pyo3(signature = (kind = "e8", scale = 1.0, generator = None))]
    fn new(kind: &str, scale: f64, generator: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let inner = match generator {
            Some(g) => LatticeSpec::custom(matrix(&g)?, scale),
            None => kind.parse::<LatticeKind>().and_then(|k| LatticeSpec::new(k, scale)),
        }
        .map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.name()
    }

    #[getter]
    fn block_dim(&self) -> usize {
        self.inner.block_dim()
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.inner.scale()
    }

    #[getter]
    fn packing_radius(&self) -> f64 {
        self.inner.packing_radius()
    }

    fn generator(&self) -> Vec<Vec<f64>> {
        rows_of(&self.inner.generator())
    }

    fn nearest_point(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.nearest_point(&x).map_err(err)?.point)
    }

    /// Exhaustive sphere-decoding reference for one block.
    fn enumerate_nearest(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.enumerate_nearest(&x).map_err(err)
    }

    fn quantize(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.quantize(&x).map_err(err)
    }

    #[pyo3(signature = (p, tol = 1e-9))]
    fn contains(&self, p: Vec<f64>, tol: f64) -> bool {
        self.inner.contains(&p, tol)
    }

    fn sample_dither(&self, s: usize, seed: u64) -> PyResult<Vec<f64>> {
        let mut rng = SimRng::seed_from_u64(seed);
        Ok(self.inner.sample_dither(s, &mut rng).map_err(err)?.values)
    }

    /// Per-dimension second moment `σ_q²`; closed form where known.
    #[pyo3(signature = (samples = 100_000, seed = 0))]
    fn second_moment(&mut self, samples: usize, seed: u64) -> PyResult<f64> {
        let mut rng = SimRng::seed_from_u64(seed);
        self.inner.second_moment(samples, &mut rng).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Lattice(kind='{}', scale={})", self.inner.name(), self.inner.scale())
    }
}

/// Real-form `2M×K` channel.
#[pyclass(name = "Channel")]
struct PyChannel {
    inner: ChannelRealization,
}

#[pymethods]
impl PyChannel {
    #[staticmethod]
    #[pyo3(signature = (antennas, devices, seed, snr = 10.0, fading_scale = 5.0))]
    fn sample(antennas: usize, devices: usize, seed: u64, snr: f64, fading_scale: f64) -> PyResult<Self> {
        let cfg = ChannelConfig {
            antennas,
            devices,
            snr,
            fading_scale,
            ..Default::default()
        };
        let mut rng = SimRng::seed_from_u64(seed);
        Ok(Self {
            inner: sample_channel(&cfg, &mut rng).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_real(h: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self {
            inner: ChannelRealization::from_real(matrix(&h)?).map_err(err)?,
        })
    }

    #[getter]
    fn antennas(&self) -> usize {
        self.inner.antennas()
    }

    #[getter]
    fn devices(&self) -> usize {
        self.inner.devices()
    }

    fn real(&self) -> Vec<Vec<f64>> {
        rows_of(&self.inner.h_real)
    }
}

/// Returns `(w_hat, mean, std)`.
#[pyfunction]
fn normalize_update(delta_w: Vec<f64>) -> PyResult<(Vec<f64>, f64, f64)> {
    let nu = encoder::normalize_update(&LocalUpdate { device_id: 0, delta_w }).map_err(err)?;
    Ok((nu.w_hat, nu.mean, nu.std))
}

#[pyfunction]
fn transmit_gain(power: f64, second_moment: f64) -> f64 {
    encoder::transmit_gain(power, second_moment)
}

#[pyfunction]
fn optimal_equalizer(h: &PyChannel, a: Vec<i64>, snr: f64) -> PyResult<Vec<f64>> {
    Ok(receiver::optimal_equalizer(&h.inner, &a, snr).map_err(err)?.b)
}

#[pyfunction]
#[pyo3(signature = (h, a, snr, second_moment, s, b = None))]
fn decoding_mse(
    h: &PyChannel,
    a: Vec<i64>,
    snr: f64,
    second_moment: f64,
    s: usize,
    b: Option<Vec<f64>>,
) -> PyResult<f64> {
    match b {
        Some(b) => receiver::decoding_mse_with(&h.inner, &a, &b, snr, second_moment, s),
        None => receiver::decoding_mse(&h.inner, &a, snr, second_moment, s),
    }
    .map_err(err)
}

#[pyfunction]
fn optimal_eta(a: Vec<i64>, sigmas: Vec<f64>, second_moment: f64) -> PyResult<f64> {
    receiver::optimal_eta(&a, &sigmas, second_moment).map_err(err)
}

/// QMSE at `eta`, or at the optimal `η` when omitted.
#[pyfunction]
#[pyo3(signature = (a, sigmas, second_moment, s, eta = None))]
fn quantization_mse(a: Vec<i64>, sigmas: Vec<f64>, second_moment: f64, s: usize, eta: Option<f64>) -> PyResult<f64> {
    match eta {
        Some(eta) => receiver::quantization_mse_at(&a, &sigmas, second_moment, s, eta),
        None => receiver::quantization_mse(&a, &sigmas, second_moment, s),
    }
    .map_err(err)
}

#[pyfunction]
fn mismatch(a: Vec<i64>) -> f64 {
    coeff_select::mismatch(&a)
}

#[allow(clippy::too_many_arguments)]
fn metric_inputs(
    sigmas: Vec<f64>,
    second_moment: f64,
    s: usize,
    lr: f64,
    grad_var: f64,
    batch: usize,
    local_steps: usize,
) -> MetricInputs {
    MetricInputs {
        learning: LearningTerms {
            lr,
            grad_var,
            batch,
            local_steps,
        },
        sigmas,
        second_moment,
        s,
    }
}

fn coefficients_dict<'py>(py: Python<'py>, c: &coeff_select::CoefficientVector) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("a", c.a.clone())?;
    d.set_item("metric", c.metric)?;
    d.set_item("dmse_slack", c.dmse_slack)?;
    d.set_item("infeasible", c.infeasible)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (h, snr, second_moment, theta, sigmas, s, lr = 0.01, grad_var = 1.0, batch = 100, local_steps = 3))]
#[allow(clippy::too_many_arguments)]
fn select_coefficients<'py>(
    py: Python<'py>,
    h: &PyChannel,
    snr: f64,
    second_moment: f64,
    theta: f64,
    sigmas: Vec<f64>,
    s: usize,
    lr: f64,
    grad_var: f64,
    batch: usize,
    local_steps: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let inputs = metric_inputs(sigmas, second_moment, s, lr, grad_var, batch, local_steps);
    let c = coeff_select::select_coefficients(&h.inner, snr, second_moment, &SelectionConfig::new(theta), &inputs)
        .map_err(err)?;
    coefficients_dict(py, &c)
}

/// Exhaustive search over `{0..bound}ᴷ`; `None` when nothing meets the budget.
#[pyfunction]
#[pyo3(signature = (h, snr, second_moment, theta, sigmas, s, bound = 5, lr = 0.01, grad_var = 1.0, batch = 100, local_steps = 3))]
#[allow(clippy::too_many_arguments)]
fn brute_force_oracle<'py>(
    py: Python<'py>,
    h: &PyChannel,
    snr: f64,
    second_moment: f64,
    theta: f64,
    sigmas: Vec<f64>,
    s: usize,
    bound: i64,
    lr: f64,
    grad_var: f64,
    batch: usize,
    local_steps: usize,
) -> PyResult<Option<Bound<'py, PyDict>>> {
    let inputs = metric_inputs(sigmas, second_moment, s, lr, grad_var, batch, local_steps);
    coeff_select::brute_force_oracle(&h.inner, snr, theta, &inputs, bound)
        .map_err(err)?
        .map(|c| coefficients_dict(py, &c))
        .transpose()
}

/// Optimality-gap bound after a schedule of `(lr, a, qmse)` rounds.
#[pyfunction]
#[pyo3(signature = (schedule, local_steps, batch, smoothness = 1.0, pl = 0.1, grad_var = 1.0, initial_gap = 1.0))]
fn gap_bound(
    schedule: Vec<(f64, Vec<i64>, f64)>,
    local_steps: usize,
    batch: usize,
    smoothness: f64,
    pl: f64,
    grad_var: f64,
    initial_gap: f64,
) -> PyResult<(f64, Vec<f64>)> {
    let c = BoundConstants {
        smoothness,
        pl,
        grad_var,
        initial_gap,
    };
    let sched: Vec<ScheduleEntry> = schedule
        .into_iter()
        .map(|(lr, a, qmse)| ScheduleEntry { lr, a, qmse })
        .collect();
    let g = optimality_gap_bound(&c, &sched, local_steps, batch).map_err(err)?;
    Ok((g.value, g.trace))
}

/// Experiment configuration; mirrors the TOML schema.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => ExperimentConfig::from_toml_str(t).map_err(err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    /// Laptop-sized base configuration.
    #[staticmethod]
    fn desk() -> Self {
        Self {
            inner: harness::desk_scale(),
        }
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::from_file(&path).map_err(err)?,
        })
    }

    /// Dotted override such as `"channel.snr=20"`.
    fn set(&mut self, assignment: &str) -> PyResult<()> {
        self.inner.apply_override(assignment).map_err(err)
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) {
        self.inner.seeds = seeds;
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={})", self.inner.hash())
    }
}

/// Run every seed; returns one dict per `(seed, round)`. Writes `rounds.csv`
/// and `summary.csv` when `out_dir` is given.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    config: &PyConfig,
    out_dir: Option<PathBuf>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config.inner.clone();
    let result = py.detach(|| harness::run_experiment(&cfg)).map_err(err)?;
    if let Some(dir) = out_dir {
        harness::write_outputs(&result, &dir).map_err(err)?;
    }
    result
        .rounds
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("seed", r.seed)?;
            d.set_item("round", r.round)?;
            d.set_item("dmse", r.dmse)?;
            d.set_item("qmse", r.qmse)?;
            d.set_item("metric", r.metric)?;
            d.set_item("decode_error", r.decode_error)?;
            d.set_item("block_error_rate", r.block_error_rate)?;
            d.set_item("a_sum", r.a_sum)?;
            d.set_item("mismatch", r.mismatch)?;
            d.set_item("infeasible", r.infeasible)?;
            d.set_item("eta", r.eta)?;
            d.set_item("test_loss", r.test_loss)?;
            d.set_item("test_accuracy", r.test_accuracy)?;
            d.set_item("gap_bound", r.gap_bound)?;
            d.set_item("config_hash", &result.config_hash)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn fedcpu_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLattice>()?;
    m.add_class::<PyChannel>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(normalize_update, m)?)?;
    m.add_function(wrap_pyfunction!(transmit_gain, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_equalizer, m)?)?;
    m.add_function(wrap_pyfunction!(decoding_mse, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_eta, m)?)?;
    m.add_function(wrap_pyfunction!(quantization_mse, m)?)?;
    m.add_function(wrap_pyfunction!(mismatch, m)?)?;
    m.add_function(wrap_pyfunction!(select_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(gap_bound, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
