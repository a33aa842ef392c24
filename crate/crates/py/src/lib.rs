//! Python bindings: configuration, pretraining, the online loop, one-shot
//! forecasting, checkpoints, and the autoscaling simulator.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use e3cast::engine::{
    forecast_once, load_checkpoint, online_run, pretrain, save_checkpoint, EngineConfig,
    EnsembleMode, ModelState, OnlineOptions,
};
use e3cast::series::TimeSeriesTrace;
use e3cast::sim::{simulate, EngineForecaster, Policy, SimConfig};
use e3cast::tensor::Tensor;

fn py_err(e: e3cast::Error) -> PyErr {
    match e {
        e3cast::Error::Io(_) => PyIOError::new_err(e.to_string()),
        e3cast::Error::Config(_) | e3cast::Error::ShapeError(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_ensemble(s: &str) -> PyResult<EnsembleMode> {
    match s {
        "os" => Ok(EnsembleMode::Os),
        "ftpl" => Ok(EnsembleMode::Ftpl),
        "none" => Ok(EnsembleMode::None),
        other => Err(PyValueError::new_err(format!(
            "unknown ensemble mode {other:?} (expected os|ftpl|none)"
        ))),
    }
}

/// Rows of per-channel samples → a regular trace (synthetic timestamps).
fn trace_from_rows(rows: Vec<Vec<f64>>) -> PyResult<TimeSeriesTrace> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("empty data"));
    }
    let cols = rows[0].len();
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must be non-empty and equal-length"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let n = flat.len() / cols;
    let names = (0..cols).map(|c| format!("ch{c}")).collect();
    TimeSeriesTrace::from_values(0, 60, Tensor::new(n, cols, flat), names).map_err(py_err)
}

#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: EngineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (lookback=None, horizon=None, patch_sizes=None, hidden_dim=None,
        attn_dim=None, heads=None, ffn_dim=None, layers=None, epochs=None, batch_size=None,
        offline_lr=None, online_lr=None, weight_decay=None, gamma=None, eta=None,
        ensemble=None, disable_mimo=None, disable_adapter=None, seed=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        lookback: Option<usize>,
        horizon: Option<usize>,
        patch_sizes: Option<Vec<usize>>,
        hidden_dim: Option<usize>,
        attn_dim: Option<usize>,
        heads: Option<usize>,
        ffn_dim: Option<usize>,
        layers: Option<usize>,
        epochs: Option<usize>,
        batch_size: Option<usize>,
        offline_lr: Option<f64>,
        online_lr: Option<f64>,
        weight_decay: Option<f64>,
        gamma: Option<f64>,
        eta: Option<f64>,
        ensemble: Option<&str>,
        disable_mimo: Option<bool>,
        disable_adapter: Option<bool>,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let mut c = EngineConfig::default();
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = $f { c.$f = v; } )* };
        }
        set!(
            lookback, horizon, patch_sizes, hidden_dim, attn_dim, heads, ffn_dim, layers,
            epochs, batch_size, offline_lr, online_lr, weight_decay, gamma, eta,
            disable_mimo, disable_adapter, seed
        );
        if let Some(e) = ensemble {
            c.ensemble = parse_ensemble(e)?;
        }
        c.backbone().map_err(py_err)?;
        Ok(PyConfig { inner: c })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: EngineConfig =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.backbone().map_err(py_err)?;
        Ok(PyConfig { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn lookback(&self) -> usize {
        self.inner.lookback
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon
    }

    #[getter]
    fn patch_sizes(&self) -> Vec<usize> {
        self.inner.patch_sizes.clone()
    }

    #[getter]
    fn ensemble(&self) -> String {
        match self.inner.ensemble {
            EnsembleMode::Os => "os".into(),
            EnsembleMode::Ftpl => "ftpl".into(),
            EnsembleMode::None => "none".into(),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(lookback={}, horizon={}, patch_sizes={:?}, ensemble={})",
            self.inner.lookback,
            self.inner.horizon,
            self.inner.patch_sizes,
            self.ensemble()
        )
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: ModelState,
}

#[pymethods]
impl PyModel {
    /// Offline pretraining over `data` (list of rows, one value per channel).
    #[staticmethod]
    fn pretrain(data: Vec<Vec<f64>>, config: &PyConfig) -> PyResult<Self> {
        let trace = trace_from_rows(data)?;
        let inner = pretrain(&trace, &config.inner).map_err(py_err)?;
        Ok(PyModel { inner })
    }

    /// Replay the stream online (predict → feedback → update) and return the
    /// replay metrics. `freeze=True` keeps the model fixed (baseline runs).
    #[pyo3(signature = (data, freeze=false))]
    fn online_run<'py>(
        &mut self,
        py: Python<'py>,
        data: Vec<Vec<f64>>,
        freeze: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let trace = trace_from_rows(data)?;
        let options = OnlineOptions { freeze, ..OnlineOptions::default() };
        let out = online_run(&mut self.inner, &trace, &options).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("mse", out.metrics.mse)?;
        d.set_item("mae", out.metrics.mae)?;
        d.set_item("wmape", out.metrics.wmape)?;
        d.set_item("per_step_losses", out.metrics.per_step_losses)?;
        d.set_item("steps", out.steps.len())?;
        if out.ledger.steps() >= 2 {
            let report = out.ledger.report();
            d.set_item("regret_slope", report.slope)?;
            d.set_item("best_expert", report.best_expert)?;
        }
        Ok(d)
    }

    /// One combined forecast from the trailing `lookback` rows of `history`;
    /// returns `[channel][step]` in the original units.
    fn forecast(&self, history: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let l = self.inner.config.lookback;
        if history.len() < l {
            return Err(PyValueError::new_err(format!(
                "history has {} rows, lookback needs {l}",
                history.len()
            )));
        }
        let tail = history[history.len() - l..].to_vec();
        let trace = trace_from_rows(tail)?;
        let hist = trace.rows(0, l);
        forecast_once(&self.inner, &hist, None).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, std::path::Path::new(path)).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = load_checkpoint(std::path::Path::new(path)).map_err(py_err)?;
        Ok(PyModel { inner })
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig { inner: self.inner.config.clone() }
    }
}

/// Run the autoscaling queue model over a rate trace (one value per tick).
/// `policy` is naive|ideal|predictive; predictive needs a trained `model`.
#[pyfunction]
#[pyo3(signature = (policy, rates, model=None, pod_capacity=100.0, target_utilization=0.5,
    pod_startup_delay=60, scale_interval=60, min_pods=1, max_pods=100, base_latency=0.05,
    tick=1, ticks_per_sample=1))]
#[allow(clippy::too_many_arguments)]
fn simulate_hpa<'py>(
    py: Python<'py>,
    policy: &str,
    rates: Vec<f64>,
    model: Option<&PyModel>,
    pod_capacity: f64,
    target_utilization: f64,
    pod_startup_delay: u64,
    scale_interval: u64,
    min_pods: usize,
    max_pods: usize,
    base_latency: f64,
    tick: u64,
    ticks_per_sample: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let policy = match policy {
        "naive" => Policy::Naive,
        "ideal" => Policy::Ideal,
        "predictive" => Policy::Predictive,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown policy {other:?} (expected naive|ideal|predictive)"
            )))
        }
    };
    let workload = trace_from_rows(rates.into_iter().map(|r| vec![r]).collect())?;
    let cfg = SimConfig {
        pod_capacity,
        target_utilization,
        pod_startup_delay,
        scale_interval,
        min_pods,
        max_pods,
        base_latency,
        tick,
    };
    let mut forecaster = model.map(|m| EngineForecaster {
        state: m.inner.clone(),
        ticks_per_sample,
    });
    let provider = forecaster.as_mut().map(|f| f as &mut dyn e3cast::sim::ForecastProvider);
    let (report, _ticks) = simulate(policy, &workload, &cfg, provider).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("ave_lat", report.ave_lat)?;
    d.set_item("max_lat", report.max_lat)?;
    d.set_item("p999_lat", report.p999_lat)?;
    d.set_item("p99_lat", report.p99_lat)?;
    d.set_item("p90_lat", report.p90_lat)?;
    d.set_item("ave_pod", report.ave_pod)?;
    d.set_item("max_pod", report.max_pod)?;
    Ok(d)
}

#[pymodule]
fn e3cast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(simulate_hpa, m)?)?;
    Ok(())
}
