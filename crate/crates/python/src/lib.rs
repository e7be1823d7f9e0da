//! Python bindings: rank agreement, exact Shapley values, synthetic data,
//! explanations from checkpoints and agreement reports over dumps.

use std::cell::RefCell;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use concord::agreement::{agreement_matrix, kendall_tau, render_report, AgreementOptions, MatrixLabel, RankMode, Report, ReportFormat, TauVariant};
use concord::attribution::{exact_shapley as shapley, read_dump, MethodId};
use concord::data::{Instance, Split, TaskType};
use concord::harness::{explain_instance, generate_synthetic, ExplainConfig, SyntheticTask};
use concord::models::load_checkpoint;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr<Err: std::fmt::Display>>(s: &str) -> PyResult<T> {
    s.parse().map_err(value_err)
}

/// Kendall rank correlation, or None when either input is fully tied.
#[pyfunction]
#[pyo3(name = "kendall_tau", signature = (x, y, variant = "b", absolute = false))]
fn kendall_tau_py(x: Vec<f64>, y: Vec<f64>, variant: &str, absolute: bool) -> PyResult<Option<f64>> {
    let variant = match variant {
        "a" => TauVariant::A,
        "b" => TauVariant::B,
        other => return Err(value_err(format!("unknown variant `{other}` (expected a or b)"))),
    };
    let mode = if absolute { RankMode::Absolute } else { RankMode::Signed };
    kendall_tau(&x, &y, variant, mode).map_err(value_err)
}

/// Shapley values of `value(mask) -> float` over `n` players.
#[pyfunction]
fn exact_shapley(value: Bound<'_, PyAny>, n: usize) -> PyResult<Vec<f64>> {
    let failure: RefCell<Option<PyErr>> = RefCell::new(None);
    let phi = shapley(
        |mask| match value.call1((mask,)).and_then(|v| v.extract::<f64>()) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        },
        n,
    )
    .map_err(value_err)?;
    match failure.into_inner() {
        Some(e) => Err(e),
        None => Ok(phi),
    }
}

/// Generated instances as a list of dicts.
#[pyfunction]
#[pyo3(signature = (task, size = 1000, seed = 0))]
fn synthetic<'py>(py: Python<'py>, task: &str, size: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let task: SyntheticTask = parse(task)?;
    let data = generate_synthetic(task, size, seed).map_err(value_err)?;
    let text = serde_json::to_string(&data.instances).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Scores one token sequence (or pair) with a trained checkpoint.
#[pyfunction]
#[pyo3(signature = (checkpoint, tokens, method, tokens2 = None, seed = 0))]
fn explain<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    tokens: Vec<String>,
    method: &str,
    tokens2: Option<Vec<String>>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let method: MethodId = parse(method)?;
    let (model, _) = load_checkpoint(&checkpoint).map_err(value_err)?;
    let instance = Instance {
        id: "input".into(),
        tokens,
        tokens2,
        label: 0,
        split: Split::Test,
    };
    let config = ExplainConfig { seed, ..ExplainConfig::default() };
    let explanation = py
        .detach(|| explain_instance(&model, &instance, method, &config, seed))
        .map_err(runtime_err)?;
    let text = serde_json::to_string(&explanation).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Pairwise agreement over an attribution dump, rendered as markdown, csv or json.
#[pyfunction]
#[pyo3(signature = (dump, methods, format = "markdown", dataset = "dump", model = "model", task_type = "single"))]
fn agreement_report(dump: PathBuf, methods: Vec<String>, format: &str, dataset: &str, model: &str, task_type: &str) -> PyResult<String> {
    let methods = methods.iter().map(|m| parse::<MethodId>(m)).collect::<PyResult<Vec<_>>>()?;
    let format: ReportFormat = parse(format)?;
    let task_type: TaskType = serde_json::from_value(serde_json::Value::String(task_type.into())).map_err(value_err)?;
    let records = read_dump(&dump).map_err(value_err)?;
    let label = MatrixLabel {
        dataset: dataset.into(),
        model: model.into(),
        task_type,
    };
    let matrix = agreement_matrix(&records, &methods, &AgreementOptions::default(), &label).map_err(value_err)?;
    let report = Report {
        matrices: vec![matrix],
        summaries: Vec::new(),
    };
    render_report(&report, format).map_err(runtime_err)
}

#[pymodule]
fn concord_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(kendall_tau_py, m)?)?;
    m.add_function(wrap_pyfunction!(exact_shapley, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(explain, m)?)?;
    m.add_function(wrap_pyfunction!(agreement_report, m)?)?;
    Ok(())
}
