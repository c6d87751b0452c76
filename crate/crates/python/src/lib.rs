//! Python bindings: action grammar, relaxed matching, synthetic data, the
//! action transformer with training and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use limac::action_space::{self, ActionRecord, BoundingBox, MatchConfig};
use limac::checkpoint::{load_checkpoint, save_checkpoint};
use limac::config::RunConfig;
use limac::controller::{ActPredictor, MockGenerator};
use limac::encoders::EncoderBundle;
use limac::episode::{episode_stats, load_episodes, write_episodes, DatasetSplit, LoadOptions, SplitName};
use limac::eval::{evaluate, parse_metrics, EvalOptions};
use limac::model::{ActModel, PredictOptions};
use limac::synthetic::{generate_synthetic, SyntheticConfig};
use limac::trainer::{gradient_selfcheck, train};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, s: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (s,))
}

fn split_name(s: &str) -> PyResult<SplitName> {
    s.parse().map_err(|e: String| PyValueError::new_err(e))
}

/// A parsed, validated action.
#[pyclass(name = "Action", frozen, eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct PyAction(ActionRecord);

#[pymethods]
impl PyAction {
    #[new]
    fn new(json: &str) -> PyResult<Self> {
        action_space::parse_action(json).map(Self).map_err(value_err)
    }

    #[getter]
    fn action_type(&self) -> &'static str {
        self.0.action_type().as_str()
    }

    #[getter]
    fn target(&self) -> Option<usize> {
        self.0.target()
    }

    #[getter]
    fn text(&self) -> Option<String> {
        self.0.text_value().map(str::to_string)
    }

    fn is_text_bearing(&self) -> bool {
        self.0.action_type().is_text_bearing()
    }

    fn to_json(&self) -> String {
        action_space::serialize_action(&self.0)
    }

    fn __repr__(&self) -> String {
        format!("Action({})", self.to_json())
    }
}

/// Parses an action from its JSON wire form.
#[pyfunction]
fn parse_action(json: &str) -> PyResult<PyAction> {
    PyAction::new(json)
}

/// The eleven action types in index order.
#[pyfunction]
fn action_types() -> Vec<&'static str> {
    action_space::ActionType::ALL.iter().map(|t| t.as_str()).collect()
}

/// Forced JSON prefix handed to a text generator for a text-bearing type.
#[pyfunction]
fn forced_prefix(action_type: &str) -> PyResult<Option<String>> {
    let ty = action_space::ActionType::ALL
        .into_iter()
        .find(|t| t.as_str() == action_type)
        .ok_or_else(|| PyValueError::new_err(format!("unknown action type {action_type:?}")))?;
    Ok(action_space::forced_prefix(ty))
}

#[pyfunction]
fn relaxed_text_match(predicted: &str, truth: &str) -> bool {
    action_space::relaxed_text_match(predicted, truth)
}

#[pyfunction]
fn jaccard_index(a: &str, b: &str) -> f64 {
    action_space::jaccard_index(a, b)
}

/// Containment of `predicted` in `target`; boxes are `(left, top, right, bottom)`.
#[pyfunction]
#[pyo3(signature = (predicted, target, slack = 0))]
fn relaxed_click_match(predicted: [i64; 4], target: [i64; 4], slack: u32) -> PyResult<bool> {
    let b = |a: [i64; 4]| BoundingBox::from_signed(a[0], a[1], a[2], a[3]).map_err(value_err);
    Ok(action_space::relaxed_click_match(
        &b(predicted)?,
        &b(target)?,
        &MatchConfig { containment_slack: slack },
    ))
}

/// A split of episodes.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset(DatasetSplit);

#[pymethods]
impl PyDataset {
    /// Synthetic split with the default generator config and `episodes` episodes.
    #[staticmethod]
    #[pyo3(signature = (episodes, seed, split = "train"))]
    fn synthetic(episodes: usize, seed: u64, split: &str) -> PyResult<Self> {
        let cfg = SyntheticConfig {
            episodes,
            ..Default::default()
        };
        generate_synthetic(&cfg, seed, split_name(split)?)
            .map(Self)
            .map_err(value_err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, split = "test"))]
    fn load(path: PathBuf, split: &str) -> PyResult<Self> {
        load_episodes(&path, split_name(split)?, &LoadOptions::default())
            .map(Self)
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_episodes(&path, &self.0).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn step_count(&self) -> usize {
        self.0.step_count()
    }

    fn episode_ids(&self) -> Vec<String> {
        self.0.episodes.iter().map(|e| e.id().to_string()).collect()
    }

    /// One episode as a dict in the JSONL schema.
    fn episode<'py>(&self, py: Python<'py>, id: &str) -> PyResult<Bound<'py, PyAny>> {
        let ep = self
            .0
            .find(id)
            .ok_or_else(|| PyKeyError::new_err(id.to_string()))?;
        json_to_py(py, &ep.to_json_line())
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &serde_json::to_string(&episode_stats(&self.0)).map_err(runtime_err)?)
    }
}

/// Action transformer plus encoders, built from a run config.
#[pyclass(name = "Model")]
struct PyModel {
    cfg: RunConfig,
    model: ActModel,
    bundle: EncoderBundle,
}

#[pymethods]
impl PyModel {
    /// `config` is a TOML string with the same keys as the CLI config file.
    #[new]
    #[pyo3(signature = (config = ""))]
    fn new(config: &str) -> PyResult<Self> {
        let cfg = RunConfig::from_toml_str(config).map_err(value_err)?;
        let model = ActModel::new(cfg.model.clone()).map_err(value_err)?;
        let bundle = EncoderBundle::new(cfg.encoder.clone()).map_err(value_err)?;
        Ok(Self { cfg, model, bundle })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, bundle) = load_checkpoint(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let mut cfg = RunConfig::default();
        cfg.model = model.config().clone();
        cfg.encoder = bundle.config().clone();
        Ok(Self { cfg, model, bundle })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.model, &self.bundle, &path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.model.temperature()
    }

    fn parameter_count(&self) -> usize {
        self.model
            .params()
            .iter()
            .chain(self.bundle.params().iter())
            .map(|p| p.value.len())
            .sum()
    }

    /// Trains on `data` and returns the log rows as dicts. Releases the GIL.
    fn train<'py>(&mut self, py: Python<'py>, data: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
        let tcfg = self.cfg.train.clone();
        let (model, bundle) = (&mut self.model, &mut self.bundle);
        let log = py
            .detach(|| train(model, bundle, &data.0, &tcfg, None))
            .map_err(runtime_err)?;
        json_to_py(py, &serde_json::to_string(&log.entries).map_err(runtime_err)?)
    }

    /// Teacher-forced prediction for step `step` of episode `episode_id`.
    fn predict<'py>(
        &self,
        py: Python<'py>,
        data: &PyDataset,
        episode_id: &str,
        step: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let ep = data
            .0
            .find(episode_id)
            .ok_or_else(|| PyKeyError::new_err(episode_id.to_string()))?;
        let opts = PredictOptions {
            restrict_clickable: self.cfg.eval.restrict_clickable,
            ..Default::default()
        };
        let p = self.model.predict(&self.bundle, ep, step, opts).map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("predicted_type", p.predicted_type.as_str())?;
        d.set_item("type_distribution", p.type_distribution)?;
        d.set_item("predicted_element", p.predicted_element)?;
        d.set_item("click_scores", p.click_scores)?;
        Ok(d)
    }

    /// Runs the evaluation passes with the grammar mock generator and
    /// returns the report as a dict.
    #[pyo3(signature = (data, metric = "all", mock_error_rate = 0.0, workers = 1))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data: &PyDataset,
        metric: &str,
        mock_error_rate: f64,
        workers: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let metrics = parse_metrics(metric).map_err(PyValueError::new_err)?;
        let generator = MockGenerator::grammar(mock_error_rate, self.cfg.seed);
        let predictor = ActPredictor {
            model: &self.model,
            bundle: &self.bundle,
            opts: PredictOptions {
                restrict_clickable: self.cfg.eval.restrict_clickable,
                ..Default::default()
            },
        };
        let opts = EvalOptions {
            metrics,
            workers,
            include_long_press: self.cfg.eval.include_long_press,
            matching: self.cfg.eval.matching,
        };
        let report = py
            .detach(|| evaluate(&data.0, &predictor, Some(&generator), &opts))
            .map_err(runtime_err)?;
        json_to_py(py, &report.to_json())
    }

    /// Finite-difference check of every parameter group on the first
    /// `episodes` episodes of `data`. Returns `(passed, {group: max_rel_error})`.
    #[pyo3(signature = (data, episodes = 2, seed = 0))]
    fn gradient_check<'py>(
        &self,
        py: Python<'py>,
        data: &PyDataset,
        episodes: usize,
        seed: u64,
    ) -> PyResult<(bool, Bound<'py, PyDict>)> {
        let batch: Vec<_> = data.0.episodes.iter().take(episodes).collect();
        let report = gradient_selfcheck(&self.model, &self.bundle, &batch, self.cfg.train.click_weight, seed, |_, _| {})
            .map_err(runtime_err)?;
        let d = PyDict::new(py);
        for g in &report.groups {
            d.set_item(&g.name, g.max_rel_error)?;
        }
        Ok((report.passed, d))
    }
}

#[pymodule]
pub fn limac_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAction>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(parse_action, m)?)?;
    m.add_function(wrap_pyfunction!(action_types, m)?)?;
    m.add_function(wrap_pyfunction!(forced_prefix, m)?)?;
    m.add_function(wrap_pyfunction!(relaxed_text_match, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard_index, m)?)?;
    m.add_function(wrap_pyfunction!(relaxed_click_match, m)?)?;
    Ok(())
}
