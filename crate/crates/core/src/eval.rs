//! Teacher-forced evaluation with relaxed action matching.
//!
//! Four passes, each optional: overall (the full gated controller, which also
//! yields action-type accuracy, the confusion matrix, the failure taxonomy
//! and UI-count bins), action type only, click target with the type forced to
//! the ground-truth targeted type, and text with the type forced to the
//! ground-truth text-bearing type.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::{relaxed_action_match, relaxed_click_match, ActionRecord, ActionType, MatchConfig};
use crate::controller::{
    ActionPredictor, Controller, ControllerError, GenerationRequest, GeneratorCapabilities, GeneratorError,
    StepFailure, TextActionGenerator,
};
use crate::episode::{ui_bin, DatasetSplit, Episode, Observation, UI_BIN_WIDTH};
use crate::sequence::History;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty split")]
    EmptySplit,
    #[error("a text-bearing action needs a generator but none is configured")]
    GeneratorUnavailable,
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Overall,
    Type,
    ClickTarget,
    Text,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Overall, Metric::Type, Metric::ClickTarget, Metric::Text];
}

/// Parses `overall | type | click-target | text | all` into a metric set.
pub fn parse_metrics(s: &str) -> Result<BTreeSet<Metric>, String> {
    match s {
        "all" => Ok(Metric::ALL.into_iter().collect()),
        "overall" => Ok([Metric::Overall].into()),
        "type" => Ok([Metric::Type].into()),
        "click-target" => Ok([Metric::ClickTarget].into()),
        "text" => Ok([Metric::Text].into()),
        other => Err(format!("unknown metric {other:?}")),
    }
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        parse_metrics(s).and_then(|m| {
            if m.len() == 1 {
                Ok(*m.iter().next().expect("one metric"))
            } else {
                Err("`all` names several metrics".into())
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub metrics: BTreeSet<Metric>,
    pub workers: usize,
    /// Long-press steps join the click-target pass.
    pub include_long_press: bool,
    pub matching: MatchConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.into_iter().collect(),
            workers: 1,
            include_long_press: true,
            matching: MatchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FailureTaxonomy {
    #[serde(rename = "wrong-type")]
    pub wrong_type: usize,
    #[serde(rename = "wrong-click-target")]
    pub wrong_click_target: usize,
    #[serde(rename = "wrong-text")]
    pub wrong_text: usize,
}

impl FailureTaxonomy {
    pub fn total(&self) -> usize {
        self.wrong_type + self.wrong_click_target + self.wrong_text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    WrongType,
    WrongClickTarget,
    WrongText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UiBin {
    /// Inclusive element-count range.
    pub lo: usize,
    pub hi: usize,
    pub success: usize,
    pub failure: usize,
    /// Five or fewer samples.
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    /// Mean wall-clock seconds per step of predict plus generator calls.
    pub mean_step_secs: f64,
    pub total_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub episodes: usize,
    pub steps: usize,
    pub overall_relaxed_accuracy: Option<f64>,
    pub action_type_accuracy: Option<f64>,
    pub click_target_accuracy: Option<f64>,
    pub click_target_steps: usize,
    pub text_accuracy: Option<f64>,
    pub text_steps: usize,
    /// Labels of confusion rows and columns, in order.
    pub action_types: Vec<String>,
    /// `[truth][predicted]` counts.
    pub confusion_matrix: Option<Vec<Vec<usize>>>,
    pub failure_taxonomy: Option<FailureTaxonomy>,
    pub ui_count_bins: Option<Vec<UiBin>>,
    pub generator_calls: Option<usize>,
    pub generator_call_fraction: Option<f64>,
    /// Steps where the generator was called iff the predicted type was not
    /// text-bearing. Always zero for a sound gate.
    pub gate_violations: Option<usize>,
    /// Steps whose predictor call failed; they count as failures.
    pub predictor_errors: usize,
    pub timing: Timing,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Per-step record from the passes that ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub episode: String,
    pub step: usize,
    pub truth: ActionRecord,
    pub ui_count: usize,
    pub predicted_type: Option<ActionType>,
    pub final_action: Option<ActionRecord>,
    pub overall: Option<bool>,
    pub failure: Option<FailureKind>,
    pub generator_calls: usize,
    pub click_correct: Option<bool>,
    pub text_correct: Option<bool>,
    pub predictor_error: Option<String>,
    pub secs: f64,
}

struct CountingGenerator<'g> {
    inner: &'g dyn TextActionGenerator,
    calls: AtomicUsize,
}

impl TextActionGenerator for CountingGenerator<'_> {
    fn capabilities(&self) -> GeneratorCapabilities {
        self.inner.capabilities()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, GeneratorError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.generate(request)
    }
}

fn fatal(e: ControllerError) -> Result<String, EvalError> {
    match e {
        ControllerError::Generator(g) => Err(EvalError::Generator(g)),
        ControllerError::GeneratorUnavailable => Err(EvalError::GeneratorUnavailable),
        other => Ok(other.to_string()),
    }
}

fn targeted_box_match(obs: &Observation, predicted: usize, truth: usize, cfg: &MatchConfig) -> bool {
    match (obs.box_of(predicted), obs.box_of(truth)) {
        (Some(p), Some(t)) => relaxed_click_match(&p, &t, cfg),
        _ => false,
    }
}

fn classify(pred: &ActionRecord, truth: &ActionRecord) -> FailureKind {
    if pred.action_type() != truth.action_type() {
        FailureKind::WrongType
    } else if truth.action_type().has_target() {
        FailureKind::WrongClickTarget
    } else {
        FailureKind::WrongText
    }
}

fn evaluate_episode(
    episode: &Episode,
    predictor: &dyn ActionPredictor,
    generator: Option<&dyn TextActionGenerator>,
    opts: &EvalOptions,
) -> Result<Vec<StepOutcome>, EvalError> {
    let obs: Vec<&Observation> = episode.steps.iter().map(|s| &s.observation).collect();
    let truth_actions: Vec<ActionRecord> = episode.steps.iter().map(|s| s.action.clone()).collect();
    let m = &opts.metrics;
    let mut out = Vec::with_capacity(episode.len());
    for (t, step) in episode.steps.iter().enumerate() {
        let hist = History {
            goal: &episode.goal,
            observations: &obs,
            actions: &truth_actions[..t],
        };
        let truth = &step.action;
        let mut rec = StepOutcome {
            episode: episode.id().to_string(),
            step: t,
            truth: truth.clone(),
            ui_count: step.observation.len(),
            predicted_type: None,
            final_action: None,
            overall: None,
            failure: None,
            generator_calls: 0,
            click_correct: None,
            text_correct: None,
            predictor_error: None,
            secs: 0.0,
        };

        if m.contains(&Metric::Overall) {
            let counting = generator.map(|g| CountingGenerator {
                inner: g,
                calls: AtomicUsize::new(0),
            });
            let controller = Controller::new(predictor, counting.as_ref().map(|c| c as &dyn TextActionGenerator));
            let start = Instant::now();
            let decision = controller.step(&hist, t);
            rec.secs = start.elapsed().as_secs_f64();
            rec.generator_calls = counting.as_ref().map_or(0, |c| c.calls.load(Ordering::Relaxed));
            match decision {
                Ok(d) => {
                    rec.predicted_type = Some(d.predicted_type);
                    let verdict = match &d.final_action {
                        Ok(a) => {
                            rec.final_action = Some(a.clone());
                            let ok = relaxed_action_match(a, truth, |i| step.observation.box_of(i), &opts.matching)
                                .unwrap_or(false);
                            (ok, classify(a, truth))
                        }
                        Err(StepFailure::Unparseable { .. }) => {
                            let kind = if d.predicted_type == truth.action_type() {
                                FailureKind::WrongText
                            } else {
                                FailureKind::WrongType
                            };
                            (false, kind)
                        }
                    };
                    rec.overall = Some(verdict.0);
                    rec.failure = (!verdict.0).then_some(verdict.1);
                }
                Err(e) => {
                    rec.predictor_error = Some(fatal(e)?);
                    rec.overall = Some(false);
                    rec.failure = Some(FailureKind::WrongType);
                }
            }
        } else if m.contains(&Metric::Type) {
            let start = Instant::now();
            match predictor.predict(&hist, t) {
                Ok(p) => rec.predicted_type = Some(p.predicted_type),
                Err(e) => rec.predictor_error = Some(fatal(e)?),
            }
            rec.secs = start.elapsed().as_secs_f64();
        }

        let ty = truth.action_type();
        let targeted = ty == ActionType::Click || (opts.include_long_press && ty == ActionType::LongPress);
        if m.contains(&Metric::ClickTarget) && targeted {
            let target = truth.target().expect("targeted type has a target");
            rec.click_correct = Some(match predictor.predict_element(&hist, t, ty) {
                Ok(el) => targeted_box_match(&step.observation, el, target, &opts.matching),
                Err(e) => {
                    rec.predictor_error = Some(fatal(e)?);
                    false
                }
            });
        }

        if m.contains(&Metric::Text) && ty.is_text_bearing() {
            let controller = Controller::new(predictor, generator);
            let verdict = match controller.complete_text(&hist, t, ty) {
                Ok(Ok(a)) => relaxed_action_match(&a, truth, |i| step.observation.box_of(i), &opts.matching)
                    .unwrap_or(false),
                Ok(Err(_)) => false,
                Err(e) => {
                    fatal(e)?;
                    false
                }
            };
            rec.text_correct = Some(verdict);
        }
        out.push(rec);
    }
    Ok(out)
}

/// Per-step outcomes in split order.
pub fn evaluate_steps(
    split: &DatasetSplit,
    predictor: &dyn ActionPredictor,
    generator: Option<&dyn TextActionGenerator>,
    opts: &EvalOptions,
) -> Result<Vec<StepOutcome>, EvalError> {
    if split.is_empty() || split.step_count() == 0 {
        return Err(EvalError::EmptySplit);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let per_episode: Vec<Vec<StepOutcome>> = pool.install(|| {
        split
            .episodes
            .par_iter()
            .map(|ep| evaluate_episode(ep, predictor, generator, opts))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(per_episode.into_iter().flatten().collect())
}

fn fraction(hits: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| hits as f64 / n as f64)
}

/// Aggregates step outcomes into a report.
pub fn aggregate(outcomes: &[StepOutcome], episodes: usize, opts: &EvalOptions, total_secs: f64) -> EvalReport {
    let m = &opts.metrics;
    let steps = outcomes.len();
    let count = |f: &dyn Fn(&StepOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count();

    let overall_on = m.contains(&Metric::Overall);
    let type_on = overall_on || m.contains(&Metric::Type);

    let confusion = type_on.then(|| {
        let mut c = vec![vec![0usize; ActionType::COUNT]; ActionType::COUNT];
        for o in outcomes {
            if let Some(p) = o.predicted_type {
                c[o.truth.action_type().index()][p.index()] += 1;
            }
        }
        c
    });
    let type_hits = count(&|o| o.predicted_type == Some(o.truth.action_type()));

    let taxonomy = overall_on.then(|| {
        let mut t = FailureTaxonomy::default();
        for o in outcomes {
            match o.failure {
                Some(FailureKind::WrongType) => t.wrong_type += 1,
                Some(FailureKind::WrongClickTarget) => t.wrong_click_target += 1,
                Some(FailureKind::WrongText) => t.wrong_text += 1,
                None => {}
            }
        }
        t
    });

    let bins = overall_on.then(|| {
        let mut map = std::collections::BTreeMap::<usize, (usize, usize)>::new();
        for o in outcomes {
            let e = map.entry(ui_bin(o.ui_count)).or_default();
            if o.overall == Some(true) {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
        }
        map.into_iter()
            .map(|(lo, (s, f))| UiBin {
                lo,
                hi: lo + UI_BIN_WIDTH - 1,
                success: s,
                failure: f,
                flagged: s + f <= 5,
            })
            .collect()
    });

    let click_steps = count(&|o| o.click_correct.is_some());
    let text_steps = count(&|o| o.text_correct.is_some());
    let gen_calls: usize = outcomes.iter().map(|o| o.generator_calls).sum();
    let violations = count(&|o| {
        o.predicted_type
            .is_some_and(|p| (o.generator_calls > 0) != p.is_text_bearing())
    });
    let timed = outcomes.iter().map(|o| o.secs).sum::<f64>();

    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        episodes,
        steps,
        overall_relaxed_accuracy: if overall_on {
            fraction(count(&|o| o.overall == Some(true)), steps)
        } else {
            None
        },
        action_type_accuracy: if type_on { fraction(type_hits, steps) } else { None },
        click_target_accuracy: if m.contains(&Metric::ClickTarget) {
            fraction(count(&|o| o.click_correct == Some(true)), click_steps)
        } else {
            None
        },
        click_target_steps: click_steps,
        text_accuracy: if m.contains(&Metric::Text) {
            fraction(count(&|o| o.text_correct == Some(true)), text_steps)
        } else {
            None
        },
        text_steps,
        action_types: ActionType::ALL.iter().map(|t| t.as_str().to_string()).collect(),
        confusion_matrix: confusion,
        failure_taxonomy: taxonomy,
        ui_count_bins: bins,
        generator_calls: overall_on.then_some(gen_calls),
        generator_call_fraction: if overall_on { fraction(gen_calls, steps) } else { None },
        gate_violations: overall_on.then_some(violations),
        predictor_errors: count(&|o| o.predictor_error.is_some()),
        timing: Timing {
            mean_step_secs: if steps > 0 { timed / steps as f64 } else { 0.0 },
            total_secs,
        },
    }
}

/// Runs the selected passes over `split` and aggregates a report.
pub fn evaluate(
    split: &DatasetSplit,
    predictor: &dyn ActionPredictor,
    generator: Option<&dyn TextActionGenerator>,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let start = Instant::now();
    let outcomes = evaluate_steps(split, predictor, generator, opts)?;
    Ok(aggregate(&outcomes, split.len(), opts, start.elapsed().as_secs_f64()))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn confusion_csv(report: &EvalReport) -> Option<String> {
    let c = report.confusion_matrix.as_ref()?;
    let mut s = format!("truth\\predicted,{}\n", report.action_types.join(","));
    for (label, row) in report.action_types.iter().zip(c) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("{label},{}\n", cells.join(",")));
    }
    Some(s)
}

/// UI-count bins as CSV; bins of five or fewer samples are dropped when
/// `exclude_flagged` is set.
pub fn bins_csv(report: &EvalReport, exclude_flagged: bool) -> Option<String> {
    let bins = report.ui_count_bins.as_ref()?;
    let mut s = String::from("lo,hi,success,failure,accuracy,flagged\n");
    for b in bins.iter().filter(|b| !(exclude_flagged && b.flagged)) {
        let n = b.success + b.failure;
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            b.lo,
            b.hi,
            b.success,
            b.failure,
            b.success as f64 / n.max(1) as f64,
            b.flagged
        ));
    }
    Some(s)
}

/// Histogram series for plotting success/failure against UI-element count.
pub fn plot_data(report: &EvalReport) -> serde_json::Value {
    let bins = report.ui_count_bins.clone().unwrap_or_default();
    serde_json::json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "x_label": "ui elements on screen",
        "bin_lo": bins.iter().map(|b| b.lo).collect::<Vec<_>>(),
        "success": bins.iter().map(|b| b.success).collect::<Vec<_>>(),
        "failure": bins.iter().map(|b| b.failure).collect::<Vec<_>>(),
        "flagged": bins.iter().map(|b| b.flagged).collect::<Vec<_>>(),
    })
}

/// Writes `report.json` plus, when the data exists, `confusion.csv`,
/// `bins.csv` and `plot_data.json` into `dir`. Returns the written paths.
pub fn emit_report(report: &EvalReport, dir: &Path, exclude_flagged_bins: bool) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut files = vec![("report.json".to_string(), report.to_json())];
    if let Some(c) = confusion_csv(report) {
        files.push(("confusion.csv".into(), c));
    }
    if let Some(b) = bins_csv(report, exclude_flagged_bins) {
        files.push(("bins.csv".into(), b));
        files.push((
            "plot_data.json".into(),
            serde_json::to_string_pretty(&plot_data(report)).expect("plot data serializes"),
        ));
    }
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}
