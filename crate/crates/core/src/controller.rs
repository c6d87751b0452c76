//! The gate: the action transformer decides every step, and only text-bearing
//! action types are completed by a text-action generator that continues a
//! forced JSON prefix.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::{forced_prefix, parse_action, ActionRecord, ActionType};
use crate::encoders::EncoderBundle;
use crate::episode::{DatasetSplit, Episode, Observation};
use crate::model::{ActModel, ModelError, PredictOptions};
use crate::sequence::History;
use crate::synthetic::{GoalSpec, APPS, QUERIES};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeneratorError {
    #[error("generator timed out after {attempts} attempt(s) of {timeout_ms} ms")]
    Timeout { attempts: u32, timeout_ms: u64 },
    #[error("generator protocol error: {0}")]
    ProtocolError(String),
    #[error("generator returned HTTP status {0}")]
    RemoteError(u16),
    #[error("generator unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("a text-bearing action was predicted but no generator is configured")]
    GeneratorUnavailable,
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("predictor failed: {0}")]
    Predictor(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorCapabilities {
    pub name: String,
    /// Accepts screenshots rather than only a textual screen rendering.
    pub screenshots: bool,
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub goal: String,
    pub observation: String,
    pub forced_prefix: String,
}

/// Completes a forced action prefix. The returned completion is appended to
/// the prefix verbatim and the result parsed as an action.
pub trait TextActionGenerator: Send + Sync {
    fn capabilities(&self) -> GeneratorCapabilities;
    fn generate(&self, request: &GenerationRequest) -> Result<String, GeneratorError>;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_str(seed: u64, parts: &[&str]) -> u64 {
    let mut h = splitmix(seed);
    for p in parts {
        for b in p.bytes() {
            h = splitmix(h ^ b as u64);
        }
        h = splitmix(h ^ 0xff);
    }
    h
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

#[derive(Debug, Clone, PartialEq)]
enum MockMode {
    Grammar,
    Lookup(HashMap<(String, String), String>),
}

/// Deterministic stand-in for a fine-tuned vision-language model.
///
/// Grammar mode reads the app name or query out of a synthetic goal string.
/// Lookup mode answers from a `(goal, forced prefix) → completion` table.
/// With probability `error_rate` (decided by hashing the request) the answer
/// is replaced by a token that shares nothing with the right one.
#[derive(Debug, Clone, PartialEq)]
pub struct MockGenerator {
    mode: MockMode,
    pub error_rate: f64,
    pub seed: u64,
}

impl MockGenerator {
    pub fn grammar(error_rate: f64, seed: u64) -> Self {
        Self {
            mode: MockMode::Grammar,
            error_rate,
            seed,
        }
    }

    pub fn lookup(table: HashMap<(String, String), String>, error_rate: f64, seed: u64) -> Self {
        Self {
            mode: MockMode::Lookup(table),
            error_rate,
            seed,
        }
    }

    /// Lookup table holding the ground-truth completion of every text-bearing
    /// step in `split`.
    pub fn from_split(split: &DatasetSplit, error_rate: f64, seed: u64) -> Self {
        let mut table = HashMap::new();
        for ep in &split.episodes {
            for step in &ep.steps {
                let ty = step.action.action_type();
                if let (Some(prefix), Some(text)) = (forced_prefix(ty), step.action.text_value()) {
                    table.insert((ep.goal.clone(), prefix), format!("{}}}", json_string(text)));
                }
            }
        }
        Self::lookup(table, error_rate, seed)
    }

    fn correct_value(&self, req: &GenerationRequest) -> Option<String> {
        match &self.mode {
            MockMode::Grammar => {
                let spec = GoalSpec::parse(&req.goal)?;
                if req.forced_prefix == forced_prefix(ActionType::OpenApp)? {
                    Some(spec.app)
                } else if req.forced_prefix == forced_prefix(ActionType::InputText)? {
                    Some(spec.query)
                } else {
                    None
                }
            }
            MockMode::Lookup(t) => {
                let completion = t.get(&(req.goal.clone(), req.forced_prefix.clone()))?;
                return serde_json::from_str::<String>(completion.strip_suffix('}')?).ok();
            }
        }
    }

    /// A value sharing no token with `right`.
    fn wrong_value(&self, right: &str, h: u64) -> String {
        let pool: Vec<&str> = APPS.iter().chain(QUERIES.iter()).copied().collect();
        let right_tokens = crate::action_space::tokenize(right);
        let start = (h % pool.len() as u64) as usize;
        (0..pool.len())
            .map(|k| pool[(start + k) % pool.len()])
            .find(|cand| {
                crate::action_space::tokenize(cand)
                    .iter()
                    .all(|t| !right_tokens.contains(t))
            })
            .unwrap_or("zzz")
            .to_string()
    }
}

impl TextActionGenerator for MockGenerator {
    fn capabilities(&self) -> GeneratorCapabilities {
        GeneratorCapabilities {
            name: match self.mode {
                MockMode::Grammar => "mock-grammar".into(),
                MockMode::Lookup(_) => "mock-lookup".into(),
            },
            screenshots: false,
            deterministic: true,
        }
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String, GeneratorError> {
        let right = self.correct_value(req).unwrap_or_default();
        let h = hash_str(self.seed, &[&req.goal, &req.observation, &req.forced_prefix]);
        let value = if unit(h) < self.error_rate {
            self.wrong_value(&right, splitmix(h))
        } else {
            right
        };
        Ok(format!("{}}}", json_string(&value)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    /// Attempts after the first one on connection failures and timeouts.
    pub retries: u32,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/generate".into(),
            timeout_ms: 10_000,
            retries: 2,
        }
    }
}

#[derive(Debug, Deserialize)]
struct RemoteResponse {
    completion: String,
}

/// HTTP client for a remote generator: POSTs the request as JSON and expects
/// `{"completion": str}` back.
pub struct RemoteGenerator {
    cfg: RemoteConfig,
    client: reqwest::blocking::Client,
}

impl RemoteGenerator {
    pub fn new(cfg: RemoteConfig) -> Result<Self, GeneratorError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .connect_timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| GeneratorError::Unavailable(e.to_string()))?;
        Ok(Self { cfg, client })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }
}

impl TextActionGenerator for RemoteGenerator {
    fn capabilities(&self) -> GeneratorCapabilities {
        GeneratorCapabilities {
            name: format!("remote:{}", self.cfg.endpoint),
            screenshots: false,
            deterministic: false,
        }
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String, GeneratorError> {
        let attempts = self.cfg.retries + 1;
        for attempt in 1..=attempts {
            let resp = match self.client.post(&self.cfg.endpoint).json(req).send() {
                Ok(r) => r,
                Err(e) if e.is_timeout() || e.is_connect() || e.is_request() => {
                    log::warn!("generator attempt {attempt}/{attempts} failed: {e}");
                    continue;
                }
                Err(e) => return Err(GeneratorError::ProtocolError(e.to_string())),
            };
            let status = resp.status();
            if !status.is_success() {
                return Err(GeneratorError::RemoteError(status.as_u16()));
            }
            let body = match resp.bytes() {
                Ok(b) => b,
                Err(e) if e.is_timeout() => {
                    log::warn!("generator attempt {attempt}/{attempts} timed out reading body");
                    continue;
                }
                Err(e) => return Err(GeneratorError::ProtocolError(e.to_string())),
            };
            let parsed: RemoteResponse =
                serde_json::from_slice(&body).map_err(|e| GeneratorError::ProtocolError(e.to_string()))?;
            return Ok(parsed.completion);
        }
        Err(GeneratorError::Timeout {
            attempts,
            timeout_ms: self.cfg.timeout_ms,
        })
    }
}

/// Type prediction and click choice for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPrediction {
    pub predicted_type: ActionType,
    /// Set iff the predicted type targets an element.
    pub element: Option<usize>,
    pub type_distribution: Option<Vec<f64>>,
}

/// Anything that predicts action types and click targets for step `t` of a
/// history. The action transformer is the main implementation; baselines
/// and oracles implement it for testing the harness.
pub trait ActionPredictor: Sync {
    fn predict(&self, hist: &History<'_>, t: usize) -> Result<StepPrediction, ControllerError>;
    /// Element choice when the action type is forced to `ty`.
    fn predict_element(&self, hist: &History<'_>, t: usize, ty: ActionType) -> Result<usize, ControllerError>;
}

/// The action transformer behind the [`ActionPredictor`] interface.
pub struct ActPredictor<'m> {
    pub model: &'m ActModel,
    pub bundle: &'m EncoderBundle,
    pub opts: PredictOptions,
}

impl ActionPredictor for ActPredictor<'_> {
    fn predict(&self, hist: &History<'_>, t: usize) -> Result<StepPrediction, ControllerError> {
        let p = self.model.predict_history(self.bundle, hist, t, None, self.opts)?;
        Ok(StepPrediction {
            predicted_type: p.predicted_type,
            element: p.predicted_element,
            type_distribution: Some(p.type_distribution),
        })
    }

    fn predict_element(&self, hist: &History<'_>, t: usize, ty: ActionType) -> Result<usize, ControllerError> {
        let (_, el) = self.model.click_choice(self.bundle, hist, t, ty, self.opts)?;
        Ok(el)
    }
}

/// Always answers `wait`; click queries pick element 0.
pub struct AlwaysWait;

impl ActionPredictor for AlwaysWait {
    fn predict(&self, _: &History<'_>, _: usize) -> Result<StepPrediction, ControllerError> {
        Ok(StepPrediction {
            predicted_type: ActionType::Wait,
            element: None,
            type_distribution: None,
        })
    }

    fn predict_element(&self, _: &History<'_>, _: usize, _: ActionType) -> Result<usize, ControllerError> {
        Ok(0)
    }
}

/// Uniformly random types and elements, derived from a hash of the screen so
/// results do not depend on evaluation order.
pub struct RandomPredictor {
    pub seed: u64,
}

impl ActionPredictor for RandomPredictor {
    fn predict(&self, hist: &History<'_>, t: usize) -> Result<StepPrediction, ControllerError> {
        let obs = hist.observations[t];
        let h = hash_str(self.seed, &[&obs.screen_id, "type"]);
        let ty = ActionType::ALL[(h % ActionType::COUNT as u64) as usize];
        let element = if ty.has_target() {
            Some(self.predict_element(hist, t, ty)?)
        } else {
            None
        };
        Ok(StepPrediction {
            predicted_type: ty,
            element,
            type_distribution: None,
        })
    }

    fn predict_element(&self, hist: &History<'_>, t: usize, _: ActionType) -> Result<usize, ControllerError> {
        let obs = hist.observations[t];
        if obs.is_empty() {
            return Err(ModelError::NoCandidates.into());
        }
        let h = hash_str(self.seed, &[&obs.screen_id, "element"]);
        Ok((h % obs.len() as u64) as usize)
    }
}

/// Answers with the ground truth of a split, looked up by screen id.
pub struct OraclePredictor {
    truth: HashMap<String, ActionRecord>,
}

impl OraclePredictor {
    pub fn from_split(split: &DatasetSplit) -> Self {
        let truth = split
            .episodes
            .iter()
            .flat_map(|e| e.steps.iter())
            .map(|s| (s.observation.screen_id.clone(), s.action.clone()))
            .collect();
        Self { truth }
    }

    fn lookup(&self, obs: &Observation) -> Result<&ActionRecord, ControllerError> {
        self.truth
            .get(&obs.screen_id)
            .ok_or_else(|| ControllerError::Predictor(format!("unknown screen {}", obs.screen_id)))
    }
}

impl ActionPredictor for OraclePredictor {
    fn predict(&self, hist: &History<'_>, t: usize) -> Result<StepPrediction, ControllerError> {
        let a = self.lookup(hist.observations[t])?;
        Ok(StepPrediction {
            predicted_type: a.action_type(),
            element: a.target(),
            type_distribution: None,
        })
    }

    fn predict_element(&self, hist: &History<'_>, t: usize, _: ActionType) -> Result<usize, ControllerError> {
        Ok(self.lookup(hist.observations[t])?.target().unwrap_or(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Direct,
    Generator,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Latency {
    pub predict_secs: f64,
    pub generator_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepFailure {
    /// Prefix plus completion did not parse as an action.
    Unparseable { raw: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub step: usize,
    pub predicted_type: ActionType,
    pub route: Route,
    pub final_action: Result<ActionRecord, StepFailure>,
    pub latency: Latency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Each step conditions on the ground-truth history.
    TeacherForced,
    /// Each step conditions on the controller's own earlier actions.
    ClosedLoop,
}

/// Routes each step either directly (from the predictor) or through the
/// text generator.
pub struct Controller<'a> {
    pub predictor: &'a dyn ActionPredictor,
    pub generator: Option<&'a dyn TextActionGenerator>,
}

impl<'a> Controller<'a> {
    pub fn new(predictor: &'a dyn ActionPredictor, generator: Option<&'a dyn TextActionGenerator>) -> Self {
        Self { predictor, generator }
    }

    /// Completes a text-bearing action of type `ty` through the generator.
    pub fn complete_text(
        &self,
        hist: &History<'_>,
        t: usize,
        ty: ActionType,
    ) -> Result<Result<ActionRecord, StepFailure>, ControllerError> {
        let prefix = forced_prefix(ty).expect("text-bearing type has a forced prefix");
        let generator = self.generator.ok_or(ControllerError::GeneratorUnavailable)?;
        let request = GenerationRequest {
            goal: hist.goal.to_string(),
            observation: hist.observations[t].render(),
            forced_prefix: prefix.clone(),
        };
        let completion = generator.generate(&request)?;
        let raw = format!("{prefix}{completion}");
        Ok(match parse_action(&raw) {
            Ok(a) if a.action_type() == ty => Ok(a),
            Ok(a) => Err(StepFailure::Unparseable {
                reason: format!("completed action has type {}", a.action_type()),
                raw,
            }),
            Err(e) => Err(StepFailure::Unparseable {
                reason: e.to_string(),
                raw,
            }),
        })
    }

    pub fn step(&self, hist: &History<'_>, t: usize) -> Result<GateDecision, ControllerError> {
        let start = Instant::now();
        let p = self.predictor.predict(hist, t)?;
        let predict_secs = start.elapsed().as_secs_f64();
        let ty = p.predicted_type;
        if ty.is_text_bearing() {
            let g_start = Instant::now();
            let final_action = self.complete_text(hist, t, ty)?;
            return Ok(GateDecision {
                step: t,
                predicted_type: ty,
                route: Route::Generator,
                final_action,
                latency: Latency {
                    predict_secs,
                    generator_secs: g_start.elapsed().as_secs_f64(),
                },
            });
        }
        let action = match p.element {
            Some(i) if ty.has_target() => ActionRecord::targeting(ty, i),
            None if !ty.has_target() => ActionRecord::bare(ty),
            _ => {
                return Err(ControllerError::Predictor(format!(
                    "prediction of {ty} has inconsistent element {:?}",
                    p.element
                )))
            }
        }
        .map_err(|e| ControllerError::Predictor(e.to_string()))?;
        Ok(GateDecision {
            step: t,
            predicted_type: ty,
            route: Route::Direct,
            final_action: Ok(action),
            latency: Latency {
                predict_secs,
                generator_secs: 0.0,
            },
        })
    }

    pub fn run_episode(&self, episode: &Episode, mode: RunMode) -> Result<Vec<GateDecision>, ControllerError> {
        let obs: Vec<&Observation> = episode.steps.iter().map(|s| &s.observation).collect();
        let mut executed: Vec<ActionRecord> = Vec::with_capacity(episode.len());
        let mut decisions = Vec::with_capacity(episode.len());
        for t in 0..episode.len() {
            let truth: Vec<ActionRecord>;
            let actions: &[ActionRecord] = match mode {
                RunMode::TeacherForced => {
                    truth = episode.steps[..t].iter().map(|s| s.action.clone()).collect();
                    &truth
                }
                RunMode::ClosedLoop => &executed,
            };
            let hist = History {
                goal: &episode.goal,
                observations: &obs,
                actions,
            };
            let d = self.step(&hist, t)?;
            if mode == RunMode::ClosedLoop {
                executed.push(executed_action(&d));
            }
            decisions.push(d);
        }
        Ok(decisions)
    }
}

/// The action a decision contributes to a closed-loop history. Failed text
/// completions contribute their type with an empty specification.
pub fn executed_action(d: &GateDecision) -> ActionRecord {
    match &d.final_action {
        Ok(a) => a.clone(),
        Err(_) => match d.predicted_type {
            ActionType::OpenApp => ActionRecord::open_app(""),
            _ => ActionRecord::input_text(""),
        },
    }
}
