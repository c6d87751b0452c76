//! Training loop for the action transformer and its encoders.
//!
//! The training stream is the concatenation of per-epoch shuffles of the
//! split; update `k` consumes stream positions `[k·W, (k+1)·W)` where
//! `W = batch_size × grad_accum`. Shuffles are seeded by `(seed, epoch)` and
//! dropout by `(seed, stream position)`, so a run resumes exactly from its
//! parameters, optimizer moments and update counter, and batching does not
//! change which dropout masks an episode sees.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{fill_params, named_tensors, read_tensor_file, write_tensor_file, CheckpointError};
use crate::encoders::EncoderBundle;
use crate::episode::{DatasetSplit, Episode};
use crate::model::{ActModel, ModelError};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::params::{Bound, ParamSet};
use crate::tape::Tape;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    ConfigError(String),
    #[error("non-finite loss in update {update} (episode {episode})")]
    NonFiniteLoss { update: u64, episode: String },
    #[error("non-finite parameter {name} after update {update}")]
    NonFiniteParameter { update: u64, name: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    /// Caps the number of optimizer updates when set.
    pub max_updates: Option<u64>,
    pub seed: u64,
    /// Weight of the click-target loss.
    pub click_weight: f64,
    /// Validate every this many updates; 0 disables validation.
    pub eval_every: u64,
    /// Intervals without improvement before stopping; 0 disables.
    pub patience: usize,
    pub schedule: LrSchedule,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.01,
            batch_size: 1,
            grad_accum: 32,
            epochs: 10,
            max_updates: None,
            seed: 0,
            click_weight: 1.0,
            eval_every: 0,
            patience: 5,
            schedule: LrSchedule::Constant,
            grad_clip: 1.0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::ConfigError(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be positive");
        }
        if !(self.click_weight >= 0.0) {
            return bad("click_weight must be non-negative");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        self.batch_size * self.grad_accum
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationScores {
    /// Step-level relaxed action accuracy.
    pub overall: f64,
    pub type_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub update: u64,
    pub epoch: usize,
    pub lr: f64,
    pub type_loss: f64,
    pub click_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub val_overall: Option<f64>,
    pub val_type_accuracy: Option<f64>,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "update,epoch,lr,type_loss,click_loss,total_loss,grad_norm,val_overall,val_type_accuracy,elapsed_secs\n",
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                e.update,
                e.epoch,
                e.lr,
                e.type_loss,
                e.click_loss,
                e.total_loss,
                e.grad_norm,
                opt_cell(e.val_overall),
                opt_cell(e.val_type_accuracy),
                e.elapsed_secs
            ));
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entry serializes") + "\n")
            .collect()
    }

    /// Writes `train_log.csv` and `train_log.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        for (name, body) in [("train_log.csv", self.to_csv()), ("train_log.jsonl", self.to_jsonl())] {
            let path = dir.join(name);
            let mut f = std::fs::File::create(&path).map_err(|source| TrainError::Io {
                path: path.clone(),
                source,
            })?;
            f.write_all(body.as_bytes())
                .map_err(|source| TrainError::Io { path, source })?;
        }
        Ok(())
    }
}

/// Loss-normalizing counts over one accumulation window.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct WindowCounts {
    n_type: usize,
    n_click: usize,
}

fn episode_counts(ep: &Episode) -> WindowCounts {
    WindowCounts {
        n_type: ep.len(),
        n_click: ep.steps.iter().filter(|s| s.action.target().is_some()).count(),
    }
}

/// Loss values and parameter gradients for a set of episodes.
pub struct BatchGrads {
    pub type_loss: f64,
    pub click_loss: f64,
    pub total: f64,
    /// `[model grads, encoder grads]`
    pub grads: Vec<Vec<Array2<f64>>>,
}

fn zero_grads(model: &ActModel, bundle: &EncoderBundle) -> Vec<Vec<Array2<f64>>> {
    [model.params(), bundle.params()]
        .iter()
        .map(|s| s.iter().map(|p| Array2::zeros(p.value.dim())).collect())
        .collect()
}

fn dropout_rng(seed: u64, position: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5851_f42d_4c95_7f2d));
    rng.set_stream(position);
    rng
}

/// Objective `Σ type / N_type + λ Σ click / N_click` over `episodes` and its
/// gradients. `positions` seeds per-episode dropout; `None` disables it.
fn window_objective(
    model: &ActModel,
    bundle: &EncoderBundle,
    episodes: &[&Episode],
    positions: Option<(&[u64], u64)>,
    counts: WindowCounts,
    click_weight: f64,
    update: u64,
    grads: &mut Vec<Vec<Array2<f64>>>,
) -> Result<(f64, f64), TrainError> {
    let mut type_total = 0.0;
    let mut click_total = 0.0;
    for (k, ep) in episodes.iter().enumerate() {
        let mut tape = Tape::new();
        let mut mb = Bound::new(model.params());
        let mut eb = Bound::new(bundle.params());
        let mut rng = positions.map(|(pos, seed)| dropout_rng(seed, pos[k]));
        let terms = model.episode_terms(bundle, ep, &mut tape, &mut mb, &mut eb, rng.as_mut())?;
        let t_sum = tape.scalar(terms.type_sum);
        let mut loss = tape.scale(terms.type_sum, 1.0 / counts.n_type.max(1) as f64);
        type_total += t_sum;
        if let Some(c) = terms.click_sum {
            click_total += tape.scalar(c);
            let c = tape.scale(c, click_weight / counts.n_click.max(1) as f64);
            loss = tape.add(loss, c);
        }
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                update,
                episode: ep.id().to_string(),
            });
        }
        let mut g = tape.backward(loss);
        for (acc, new) in grads.iter_mut().zip([mb.collect(&mut g), eb.collect(&mut g)]) {
            for (a, n) in acc.iter_mut().zip(new) {
                *a += &n;
            }
        }
    }
    Ok((type_total, click_total))
}

/// Loss and gradients over a batch of episodes with dropout off, using the
/// batch's own prediction counts for normalization.
pub fn batch_gradients(
    model: &ActModel,
    bundle: &EncoderBundle,
    episodes: &[&Episode],
    click_weight: f64,
) -> Result<BatchGrads, TrainError> {
    let counts = episodes.iter().fold(WindowCounts::default(), |acc, e| {
        let c = episode_counts(e);
        WindowCounts {
            n_type: acc.n_type + c.n_type,
            n_click: acc.n_click + c.n_click,
        }
    });
    let mut grads = zero_grads(model, bundle);
    let (t, c) = window_objective(model, bundle, episodes, None, counts, click_weight, 0, &mut grads)?;
    let type_loss = t / counts.n_type.max(1) as f64;
    let click_loss = if counts.n_click > 0 { c / counts.n_click as f64 } else { 0.0 };
    Ok(BatchGrads {
        type_loss,
        click_loss,
        total: type_loss + click_weight * click_loss,
        grads,
    })
}

/// Mutable training state: optimizer moments, counters and early-stopping
/// bookkeeping.
pub struct Trainer {
    pub cfg: TrainConfig,
    opt: AdamW,
    pub update: u64,
    pub log: TrainLog,
    best: Option<(f64, ParamSet, ParamSet)>,
    /// Parameters at the last update, kept when `best` replaced them.
    last: Option<(ParamSet, ParamSet)>,
    bad_intervals: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerMeta {
    cfg: TrainConfig,
    update: u64,
    adam_t: u64,
    log: TrainLog,
    best_score: Option<f64>,
    bad_intervals: usize,
    stopped_early: bool,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: &ActModel, bundle: &EncoderBundle) -> Result<Self, TrainError> {
        cfg.validate()?;
        let opt = AdamW::new(
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
            &[model.params(), bundle.params()],
        );
        Ok(Self {
            cfg,
            opt,
            update: 0,
            log: TrainLog::default(),
            best: None,
            last: None,
            bad_intervals: 0,
            stopped_early: false,
        })
    }

    /// Changes the training budget of a resumed trainer.
    pub fn set_budget(&mut self, epochs: usize, max_updates: Option<u64>) -> Result<(), TrainError> {
        let mut cfg = self.cfg.clone();
        cfg.epochs = epochs;
        cfg.max_updates = max_updates;
        cfg.validate()?;
        self.cfg = cfg;
        self.stopped_early = false;
        Ok(())
    }

    pub fn total_updates(&self, n_train: usize) -> u64 {
        let by_epochs = ((self.cfg.epochs * n_train) as u64).div_ceil(self.cfg.window() as u64);
        self.cfg.max_updates.map_or(by_epochs, |m| m.min(by_epochs))
    }

    fn lr_at(&self, update: u64, total: u64) -> f64 {
        match self.cfg.schedule {
            LrSchedule::Constant => self.cfg.lr,
            LrSchedule::Cosine => {
                let frac = update as f64 / total.max(1) as f64;
                0.5 * self.cfg.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    /// Episode index at stream position `pos`.
    fn stream_index(&self, pos: u64, n: usize, cache: &mut Option<(usize, Vec<usize>)>) -> (usize, usize) {
        let epoch = (pos / n as u64) as usize;
        if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(epoch as u64 + 1);
            order.shuffle(&mut rng);
            *cache = Some((epoch, order));
        }
        (epoch, cache.as_ref().expect("cached").1[(pos % n as u64) as usize])
    }

    /// Runs updates until the configured budget or early stopping. Resumed
    /// trainers continue from their update counter.
    pub fn run(
        &mut self,
        model: &mut ActModel,
        bundle: &mut EncoderBundle,
        data: &DatasetSplit,
        mut validator: Option<&mut dyn FnMut(&ActModel, &EncoderBundle) -> ValidationScores>,
    ) -> Result<(), TrainError> {
        if data.is_empty() {
            return Err(TrainError::ConfigError("training split is empty".into()));
        }
        let n = data.len();
        let total = self.total_updates(n);
        let window = self.cfg.window() as u64;
        let start = Instant::now();
        let mut cache = None;
        let mut acc = (0.0, 0.0, 0.0, 0.0, 0u64);
        while self.update < total && !self.stopped_early {
            let base = self.update * window;
            let picks: Vec<(usize, usize, u64)> = (0..window)
                .map(|k| {
                    let (epoch, idx) = self.stream_index(base + k, n, &mut cache);
                    (epoch, idx, base + k)
                })
                .collect();
            let epoch = picks[0].0;
            let episodes: Vec<&Episode> = picks.iter().map(|p| &data.episodes[p.1]).collect();
            let positions: Vec<u64> = picks.iter().map(|p| p.2).collect();
            let counts = episodes.iter().fold(WindowCounts::default(), |a, e| {
                let c = episode_counts(e);
                WindowCounts {
                    n_type: a.n_type + c.n_type,
                    n_click: a.n_click + c.n_click,
                }
            });
            let mut grads = zero_grads(model, bundle);
            let mut type_sum = 0.0;
            let mut click_sum = 0.0;
            for (chunk, pos) in episodes
                .chunks(self.cfg.batch_size)
                .zip(positions.chunks(self.cfg.batch_size))
            {
                let (t, c) = window_objective(
                    model,
                    bundle,
                    chunk,
                    Some((pos, self.cfg.seed)),
                    counts,
                    self.cfg.click_weight,
                    self.update,
                    &mut grads,
                )?;
                type_sum += t;
                click_sum += c;
            }
            let grad_norm = clip_global_norm(&mut grads, self.cfg.grad_clip);
            let lr = self.lr_at(self.update, total);
            self.opt.step(&mut [model.params_mut(), bundle.params_mut()], &grads, lr);
            self.update += 1;

            let type_loss = type_sum / counts.n_type.max(1) as f64;
            let click_loss = if counts.n_click > 0 {
                click_sum / counts.n_click as f64
            } else {
                0.0
            };
            acc.0 += type_loss;
            acc.1 += click_loss;
            acc.2 += type_loss + self.cfg.click_weight * click_loss;
            acc.3 += grad_norm;
            acc.4 += 1;

            let validate = self.cfg.eval_every > 0 && self.update % self.cfg.eval_every == 0 && validator.is_some();
            if self.update % self.cfg.log_every == 0 || self.update == total || validate {
                for (set, name) in [(model.params(), "model"), (bundle.params(), "encoder")] {
                    if let Some(p) = set.iter().find(|p| p.value.iter().any(|v| !v.is_finite())) {
                        return Err(TrainError::NonFiniteParameter {
                            update: self.update,
                            name: format!("{name}.{}", p.name),
                        });
                    }
                }
                let scores = if validate {
                    let v = validator.as_mut().expect("checked above");
                    Some(v(model, bundle))
                } else {
                    None
                };
                let k = acc.4 as f64;
                let entry = LogEntry {
                    update: self.update,
                    epoch,
                    lr,
                    type_loss: acc.0 / k,
                    click_loss: acc.1 / k,
                    total_loss: acc.2 / k,
                    grad_norm: acc.3 / k,
                    val_overall: scores.map(|s| s.overall),
                    val_type_accuracy: scores.map(|s| s.type_accuracy),
                    elapsed_secs: start.elapsed().as_secs_f64(),
                };
                log::info!(
                    "update {} epoch {} loss {:.4} (type {:.4}, click {:.4}){}",
                    entry.update,
                    entry.epoch,
                    entry.total_loss,
                    entry.type_loss,
                    entry.click_loss,
                    scores.map_or(String::new(), |s| format!(
                        " val overall {:.4} type {:.4}",
                        s.overall, s.type_accuracy
                    ))
                );
                self.log.entries.push(entry);
                acc = (0.0, 0.0, 0.0, 0.0, 0);
                if let Some(s) = scores {
                    self.observe_validation(s.overall, model, bundle);
                }
            }
        }
        if let Some((_, m, b)) = &self.best {
            self.last = Some((model.params().clone(), bundle.params().clone()));
            model.params_mut().copy_values_from(m);
            bundle.params_mut().copy_values_from(b);
        }
        Ok(())
    }

    fn observe_validation(&mut self, score: f64, model: &ActModel, bundle: &EncoderBundle) {
        let improved = self.best.as_ref().is_none_or(|(b, _, _)| score > *b);
        if improved {
            self.best = Some((score, model.params().clone(), bundle.params().clone()));
            self.bad_intervals = 0;
        } else {
            self.bad_intervals += 1;
            if self.cfg.patience > 0 && self.bad_intervals >= self.cfg.patience {
                log::info!("early stopping after {} intervals without improvement", self.bad_intervals);
                self.stopped_early = true;
            }
        }
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.0)
    }

    /// Saves optimizer moments and counters. Parameters go in the model
    /// checkpoint.
    pub fn save_state(&self, path: &Path) -> Result<(), TrainError> {
        let meta = TrainerMeta {
            cfg: self.cfg.clone(),
            update: self.update,
            adam_t: self.opt.t,
            log: self.log.clone(),
            best_score: self.best_score(),
            bad_intervals: self.bad_intervals,
            stopped_early: self.stopped_early,
        };
        let mut tensors = Vec::new();
        for (k, set) in ["model", "encoder"].iter().enumerate() {
            for (i, m) in self.opt.m[k].iter().enumerate() {
                tensors.push((format!("adam.m.{set}.{i}"), m));
            }
            for (i, v) in self.opt.v[k].iter().enumerate() {
                tensors.push((format!("adam.v.{set}.{i}"), v));
            }
        }
        if let Some((_, m, b)) = &self.best {
            tensors.extend(named_tensors("best.model.", m));
            tensors.extend(named_tensors("best.encoder.", b));
        }
        if let Some((m, b)) = &self.last {
            tensors.extend(named_tensors("last.model.", m));
            tensors.extend(named_tensors("last.encoder.", b));
        }
        write_tensor_file(path, serde_json::to_value(meta).expect("meta serializes"), &tensors)?;
        Ok(())
    }

    /// Restores a trainer saved by [`Trainer::save_state`] for `model` and
    /// `bundle`, whose parameters must already be loaded from the matching
    /// checkpoint. If that checkpoint holds early-stopping best parameters,
    /// the parameters of the last update are put back so training continues
    /// where it stopped.
    pub fn load_state(path: &Path, model: &mut ActModel, bundle: &mut EncoderBundle) -> Result<Self, TrainError> {
        let (header, tensors) = read_tensor_file(path)?;
        let meta: TrainerMeta = serde_json::from_value(header.meta)
            .map_err(|e| CheckpointError::VersionMismatch(format!("trainer state: {e}")))?;
        let mut t = Trainer::new(meta.cfg, model, bundle)?;
        t.update = meta.update;
        t.opt.t = meta.adam_t;
        t.log = meta.log;
        t.bad_intervals = meta.bad_intervals;
        t.stopped_early = meta.stopped_early;
        let lookup = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a);
        for (k, set) in ["model", "encoder"].iter().enumerate() {
            for i in 0..t.opt.m[k].len() {
                let (m, v) = (
                    lookup(&format!("adam.m.{set}.{i}")),
                    lookup(&format!("adam.v.{set}.{i}")),
                );
                match (m, v) {
                    (Some(m), Some(v)) if m.dim() == t.opt.m[k][i].dim() && v.dim() == t.opt.v[k][i].dim() => {
                        t.opt.m[k][i].assign(m);
                        t.opt.v[k][i].assign(v);
                    }
                    _ => {
                        return Err(CheckpointError::ConfigMismatch(format!(
                            "optimizer state for {set} parameter {i} is missing or misshapen"
                        ))
                        .into())
                    }
                }
            }
        }
        if let Some(score) = meta.best_score {
            let mut m = model.params().clone();
            let mut b = bundle.params().clone();
            fill_params("best.model.", &mut m, &tensors)?;
            fill_params("best.encoder.", &mut b, &tensors)?;
            t.best = Some((score, m, b));
        }
        if tensors.iter().any(|(n, _)| n.starts_with("last.")) {
            fill_params("last.model.", model.params_mut(), &tensors)?;
            fill_params("last.encoder.", bundle.params_mut(), &tensors)?;
        }
        Ok(t)
    }
}

/// Trains `model` and `bundle` on `data` from scratch.
pub fn train(
    model: &mut ActModel,
    bundle: &mut EncoderBundle,
    data: &DatasetSplit,
    cfg: &TrainConfig,
    validator: Option<&mut dyn FnMut(&ActModel, &EncoderBundle) -> ValidationScores>,
) -> Result<TrainLog, TrainError> {
    let mut t = Trainer::new(cfg.clone(), model, bundle)?;
    t.run(model, bundle, data, validator)?;
    Ok(t.log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn group(&self, name: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.name == name)
    }
}

pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
/// Gradient magnitudes below this are compared absolutely.
const GRADCHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of the dropout-free objective against central
/// differences. Tensors with at most 64 entries are checked fully; larger
/// ones at their 16 largest-gradient entries plus 16 random ones.
/// `mutate(name, grad)` may alter analytic gradients before comparison;
/// names are `model.<param>` or `encoder.<param>`.
pub fn gradient_selfcheck(
    model: &ActModel,
    bundle: &EncoderBundle,
    episodes: &[&Episode],
    click_weight: f64,
    seed: u64,
    mut mutate: impl FnMut(&str, &mut Array2<f64>),
) -> Result<GradCheckReport, TrainError> {
    let analytic = batch_gradients(model, bundle, episodes, click_weight)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    let mut m = model.clone();
    let mut b = bundle.clone();
    for k in 0..2 {
        let names: Vec<(String, bool)> = if k == 0 {
            model.params().iter().map(|p| (p.name.clone(), p.trainable)).collect()
        } else {
            bundle.params().iter().map(|p| (p.name.clone(), p.trainable)).collect()
        };
        for (i, (pname, trainable)) in names.into_iter().enumerate() {
            if !trainable {
                continue;
            }
            let full = format!("{}.{pname}", if k == 0 { "model" } else { "encoder" });
            let mut g = analytic.grads[k][i].as_standard_layout().to_owned();
            mutate(&full, &mut g);
            let flat: Vec<f64> = g.iter().copied().collect();
            let coords: Vec<usize> = if flat.len() <= 64 {
                (0..flat.len()).collect()
            } else {
                let mut by_mag: Vec<usize> = (0..flat.len()).collect();
                by_mag.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()));
                let mut c: Vec<usize> = by_mag[..16].to_vec();
                while c.len() < 32 {
                    let r = rng.random_range(0..flat.len());
                    if !c.contains(&r) {
                        c.push(r);
                    }
                }
                c
            };
            let mut max_err: f64 = 0.0;
            for &idx in &coords {
                let cols = g.ncols();
                let (r, c) = (idx / cols, idx % cols);
                let eval = |delta: f64, m: &mut ActModel, b: &mut EncoderBundle| -> Result<f64, TrainError> {
                    let set = if k == 0 { m.params_mut() } else { b.params_mut() };
                    let id = set.find(&pname).expect("parameter exists");
                    let orig = set.get(id)[[r, c]];
                    set.get_mut(id)[[r, c]] = orig + delta;
                    let out = batch_gradients_value(m, b, episodes, click_weight);
                    let set = if k == 0 { m.params_mut() } else { b.params_mut() };
                    set.get_mut(id)[[r, c]] = orig;
                    out
                };
                let plus = eval(GRADCHECK_STEP, &mut m, &mut b)?;
                let minus = eval(-GRADCHECK_STEP, &mut m, &mut b)?;
                let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
                let a = flat[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
                max_err = max_err.max(err);
            }
            groups.push(GroupCheck {
                name: full,
                checked: coords.len(),
                max_rel_error: max_err,
                passed: max_err < GRADCHECK_TOLERANCE,
            });
        }
    }
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradCheckReport { groups, passed })
}

/// Objective value only, dropout off.
fn batch_gradients_value(
    model: &ActModel,
    bundle: &EncoderBundle,
    episodes: &[&Episode],
    click_weight: f64,
) -> Result<f64, TrainError> {
    let mut n_type = 0;
    let mut n_click = 0;
    for e in episodes {
        let c = episode_counts(e);
        n_type += c.n_type;
        n_click += c.n_click;
    }
    let mut total = 0.0;
    for ep in episodes {
        let mut tape = Tape::new();
        let mut mb = Bound::new(model.params());
        let mut eb = Bound::new(bundle.params());
        let terms = model.episode_terms::<ChaCha8Rng>(bundle, ep, &mut tape, &mut mb, &mut eb, None)?;
        total += tape.scalar(terms.type_sum) / n_type.max(1) as f64;
        if let Some(c) = terms.click_sum {
            total += click_weight * tape.scalar(c) / n_click.max(1) as f64;
        }
    }
    Ok(total)
}
