//! The action transformer: a causal pre-norm transformer over episode token
//! sequences with an action-type head and a contrastive click-target head.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::{ActionSpec, ActionType};
use crate::encoders::EncoderBundle;
use crate::episode::Episode;
use crate::params::{normal, Bound, ParamId, ParamSet};
use crate::sequence::{embed_on_tape, History, SequenceError, SequenceLayout, Span, TokenSequence};
use crate::tape::{Tape, Var};

/// Norms below this count as degenerate in strict scoring.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("degenerate embedding: {0} has norm below 1e-12")]
    DegenerateEmbedding(String),
    #[error("step {step} targets element {index} but the screen has {len}")]
    InvalidTarget { step: usize, index: usize, len: usize },
    #[error("no candidate elements on the current screen")]
    NoCandidates,
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub type_hidden: usize,
    pub target_dim: usize,
    /// Hidden width of the click-target projection; `None` makes it affine.
    pub target_hidden: Option<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            dropout: 0.3,
            type_hidden: 512,
            target_dim: 64,
            target_hidden: None,
            init_seed: 0,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            n_layers: 24,
            n_heads: 16,
            d_model: 1024,
            d_ff: 4096,
            dropout: 0.3,
            type_hidden: 4096,
            target_dim: 1024,
            target_hidden: Some(4096),
            init_seed: 0,
        }
    }

    /// Small enough for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            dropout: 0.0,
            type_hidden: 16,
            target_dim: 8,
            target_hidden: None,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return bad("layers, heads and d_model must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.d_ff == 0 || self.type_hidden == 0 || self.target_dim == 0 || self.target_hidden == Some(0) {
            return bad("hidden widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bq: ParamId,
    bk: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeadIds {
    lnf_g: ParamId,
    lnf_b: ParamId,
    type_w1: ParamId,
    type_b1: ParamId,
    type_w2: ParamId,
    type_b2: ParamId,
    target_w1: ParamId,
    target_b1: ParamId,
    target_w2: Option<(ParamId, ParamId)>,
    log_tau: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActModel {
    cfg: ModelConfig,
    pub(crate) params: ParamSet,
    layers: Vec<LayerIds>,
    head: HeadIds,
}

/// Inference-time candidate policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictOptions {
    /// Only score clickable elements (falls back to all when none are).
    pub restrict_clickable: bool,
    /// Fail on near-zero query/key norms instead of guarding them.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActPrediction {
    pub type_distribution: Vec<f64>,
    pub predicted_type: ActionType,
    /// Scaled cosine similarities over the current screen's elements.
    pub click_scores: Option<Vec<f64>>,
    pub predicted_element: Option<usize>,
}

/// Per-episode loss sums on a tape, before normalization by the counts.
pub struct EpisodeTerms {
    pub type_sum: Var,
    pub n_type: usize,
    pub click_sum: Option<Var>,
    pub n_click: usize,
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - max).exp());
    let z = e.sum();
    e / z
}

/// First index of the maximum; NaN never wins.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_nan() && best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Mean cross-entropy of rows of `logits` against `truth`.
pub fn type_loss(logits: ArrayView2<f64>, truth: &[ActionType]) -> f64 {
    assert_eq!(logits.nrows(), truth.len());
    assert!(!truth.is_empty(), "type_loss needs a nonempty batch");
    let total: f64 = logits
        .outer_iter()
        .zip(truth)
        .map(|(row, t)| -softmax(row)[t.index()].ln())
        .sum();
    total / truth.len() as f64
}

/// Mean InfoNCE over `(scores, positive)` pairs.
pub fn click_loss(steps: &[(Array1<f64>, usize)]) -> f64 {
    assert!(!steps.is_empty(), "click_loss needs at least one step");
    let total: f64 = steps
        .iter()
        .map(|(s, pos)| {
            let max = s.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + s.mapv(|v| (v - max).exp()).sum().ln();
            lse - s[*pos]
        })
        .sum();
    total / steps.len() as f64
}

fn dropout<'a, R: Rng>(tape: &mut Tape<'a>, x: Var, p: f64, rng: &mut Option<&mut R>) -> Var {
    match rng {
        Some(rng) if p > 0.0 => {
            let (r, c) = tape.value(x).dim();
            let keep = 1.0 / (1.0 - p);
            let mask = Array2::from_shape_simple_fn((r, c), || if rng.random::<f64>() < p { 0.0 } else { keep });
            tape.mul_const(x, mask)
        }
        _ => x,
    }
}

fn dense<'a>(tape: &mut Tape<'a>, bound: &mut Bound<'a>, x: Var, w: ParamId, b: ParamId) -> Var {
    let w = bound.var(tape, w);
    let b = bound.var(tape, b);
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

impl ActModel {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed ^ 0xac7_0000);
        let d = cfg.d_model;
        let std = 0.02;
        let out_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let mut p = ParamSet::new();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let n = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerIds {
                ln1_g: p.add(n("ln1.gamma"), Array2::ones((1, d)), false),
                ln1_b: p.add(n("ln1.beta"), Array2::zeros((1, d)), false),
                wq: p.add(n("attn.wq"), normal(d, d, std, &mut rng), true),
                wk: p.add(n("attn.wk"), normal(d, d, std, &mut rng), true),
                wv: p.add(n("attn.wv"), normal(d, d, std, &mut rng), true),
                bq: p.add(n("attn.bq"), Array2::zeros((1, d)), false),
                bk: p.add(n("attn.bk"), Array2::zeros((1, d)), false),
                bv: p.add(n("attn.bv"), Array2::zeros((1, d)), false),
                wo: p.add(n("attn.wo"), normal(d, d, out_std, &mut rng), true),
                bo: p.add(n("attn.bo"), Array2::zeros((1, d)), false),
                ln2_g: p.add(n("ln2.gamma"), Array2::ones((1, d)), false),
                ln2_b: p.add(n("ln2.beta"), Array2::zeros((1, d)), false),
                w1: p.add(n("mlp.w1"), normal(d, cfg.d_ff, std, &mut rng), true),
                b1: p.add(n("mlp.b1"), Array2::zeros((1, cfg.d_ff)), false),
                w2: p.add(n("mlp.w2"), normal(cfg.d_ff, d, out_std, &mut rng), true),
                b2: p.add(n("mlp.b2"), Array2::zeros((1, d)), false),
            });
        }
        let lnf_g = p.add("final_ln.gamma", Array2::ones((1, d)), false);
        let lnf_b = p.add("final_ln.beta", Array2::zeros((1, d)), false);
        let type_w1 = p.add("type_head.w1", normal(d, cfg.type_hidden, std, &mut rng), true);
        let type_b1 = p.add("type_head.b1", Array2::zeros((1, cfg.type_hidden)), false);
        let type_w2 = p.add("type_head.w2", normal(cfg.type_hidden, ActionType::COUNT, std, &mut rng), true);
        let type_b2 = p.add("type_head.b2", Array2::zeros((1, ActionType::COUNT)), false);
        let first = cfg.target_hidden.unwrap_or(cfg.target_dim);
        let target_w1 = p.add("target_head.w1", normal(d, first, 1.0 / (d as f64).sqrt(), &mut rng), true);
        let target_b1 = p.add("target_head.b1", Array2::zeros((1, first)), false);
        let target_w2 = cfg.target_hidden.map(|h| {
            (
                p.add("target_head.w2", normal(h, cfg.target_dim, 1.0 / (h as f64).sqrt(), &mut rng), true),
                p.add("target_head.b2", Array2::zeros((1, cfg.target_dim)), false),
            )
        });
        let log_tau = p.add("target_head.log_tau", Array2::zeros((1, 1)), false);
        Ok(Self {
            cfg,
            params: p,
            layers,
            head: HeadIds {
                lnf_g,
                lnf_b,
                type_w1,
                type_b1,
                type_w2,
                type_b2,
                target_w1,
                target_b1,
                target_w2,
                log_tau,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn temperature(&self) -> f64 {
        self.params.get(self.head.log_tau)[[0, 0]].exp()
    }

    pub fn set_temperature(&mut self, tau: f64) {
        assert!(tau > 0.0, "temperature must be positive");
        self.params.get_mut(self.head.log_tau)[[0, 0]] = tau.ln();
    }

    /// Hidden states for an `L × d_model` token node. Dropout is applied
    /// only when `rng` is given.
    pub fn forward_tape<'a, R: Rng>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &mut Bound<'a>,
        x: Var,
        mut rng: Option<&mut R>,
    ) -> Var {
        let p = self.cfg.dropout;
        let dh = self.cfg.d_model / self.cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = dropout(tape, x, p, &mut rng);
        for ids in &self.layers {
            let g = bound.var(tape, ids.ln1_g);
            let b = bound.var(tape, ids.ln1_b);
            let h = tape.layer_norm(x, g, b);
            let q = dense(tape, bound, h, ids.wq, ids.bq);
            let k = dense(tape, bound, h, ids.wk, ids.bk);
            let v = dense(tape, bound, h, ids.wv, ids.bv);
            let heads: Vec<Var> = (0..self.cfg.n_heads)
                .map(|hd| {
                    let qh = tape.slice_cols(q, hd * dh, dh);
                    let kh = tape.slice_cols(k, hd * dh, dh);
                    let vh = tape.slice_cols(v, hd * dh, dh);
                    let sc = tape.matmul_t(qh, kh);
                    let sc = tape.scale(sc, scale);
                    let att = tape.causal_softmax(sc);
                    tape.matmul(att, vh)
                })
                .collect();
            let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let a = dense(tape, bound, cat, ids.wo, ids.bo);
            let a = dropout(tape, a, p, &mut rng);
            x = tape.add(x, a);

            let g = bound.var(tape, ids.ln2_g);
            let b = bound.var(tape, ids.ln2_b);
            let h = tape.layer_norm(x, g, b);
            let f = dense(tape, bound, h, ids.w1, ids.b1);
            let f = tape.gelu(f);
            let f = dense(tape, bound, f, ids.w2, ids.b2);
            let f = dropout(tape, f, p, &mut rng);
            x = tape.add(x, f);
        }
        let g = bound.var(tape, self.head.lnf_g);
        let b = bound.var(tape, self.head.lnf_b);
        tape.layer_norm(x, g, b)
    }

    pub fn type_logits_tape<'a, R: Rng>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &mut Bound<'a>,
        h: Var,
        mut rng: Option<&mut R>,
    ) -> Var {
        let z = dense(tape, bound, h, self.head.type_w1, self.head.type_b1);
        let z = tape.gelu(z);
        let z = dropout(tape, z, self.cfg.dropout, &mut rng);
        dense(tape, bound, z, self.head.type_w2, self.head.type_b2)
    }

    /// `f_target` followed by row L2 normalization (guarded by 1e-12).
    pub fn target_embed_tape<'a>(&'a self, tape: &mut Tape<'a>, bound: &mut Bound<'a>, h: Var) -> Var {
        let mut z = dense(tape, bound, h, self.head.target_w1, self.head.target_b1);
        if let Some((w2, b2)) = self.head.target_w2 {
            z = tape.gelu(z);
            z = dense(tape, bound, z, w2, b2);
        }
        tape.row_normalize(z, DEGENERATE_NORM)
    }

    /// Scaled cosine similarities between query rows and key rows.
    pub fn click_scores_tape<'a>(&'a self, tape: &mut Tape<'a>, bound: &mut Bound<'a>, q: Var, keys: Var) -> Var {
        let qn = self.target_embed_tape(tape, bound, q);
        let kn = self.target_embed_tape(tape, bound, keys);
        let s = tape.matmul_t(qn, kn);
        let log_tau = bound.var(tape, self.head.log_tau);
        let tau = tape.exp(log_tau);
        tape.scale_by(s, tau)
    }

    /// Hidden states of a built sequence, dropout off.
    pub fn forward(&self, seq: &TokenSequence) -> Array2<f64> {
        self.forward_tokens(&seq.tokens)
    }

    pub fn forward_tokens(&self, tokens: &Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let mut bound = Bound::new(&self.params);
        let x = tape.constant_ref(tokens);
        let h = self.forward_tape::<ChaCha8Rng>(&mut tape, &mut bound, x, None);
        tape.value(h).to_owned()
    }

    pub fn type_logits(&self, h: ArrayView1<f64>) -> Array1<f64> {
        let mut tape = Tape::new();
        let mut bound = Bound::new(&self.params);
        let x = tape.constant(h.to_owned().insert_axis(ndarray::Axis(0)));
        let z = self.type_logits_tape::<ChaCha8Rng>(&mut tape, &mut bound, x, None);
        tape.value(z).row(0).to_owned()
    }

    fn target_raw(&self, h: ArrayView2<f64>) -> Array2<f64> {
        let mut z = h.dot(self.params.get(self.head.target_w1)) + self.params.get(self.head.target_b1);
        if let Some((w2, b2)) = self.head.target_w2 {
            z.mapv_inplace(crate::tape::gelu);
            z = z.dot(self.params.get(w2)) + self.params.get(b2);
        }
        z
    }

    /// Scaled cosine similarity of `f_target(h_type)` against each
    /// `f_target(h_ui)` row. In strict mode near-zero norms are an error;
    /// otherwise they are guarded by 1e-12 in the denominator.
    pub fn click_scores(&self, h_type: ArrayView1<f64>, h_ui: ArrayView2<f64>, strict: bool) -> Result<Array1<f64>, ModelError> {
        let q = self.target_raw(h_type.insert_axis(ndarray::Axis(0)));
        let p = self.target_raw(h_ui);
        let qn = q.row(0).dot(&q.row(0)).sqrt();
        let pn: Vec<f64> = p.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
        if strict {
            if qn < DEGENERATE_NORM {
                return Err(ModelError::DegenerateEmbedding("query".into()));
            }
            if let Some(i) = pn.iter().position(|&n| n < DEGENERATE_NORM) {
                return Err(ModelError::DegenerateEmbedding(format!("element {i}")));
            }
        }
        let tau = self.temperature();
        Ok(Array1::from_iter(p.outer_iter().zip(&pn).map(|(r, n)| {
            tau * r.dot(&q.row(0)) / ((qn + DEGENERATE_NORM) * (n + DEGENERATE_NORM))
        })))
    }

    /// Teacher-forced loss sums for one episode on `tape`. Click terms cover
    /// every step with a target element; negatives are all ui tokens of the
    /// episode.
    pub fn episode_terms<'a, R: Rng>(
        &'a self,
        bundle: &'a EncoderBundle,
        episode: &Episode,
        tape: &mut Tape<'a>,
        model_bound: &mut Bound<'a>,
        enc_bound: &mut Bound<'a>,
        mut rng: Option<&mut R>,
    ) -> Result<EpisodeTerms, ModelError> {
        let obs: Vec<_> = episode.steps.iter().map(|s| &s.observation).collect();
        let actions: Vec<_> = episode.steps.iter().map(|s| s.action.clone()).collect();
        let hist = History {
            goal: &episode.goal,
            observations: &obs,
            actions: &actions,
        };
        let (x, layout) = embed_on_tape(&hist, Span::Full, bundle, tape, enc_bound)?;
        let h = self.forward_tape(tape, model_bound, x, rng.as_deref_mut());

        let h_end = tape.gather_rows(h, &layout.end_positions);
        let logits = self.type_logits_tape(tape, model_bound, h_end, rng.as_deref_mut());
        let truth: Vec<usize> = actions.iter().map(|a| a.action_type().index()).collect();
        let type_sum = tape.cross_entropy_sum(logits, &truth);

        let (queries, positives) = click_targets(&layout, episode)?;
        let click_sum = if queries.is_empty() {
            None
        } else {
            let q = tape.gather_rows(h, &queries);
            let keys = tape.gather_rows(h, &layout.all_ui_positions());
            let s = self.click_scores_tape(tape, model_bound, q, keys);
            Some(tape.cross_entropy_sum(s, &positives))
        };
        Ok(EpisodeTerms {
            type_sum,
            n_type: truth.len(),
            click_sum,
            n_click: queries.len(),
        })
    }

    /// Type distribution and, for targeted types, the click choice at step
    /// `t` of a history. `forced` overrides the predicted type for the query.
    pub fn predict_history(
        &self,
        bundle: &EncoderBundle,
        hist: &History<'_>,
        t: usize,
        forced: Option<ActionType>,
        opts: PredictOptions,
    ) -> Result<ActPrediction, ModelError> {
        let seq = crate::sequence::build_history_sequence(hist, bundle, Span::Observe(t))?;
        let h = self.forward(&seq);
        let end = *seq.layout.end_positions.last().expect("observed step has an end token");
        let dist = softmax(self.type_logits(h.row(end)).view());
        let predicted = ActionType::from_index(argmax(dist.as_slice().expect("contiguous")).unwrap_or(0))
            .expect("11 logits");
        let query_type = forced.unwrap_or(predicted);
        let (click_scores, predicted_element) = if query_type.has_target() {
            let (scores, el) = self.click_choice(bundle, hist, t, query_type, opts)?;
            (Some(scores), Some(el))
        } else {
            (None, None)
        };
        Ok(ActPrediction {
            type_distribution: dist.to_vec(),
            predicted_type: query_type,
            click_scores,
            predicted_element,
        })
    }

    pub fn click_choice(
        &self,
        bundle: &EncoderBundle,
        hist: &History<'_>,
        t: usize,
        ty: ActionType,
        opts: PredictOptions,
    ) -> Result<(Vec<f64>, usize), ModelError> {
        let seq = crate::sequence::build_history_sequence(hist, bundle, Span::Query(t, ty))?;
        let h = self.forward(&seq);
        let ui = &seq.layout.ui_positions[t];
        if ui.is_empty() {
            return Err(ModelError::NoCandidates);
        }
        let type_pos = *seq.layout.type_positions.last().expect("query has a type token");
        let keys = h.select(ndarray::Axis(0), ui);
        let scores = self.click_scores(h.row(type_pos), keys.view(), opts.strict)?.to_vec();
        let obs = hist.observations[t];
        let allowed: Vec<bool> = if opts.restrict_clickable && obs.elements.iter().any(|e| e.attrs.clickable) {
            obs.elements.iter().map(|e| e.attrs.clickable).collect()
        } else {
            vec![true; obs.len()]
        };
        let masked: Vec<f64> = scores
            .iter()
            .zip(&allowed)
            .map(|(&s, &a)| if a { s } else { f64::NEG_INFINITY })
            .collect();
        let el = argmax(&masked).ok_or(ModelError::NoCandidates)?;
        Ok((scores, el))
    }

    /// Prediction at step `t` of an episode, conditioned on its ground-truth
    /// history.
    pub fn predict(
        &self,
        bundle: &EncoderBundle,
        episode: &Episode,
        t: usize,
        opts: PredictOptions,
    ) -> Result<ActPrediction, ModelError> {
        self.predict_forced(bundle, episode, t, None, opts)
    }

    pub fn predict_forced(
        &self,
        bundle: &EncoderBundle,
        episode: &Episode,
        t: usize,
        forced: Option<ActionType>,
        opts: PredictOptions,
    ) -> Result<ActPrediction, ModelError> {
        let obs: Vec<_> = episode.steps.iter().map(|s| &s.observation).collect();
        let actions: Vec<_> = episode.steps[..t.min(episode.len())]
            .iter()
            .map(|s| s.action.clone())
            .collect();
        let hist = History {
            goal: &episode.goal,
            observations: &obs,
            actions: &actions,
        };
        self.predict_history(bundle, &hist, t, forced, opts)
    }
}

/// Type-token positions of targeted steps and the episode-wide index of
/// each step's target among all ui tokens.
pub(crate) fn click_targets(layout: &SequenceLayout, episode: &Episode) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
    let mut queries = Vec::new();
    let mut positives = Vec::new();
    let mut offset = 0;
    for (t, step) in episode.steps.iter().enumerate() {
        let n = layout.ui_positions.get(t).map_or(0, Vec::len);
        if let ActionSpec::TargetElement(i) = step.action.spec() {
            if *i >= n {
                return Err(ModelError::InvalidTarget { step: t, index: *i, len: n });
            }
            queries.push(layout.type_positions[t]);
            positives.push(offset + i);
        }
        offset += n;
    }
    Ok((queries, positives))
}

/// Zeroes every parameter except layer-norm gains, which are set to one.
#[doc(hidden)]
pub fn zero_except_norm_gains(model: &mut ActModel) {
    for p in model.params.iter_mut() {
        let fill = if p.name.ends_with(".gamma") { 1.0 } else { 0.0 };
        p.value.fill(fill);
    }
}

/// Slice helper used by probes: rows `[0, n)` of a hidden-state matrix.
pub fn prefix_rows(h: &Array2<f64>, n: usize) -> ArrayView2<'_, f64> {
    h.slice(s![..n, ..])
}
