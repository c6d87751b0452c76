//! Embeddings for goals, UI elements and actions, plus a contrastive aligner
//! for the image/text sides of UI elements.
//!
//! A UI element becomes `W_in · [f_attr(attrs); f_txt(text); f_img(img)] + b_in`
//! with the attribute, text and image blocks concatenated in that order. Text
//! features come from a seeded feature-hashing bag of tokens; image features
//! pass through a learned affine map; attributes are a learned sum over the
//! set flags plus a depth embedding. Goals and textual action specifications
//! reuse the text block of the same input projection.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::{tokenize, ActionRecord, ActionSpec, ActionType};
use crate::episode::{UiElement, DEFAULT_MAX_ELEMENTS};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{normal, Bound, ParamId, ParamSet};
use crate::tape::{Tape, Var};

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("element index {index} out of range (max {max})")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("image features have length {got}, expected {expected}")]
    ImageDim { got: usize, expected: usize },
    #[error("alignment needs at least two pairs, got {0}")]
    InsufficientPairs(usize),
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalKind {
    Learned,
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub d_txt: usize,
    pub d_img: usize,
    pub d_attr: usize,
    /// Length of the raw per-element image feature vector.
    pub image_dim: usize,
    pub max_elements: usize,
    pub max_steps: usize,
    pub max_depth: u32,
    pub context_len: usize,
    pub text_hash_seed: u64,
    pub element_positions: PositionalKind,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            d_txt: 64,
            d_img: 32,
            d_attr: 16,
            image_dim: 16,
            max_elements: DEFAULT_MAX_ELEMENTS,
            max_steps: 32,
            max_depth: 8,
            context_len: 1024,
            text_hash_seed: 0x5eed,
            element_positions: PositionalKind::Learned,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let dims = [
            ("d_model", self.d_model),
            ("d_txt", self.d_txt),
            ("d_img", self.d_img),
            ("d_attr", self.d_attr),
            ("image_dim", self.image_dim),
            ("max_elements", self.max_elements),
            ("max_steps", self.max_steps),
            ("context_len", self.context_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::InvalidConfig(format!("{name} must be positive")));
        }
        Ok(())
    }

    fn attr_features(&self) -> usize {
        3 + self.max_depth as usize + 1
    }
}

fn fnv1a_seeded(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Signed feature hashing over lowercase tokens, L2-normalized. Empty text
/// maps to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingTextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl HashingTextEncoder {
    pub fn encode(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for tok in tokenize(text) {
            let h = fnv1a_seeded(self.seed, tok.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    pub fn encode_batch<'s>(&self, texts: impl IntoIterator<Item = &'s str>) -> Array2<f64> {
        let rows: Vec<Vec<f64>> = texts.into_iter().map(|t| self.encode(t)).collect();
        let n = rows.len();
        Array2::from_shape_vec((n, self.dim), rows.into_iter().flatten().collect())
            .expect("rows have encoder dimension")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct EncoderIds {
    pub w_attr: ParamId,
    pub w_img: ParamId,
    pub b_img: ParamId,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub p_elem: ParamId,
    pub p_step: ParamId,
    pub e_end: ParamId,
    pub e_empty: ParamId,
    pub type_table: ParamId,
    pub click_table: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBundle {
    cfg: EncoderConfig,
    text: HashingTextEncoder,
    pub(crate) params: ParamSet,
    pub(crate) ids: EncoderIds,
}

fn sinusoidal(rows: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, d), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl EncoderBundle {
    pub fn new(cfg: EncoderConfig) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed ^ 0xe1c0_de00);
        let d = cfg.d_model;
        let d_in = cfg.d_attr + cfg.d_txt + cfg.d_img;
        let mut p = ParamSet::new();
        let w_attr = p.add("enc.attr.table", normal(cfg.attr_features(), cfg.d_attr, 0.2, &mut rng), true);
        let w_img = p.add(
            "enc.img.weight",
            normal(cfg.image_dim, cfg.d_img, 1.0 / (cfg.image_dim as f64).sqrt(), &mut rng),
            true,
        );
        let b_img = p.add("enc.img.bias", Array2::zeros((1, cfg.d_img)), false);
        let w_in = p.add("enc.in.weight", normal(d_in, d, 1.0 / (d_in as f64).sqrt(), &mut rng), true);
        let b_in = p.add("enc.in.bias", Array2::zeros((1, d)), false);
        let p_elem = match cfg.element_positions {
            PositionalKind::Learned => p.add("enc.pos.element", normal(cfg.max_elements, d, 0.02, &mut rng), false),
            PositionalKind::Sinusoidal => p.add_fixed("enc.pos.element", sinusoidal(cfg.max_elements, d)),
        };
        let p_step = p.add("enc.pos.step", normal(cfg.max_steps, d, 0.02, &mut rng), false);
        let e_end = p.add("enc.token.end", normal(1, d, 0.02, &mut rng), false);
        let e_empty = p.add("enc.token.empty_spec", normal(1, d, 0.02, &mut rng), false);
        let type_table = p.add("enc.action.type", normal(ActionType::COUNT, d, 0.02, &mut rng), false);
        let click_table = p.add("enc.action.click", normal(cfg.max_elements, d, 0.02, &mut rng), false);
        let text = HashingTextEncoder {
            dim: cfg.d_txt,
            seed: cfg.text_hash_seed,
        };
        Ok(Self {
            cfg,
            text,
            params: p,
            ids: EncoderIds {
                w_attr,
                w_img,
                b_img,
                w_in,
                b_in,
                p_elem,
                p_step,
                e_end,
                e_empty,
                type_table,
                click_table,
            },
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn text_encoder(&self) -> &HashingTextEncoder {
        &self.text
    }

    pub fn element_position(&self, index: usize) -> Array1<f64> {
        self.params.get(self.ids.p_elem).row(index).to_owned()
    }

    pub fn step_position(&self, t: usize) -> Array1<f64> {
        self.params.get(self.ids.p_step).row(t).to_owned()
    }

    pub fn type_embedding(&self, t: ActionType) -> Array1<f64> {
        self.params.get(self.ids.type_table).row(t.index()).to_owned()
    }

    fn attr_matrix(&self, elements: &[&UiElement]) -> Array2<f64> {
        let mut m = Array2::zeros((elements.len(), self.cfg.attr_features()));
        for (r, el) in elements.iter().enumerate() {
            m[[r, 0]] = el.attrs.clickable as u8 as f64;
            m[[r, 1]] = el.attrs.editable as u8 as f64;
            m[[r, 2]] = el.attrs.selected as u8 as f64;
            m[[r, 3 + el.attrs.depth.min(self.cfg.max_depth) as usize]] = 1.0;
        }
        m
    }

    pub(crate) fn check_image_dims(&self, elements: &[&UiElement]) -> Result<(), EncoderError> {
        match elements
            .iter()
            .find(|el| el.image_features.len() != self.cfg.image_dim)
        {
            Some(el) => Err(EncoderError::ImageDim {
                got: el.image_features.len(),
                expected: self.cfg.image_dim,
            }),
            None => Ok(()),
        }
    }

    /// `W_in([f_attr; f_txt; f_img]) + b_in` for each element, without
    /// positional terms. Image dimensions must already be checked.
    pub(crate) fn element_rows<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &mut Bound<'a>,
        elements: &[&UiElement],
    ) -> Var {
        let n = elements.len();
        let attrs = tape.constant(self.attr_matrix(elements));
        let w_attr = bound.var(tape, self.ids.w_attr);
        let e_attr = tape.matmul(attrs, w_attr);

        let txt = tape.constant(self.text.encode_batch(elements.iter().map(|e| e.text.as_str())));

        let raw = Array2::from_shape_vec(
            (n, self.cfg.image_dim),
            elements
                .iter()
                .flat_map(|e| e.image_features.iter().copied())
                .collect(),
        )
        .expect("image dims checked");
        let raw = tape.constant(raw);
        let w_img = bound.var(tape, self.ids.w_img);
        let b_img = bound.var(tape, self.ids.b_img);
        let e_img = tape.matmul(raw, w_img);
        let e_img = tape.add_row(e_img, b_img);

        let cat = tape.concat_cols(&[e_attr, txt, e_img]);
        let w_in = bound.var(tape, self.ids.w_in);
        let b_in = bound.var(tape, self.ids.b_in);
        let out = tape.matmul(cat, w_in);
        tape.add_row(out, b_in)
    }

    /// Projects text through the text block of the input projection, i.e. the
    /// input projection applied to `[0; f_txt(text); 0]`.
    pub(crate) fn text_rows<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &mut Bound<'a>,
        texts: &[&str],
    ) -> Var {
        let txt = tape.constant(self.text.encode_batch(texts.iter().copied()));
        let w_in = bound.var(tape, self.ids.w_in);
        let block: Vec<usize> = (self.cfg.d_attr..self.cfg.d_attr + self.cfg.d_txt).collect();
        let w_txt = tape.gather_rows(w_in, &block);
        let b_in = bound.var(tape, self.ids.b_in);
        let out = tape.matmul(txt, w_txt);
        tape.add_row(out, b_in)
    }

    pub fn encode_goal(&self, goal: &str) -> Array1<f64> {
        let mut tape = Tape::new();
        let mut bound = Bound::new(&self.params);
        let v = self.text_rows(&mut tape, &mut bound, &[goal]);
        tape.value(v).row(0).to_owned()
    }

    /// Element embedding plus its element-position encoding.
    pub fn encode_element(&self, element: &UiElement, index: usize) -> Result<Array1<f64>, EncoderError> {
        if index >= self.cfg.max_elements {
            return Err(EncoderError::IndexOutOfRange {
                index,
                max: self.cfg.max_elements,
            });
        }
        self.check_image_dims(&[element])?;
        let mut tape = Tape::new();
        let mut bound = Bound::new(&self.params);
        let v = self.element_rows(&mut tape, &mut bound, &[element]);
        Ok(&tape.value(v).row(0) + &self.params.get(self.ids.p_elem).row(index))
    }

    /// `(e_type, e_spec)` for an action, without step positions.
    pub fn encode_action(&self, action: &ActionRecord) -> Result<(Array1<f64>, Array1<f64>), EncoderError> {
        let e_type = self.type_embedding(action.action_type());
        let e_spec = match action.spec() {
            ActionSpec::TargetElement(i) => {
                if *i >= self.cfg.max_elements {
                    return Err(EncoderError::IndexOutOfRange {
                        index: *i,
                        max: self.cfg.max_elements,
                    });
                }
                self.params.get(self.ids.click_table).row(*i).to_owned()
            }
            ActionSpec::Text(s) | ActionSpec::AppName(s) => self.encode_goal(s),
            ActionSpec::Empty => self.params.get(self.ids.e_empty).row(0).to_owned(),
        };
        Ok((e_type, e_spec))
    }

    /// Replaces the image affine map with an aligner's image head.
    pub fn adopt_image_head(&mut self, aligner: &AlignerState) -> Result<(), EncoderError> {
        let w = aligner.params.get(aligner.ids.w_img);
        if w.dim() != self.params.get(self.ids.w_img).dim() {
            return Err(EncoderError::InvalidConfig(format!(
                "aligner image head is {:?}, encoder expects {:?}",
                w.dim(),
                self.params.get(self.ids.w_img).dim()
            )));
        }
        self.params.get_mut(self.ids.w_img).assign(w);
        self.params
            .get_mut(self.ids.b_img)
            .assign(aligner.params.get(aligner.ids.b_img));
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct AlignerIds {
    w_img: ParamId,
    b_img: ParamId,
    w_txt: ParamId,
    b_txt: ParamId,
    log_tau: ParamId,
}

/// Image and text projection heads plus a temperature kept positive by
/// storing its logarithm.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignerState {
    pub(crate) params: ParamSet,
    ids: AlignerIds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// All pairs are identical after featurization; no negatives exist.
    pub degenerate: bool,
    pub temperature: f64,
}

impl AlignerState {
    pub fn new(image_dim: usize, text_dim: usize, d_align: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let w_img = p.add("align.img.weight", normal(image_dim, d_align, 1.0 / (image_dim as f64).sqrt(), &mut rng), true);
        let b_img = p.add("align.img.bias", Array2::zeros((1, d_align)), false);
        let w_txt = p.add("align.txt.weight", normal(text_dim, d_align, 1.0 / (text_dim as f64).sqrt(), &mut rng), true);
        let b_txt = p.add("align.txt.bias", Array2::zeros((1, d_align)), false);
        let log_tau = p.add("align.log_tau", Array2::zeros((1, 1)), false);
        Self {
            params: p,
            ids: AlignerIds {
                w_img,
                b_img,
                w_txt,
                b_txt,
                log_tau,
            },
        }
    }

    /// Aligner sized to feed `EncoderBundle::adopt_image_head`.
    pub fn for_bundle(bundle: &EncoderBundle, seed: u64) -> Self {
        let c = bundle.config();
        Self::new(c.image_dim, c.d_txt, c.d_img, seed)
    }

    pub fn temperature(&self) -> f64 {
        self.params.get(self.ids.log_tau)[[0, 0]].exp()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn set_identity_heads(&mut self) {
        for id in [self.ids.w_img, self.ids.w_txt] {
            let w = self.params.get_mut(id);
            w.fill(0.0);
            for i in 0..w.nrows().min(w.ncols()) {
                w[[i, i]] = 1.0;
            }
        }
    }

    /// Symmetric InfoNCE: mean of image→text and text→image cross-entropies
    /// over in-batch negatives. Returns the loss node.
    fn loss_on<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &mut Bound<'a>,
        images: Array2<f64>,
        texts: Array2<f64>,
    ) -> Var {
        let n = images.nrows();
        let img = tape.constant(images);
        let txt = tape.constant(texts);
        let (wi, bi) = (bound.var(tape, self.ids.w_img), bound.var(tape, self.ids.b_img));
        let (wt, bt) = (bound.var(tape, self.ids.w_txt), bound.var(tape, self.ids.b_txt));
        let zi = tape.matmul(img, wi);
        let zi = tape.add_row(zi, bi);
        let zt = tape.matmul(txt, wt);
        let zt = tape.add_row(zt, bt);
        let zi = tape.row_normalize(zi, 1e-12);
        let zt = tape.row_normalize(zt, 1e-12);
        let log_tau = bound.var(tape, self.ids.log_tau);
        let tau = tape.exp(log_tau);
        let s_it = tape.matmul_t(zi, zt);
        let s_it = tape.scale_by(s_it, tau);
        let s_ti = tape.matmul_t(zt, zi);
        let s_ti = tape.scale_by(s_ti, tau);
        let diag: Vec<usize> = (0..n).collect();
        let l1 = tape.cross_entropy_sum(s_it, &diag);
        let l2 = tape.cross_entropy_sum(s_ti, &diag);
        let sum = tape.add(l1, l2);
        tape.scale(sum, 0.5 / n as f64)
    }

    pub fn loss(&self, images: &Array2<f64>, texts: &Array2<f64>) -> f64 {
        let mut tape = Tape::new();
        let mut bound = Bound::new(&self.params);
        let l = self.loss_on(&mut tape, &mut bound, images.clone(), texts.clone());
        tape.scalar(l)
    }
}

fn stack(rows: &[&[f64]]) -> Array2<f64> {
    let cols = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_vec(
        (rows.len(), cols),
        rows.iter().flat_map(|r| r.iter().copied()).collect(),
    )
    .expect("rows share a length")
}

/// Aligns pre-featurized `(image, text)` pairs by full-batch Adam on the
/// symmetric InfoNCE loss.
pub fn align_features(
    pairs: &[(Vec<f64>, Vec<f64>)],
    state: &mut AlignerState,
    steps: usize,
    lr: f64,
) -> Result<AlignReport, EncoderError> {
    if pairs.len() < 2 {
        return Err(EncoderError::InsufficientPairs(pairs.len()));
    }
    let images = stack(&pairs.iter().map(|p| p.0.as_slice()).collect::<Vec<_>>());
    let texts = stack(&pairs.iter().map(|p| p.1.as_slice()).collect::<Vec<_>>());
    let degenerate = pairs.iter().all(|p| p == &pairs[0]);
    if degenerate {
        log::warn!("alignment batch has a single distinct pair; no negatives to contrast");
    }
    let mut opt = AdamW::new(
        AdamWConfig {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
        &[&state.params],
    );
    let initial_loss = state.loss(&images, &texts);
    for _ in 0..steps {
        let grads = {
            let mut tape = Tape::new();
            let mut bound = Bound::new(&state.params);
            let l = state.loss_on(&mut tape, &mut bound, images.clone(), texts.clone());
            let mut g = tape.backward(l);
            bound.collect(&mut g)
        };
        opt.step(&mut [&mut state.params], &[grads], lr);
    }
    Ok(AlignReport {
        initial_loss,
        final_loss: state.loss(&images, &texts),
        degenerate,
        temperature: state.temperature(),
    })
}

/// Aligns `(image features, element text)` pairs, hashing text with `text`.
pub fn align_encoders(
    pairs: &[(Vec<f64>, String)],
    text: &HashingTextEncoder,
    state: &mut AlignerState,
    steps: usize,
    lr: f64,
) -> Result<AlignReport, EncoderError> {
    let featurized: Vec<(Vec<f64>, Vec<f64>)> = pairs
        .iter()
        .map(|(img, t)| (img.clone(), text.encode(t)))
        .collect();
    align_features(&featurized, state, steps, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_space::BoundingBox;
    use crate::episode::ElementAttrs;

    fn tiny() -> EncoderBundle {
        EncoderBundle::new(EncoderConfig {
            d_model: 8,
            d_txt: 16,
            d_img: 4,
            d_attr: 3,
            image_dim: 5,
            max_elements: 6,
            max_steps: 4,
            ..Default::default()
        })
        .unwrap()
    }

    fn element(text: &str, img: Vec<f64>) -> UiElement {
        UiElement {
            text: text.into(),
            attrs: ElementAttrs {
                clickable: true,
                editable: false,
                selected: false,
                depth: 1,
            },
            image_features: img,
            bbox: BoundingBox::new(0, 0, 1, 1).unwrap(),
        }
    }

    #[test]
    fn hashing_encoder_basics() {
        let enc = HashingTextEncoder { dim: 64, seed: 1 };
        assert!(enc.encode("").iter().all(|&x| x == 0.0));
        assert!(enc.encode("!!!").iter().all(|&x| x == 0.0));
        assert_eq!(enc.encode("Open Chrome"), enc.encode("open chrome"));
        let n: f64 = enc.encode("a b c").iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn goal_encoding_deterministic_and_discriminative() {
        let b = tiny();
        assert_eq!(b.encode_goal("open chrome"), b.encode_goal("open chrome"));
        assert_ne!(b.encode_goal("open chrome"), b.encode_goal("open maps"));
        // empty text is zero before projection, so only the bias remains
        let bias = b.params.get(b.ids.b_in).row(0).to_owned();
        assert_eq!(b.encode_goal(""), bias);
    }

    #[test]
    fn element_positions_are_additive() {
        let b = tiny();
        let el = element("wifi", vec![0.1, -0.2, 0.3, 0.0, 1.0]);
        let e0 = b.encode_element(&el, 0).unwrap();
        let e3 = b.encode_element(&el, 3).unwrap();
        let diff = &e3 - &e0;
        let pdiff = &b.element_position(3) - &b.element_position(0);
        for (x, y) in diff.iter().zip(pdiff.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(
            b.encode_element(&el, 6),
            Err(EncoderError::IndexOutOfRange { index: 6, max: 6 })
        );
        assert!(matches!(
            b.encode_element(&element("x", vec![1.0]), 0),
            Err(EncoderError::ImageDim { .. })
        ));
    }

    #[test]
    fn concatenation_order_is_attr_text_image() {
        // Perturb one input block at a time and check that the output change
        // equals the matching row-slice of W_in applied to the perturbation.
        let b = tiny();
        let c = b.config().clone();
        let w_in = b.params.get(b.ids.w_in).clone();
        let base = element("", vec![0.0; 5]);
        let e_base = b.encode_element(&base, 0).unwrap();

        // text block: rows d_attr..d_attr+d_txt
        let txt = element("wifi", vec![0.0; 5]);
        let delta = &b.encode_element(&txt, 0).unwrap() - &e_base;
        let f = Array1::from(b.text_encoder().encode("wifi"));
        let expect = f.dot(&w_in.slice(ndarray::s![c.d_attr..c.d_attr + c.d_txt, ..]));
        for (x, y) in delta.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // image block: last d_img rows
        let img = element("", vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let delta = &b.encode_element(&img, 0).unwrap() - &e_base;
        let w_img = b.params.get(b.ids.w_img);
        let expect = w_img
            .row(0)
            .dot(&w_in.slice(ndarray::s![c.d_attr + c.d_txt.., ..]));
        for (x, y) in delta.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // attribute block: first d_attr rows
        let mut attr = base.clone();
        attr.attrs.editable = true;
        let delta = &b.encode_element(&attr, 0).unwrap() - &e_base;
        let w_attr = b.params.get(b.ids.w_attr);
        let expect = w_attr.row(1).dot(&w_in.slice(ndarray::s![..c.d_attr, ..]));
        for (x, y) in delta.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn action_embeddings() {
        let b = tiny();
        let wait = ActionRecord::bare(ActionType::Wait).unwrap();
        let (t, s) = b.encode_action(&wait).unwrap();
        assert_eq!(t, b.type_embedding(ActionType::Wait));
        assert_eq!(s, b.params.get(b.ids.e_empty).row(0).to_owned());
        let (t, s) = b.encode_action(&ActionRecord::click(3)).unwrap();
        assert_eq!(t, b.type_embedding(ActionType::Click));
        assert_eq!(s, b.params.get(b.ids.click_table).row(3).to_owned());
        let (_, s) = b.encode_action(&ActionRecord::input_text("hello")).unwrap();
        assert_eq!(s, b.encode_goal("hello"));
        assert!(b.encode_action(&ActionRecord::click(9)).is_err());
    }

    #[test]
    fn sinusoidal_positions_are_fixed() {
        let b = EncoderBundle::new(EncoderConfig {
            element_positions: PositionalKind::Sinusoidal,
            ..tiny().config().clone()
        })
        .unwrap();
        let id = b.params.find("enc.pos.element").unwrap();
        assert!(!b.params.iter().nth(id.0).unwrap().trainable);
        assert_eq!(b.element_position(0)[1], 1.0); // cos(0)
    }

    fn softmax_nll_oracle(s: [[f64; 2]; 2]) -> f64 {
        // mean of row-wise and column-wise -log softmax of the diagonal
        let mut total = 0.0;
        for i in 0..2 {
            let row = (s[i][0].exp() + s[i][1].exp()).ln();
            let col = (s[0][i].exp() + s[1][i].exp()).ln();
            total += (row - s[i][i]) + (col - s[i][i]);
        }
        total / 4.0
    }

    #[test]
    fn aligned_orthogonal_pairs_match_closed_form() {
        let mut state = AlignerState::new(2, 2, 2, 0);
        state.set_identity_heads();
        let pairs = vec![
            (vec![1.0, 0.0], vec![1.0, 0.0]),
            (vec![0.0, 1.0], vec![0.0, 1.0]),
        ];
        let report = align_features(&pairs, &mut state, 0, 0.05).unwrap();
        let oracle = softmax_nll_oracle([[1.0, 0.0], [0.0, 1.0]]);
        assert!((report.initial_loss - oracle).abs() < 1e-9);
        assert!((oracle - 0.313_261_687_518_222_8).abs() < 1e-12);
        let report = align_features(&pairs, &mut state, 50, 0.05).unwrap();
        assert!(report.final_loss < report.initial_loss);
        assert!(report.temperature > 1.0);
    }

    #[test]
    fn identical_images_cannot_beat_log_batch() {
        let mut state = AlignerState::new(3, 4, 4, 2);
        let pairs: Vec<_> = (0..4)
            .map(|i| {
                let mut t = vec![0.0; 4];
                t[i] = 1.0;
                (vec![0.5, -0.5, 1.0], t)
            })
            .collect();
        let report = align_features(&pairs, &mut state, 100, 0.05).unwrap();
        assert!(report.final_loss >= 4f64.ln() - 1e-9, "{}", report.final_loss);
        assert!(!report.degenerate);
    }

    #[test]
    fn degenerate_and_insufficient_batches() {
        let mut state = AlignerState::new(2, 2, 2, 0);
        let one = vec![(vec![1.0, 0.0], vec![0.0, 1.0])];
        assert_eq!(
            align_features(&one, &mut state, 1, 0.1),
            Err(EncoderError::InsufficientPairs(1))
        );
        let dup = vec![one[0].clone(), one[0].clone()];
        let report = align_features(&dup, &mut state, 5, 0.1).unwrap();
        assert!(report.degenerate);
        assert!(report.final_loss.is_finite());
    }

    #[test]
    fn temperature_stays_positive() {
        let mut state = AlignerState::new(2, 2, 2, 0);
        let pairs = vec![
            (vec![1.0, 0.0], vec![0.0, 1.0]),
            (vec![0.0, 1.0], vec![1.0, 0.0]),
        ];
        align_features(&pairs, &mut state, 200, 0.5).unwrap();
        assert!(state.temperature() > 0.0);
    }

    #[test]
    fn adopts_aligned_image_head() {
        let mut b = tiny();
        let pairs: Vec<_> = (0..4)
            .map(|i| {
                let mut img = vec![0.0; 5];
                img[i] = 1.0;
                (img, ["wifi", "sound", "inbox", "cart"][i].to_string())
            })
            .collect();
        let mut state = AlignerState::for_bundle(&b, 3);
        let report = align_encoders(&pairs, &b.text_encoder().clone(), &mut state, 30, 0.05).unwrap();
        assert!(report.final_loss < report.initial_loss);
        b.adopt_image_head(&state).unwrap();
        assert_eq!(b.params.get(b.ids.w_img), state.params.get(state.ids.w_img));
    }
}
