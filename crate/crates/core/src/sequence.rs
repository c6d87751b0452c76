//! Episode token sequences.
//!
//! Layout: `[goal, (ui_0 … ui_{n_t-1}, end, type, spec) for each step t]`.
//! Every token of step `t` carries the step position `p_t`; ui tokens also
//! carry their element position `p_i`. The goal token carries neither.

use ndarray::Array2;
use thiserror::Error;

use crate::action_space::{ActionRecord, ActionSpec, ActionType};
use crate::encoders::{EncoderBundle, EncoderError};
use crate::episode::{Episode, Observation, UiElement};
use crate::params::Bound;
use crate::tape::{Tape, Var};

#[derive(Debug, Error, PartialEq)]
pub enum SequenceError {
    #[error("sequence of {len} tokens exceeds context length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("episode has {steps} steps, encoder supports {max}")]
    TooManySteps { steps: usize, max: usize },
    #[error("step {step} is out of range for an episode of {len} steps")]
    StepOutOfRange { step: usize, len: usize },
    #[error("missing action for completed step {0}")]
    MissingAction(usize),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Goal,
    Ui,
    End,
    Type,
    Spec,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Goal => "goal",
            Role::Ui => "ui",
            Role::End => "end",
            Role::Type => "type",
            Role::Spec => "spec",
        }
    }
}

/// How much of an episode to lay out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Span {
    /// Every step with its action tokens.
    Full,
    /// Steps before `t` in full, then step `t`'s ui tokens and end token.
    Observe(usize),
    /// As `Observe(t)` followed by a type token for the given action type.
    Query(usize, ActionType),
}

/// Token roles and index bookkeeping, independent of embedding values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub roles: Vec<Role>,
    /// Step of each token; `None` for the goal.
    pub timestep: Vec<Option<usize>>,
    /// `(t, i)` for ui tokens.
    pub ui_index_map: Vec<Option<(usize, usize)>>,
    /// Position of each step's end token.
    pub end_positions: Vec<usize>,
    /// Position of each step's type token (completed or queried steps).
    pub type_positions: Vec<usize>,
    /// Positions of each step's ui tokens, indexed by step then element.
    pub ui_positions: Vec<Vec<usize>>,
}

impl SequenceLayout {
    /// Lays out steps with the given element counts. `actions` is the number
    /// of steps that carry type and spec tokens; `query` adds a trailing type
    /// token to the step after them.
    fn new(element_counts: &[usize], actions: usize, query: bool) -> Self {
        let mut l = SequenceLayout {
            roles: vec![Role::Goal],
            timestep: vec![None],
            ui_index_map: vec![None],
            end_positions: Vec::new(),
            type_positions: Vec::new(),
            ui_positions: Vec::new(),
        };
        for (t, &n) in element_counts.iter().enumerate() {
            let mut ui = Vec::with_capacity(n);
            for i in 0..n {
                ui.push(l.roles.len());
                l.push(Role::Ui, t, Some((t, i)));
            }
            l.ui_positions.push(ui);
            l.end_positions.push(l.roles.len());
            l.push(Role::End, t, None);
            if t < actions || (query && t == actions) {
                l.type_positions.push(l.roles.len());
                l.push(Role::Type, t, None);
            }
            if t < actions {
                l.push(Role::Spec, t, None);
            }
        }
        l
    }

    fn push(&mut self, role: Role, t: usize, ui: Option<(usize, usize)>) {
        self.roles.push(role);
        self.timestep.push(Some(t));
        self.ui_index_map.push(ui);
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// True at each end token.
    pub fn prediction_mask_type(&self) -> Vec<bool> {
        self.roles.iter().map(|r| *r == Role::End).collect()
    }

    /// True at each type token.
    pub fn prediction_mask_spec(&self) -> Vec<bool> {
        self.roles.iter().map(|r| *r == Role::Type).collect()
    }

    /// Ui positions in sequence order, across the whole episode.
    pub fn all_ui_positions(&self) -> Vec<usize> {
        self.ui_positions.iter().flatten().copied().collect()
    }
}

/// Sequence layout plus the `L × d_model` token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub layout: SequenceLayout,
    pub tokens: Array2<f64>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn roles(&self) -> &[Role] {
        &self.layout.roles
    }
}

/// Goal, observations and the actions taken so far: the inputs of a
/// sequence, whether the actions are ground truth or executed predictions.
#[derive(Debug, Clone, Copy)]
pub struct History<'e> {
    pub goal: &'e str,
    pub observations: &'e [&'e Observation],
    pub actions: &'e [ActionRecord],
}

/// Row sources for the pooled token matrix that gets permuted into
/// sequence order.
enum Src {
    Text(usize),
    Element(usize),
    End,
    Type(usize),
    Click(usize),
    Empty,
}

fn resolve_span(h: &History<'_>, span: Span) -> Result<(usize, usize, Option<ActionType>), SequenceError> {
    let n = h.observations.len();
    let (steps, actions, query) = match span {
        Span::Full => (n, n, None),
        Span::Observe(t) => (t + 1, t, None),
        Span::Query(t, ty) => (t + 1, t, Some(ty)),
    };
    if steps > n {
        return Err(SequenceError::StepOutOfRange {
            step: steps - 1,
            len: n,
        });
    }
    if h.actions.len() < actions {
        return Err(SequenceError::MissingAction(h.actions.len()));
    }
    Ok((steps, actions, query))
}

/// Lays out a history and embeds it on `tape`. Returns the `L × d_model`
/// token node and its layout.
pub fn embed_on_tape<'a>(
    h: &History<'_>,
    span: Span,
    bundle: &'a EncoderBundle,
    tape: &mut Tape<'a>,
    bound: &mut Bound<'a>,
) -> Result<(Var, SequenceLayout), SequenceError> {
    let cfg = bundle.config();
    let (steps, actions, query) = resolve_span(h, span)?;
    if steps > cfg.max_steps {
        return Err(SequenceError::TooManySteps {
            steps,
            max: cfg.max_steps,
        });
    }
    let counts: Vec<usize> = h.observations[..steps].iter().map(|o| o.len()).collect();
    let layout = SequenceLayout::new(&counts, actions, query.is_some());
    if layout.len() > cfg.context_len {
        return Err(SequenceError::SequenceTooLong {
            len: layout.len(),
            max: cfg.context_len,
        });
    }
    if let Some(&n) = counts.iter().find(|&&n| n > cfg.max_elements) {
        return Err(EncoderError::IndexOutOfRange {
            index: n - 1,
            max: cfg.max_elements,
        }
        .into());
    }

    let mut texts: Vec<&str> = vec![h.goal];
    let mut elements: Vec<&UiElement> = Vec::new();
    let mut types: Vec<usize> = Vec::new();
    let mut clicks: Vec<usize> = Vec::new();
    let mut empties = 0usize;
    let mut ends = 0usize;
    let mut order: Vec<Src> = vec![Src::Text(0)];
    for (t, obs) in h.observations[..steps].iter().enumerate() {
        for el in &obs.elements {
            order.push(Src::Element(elements.len()));
            elements.push(el);
        }
        order.push(Src::End);
        ends += 1;
        let ty = if t < actions {
            Some(h.actions[t].action_type())
        } else if t == actions {
            query
        } else {
            None
        };
        if let Some(ty) = ty {
            order.push(Src::Type(types.len()));
            types.push(ty.index());
        }
        if t < actions {
            let src = match h.actions[t].spec() {
                ActionSpec::TargetElement(i) => {
                    if *i >= cfg.max_elements {
                        return Err(EncoderError::IndexOutOfRange {
                            index: *i,
                            max: cfg.max_elements,
                        }
                        .into());
                    }
                    clicks.push(*i);
                    Src::Click(clicks.len() - 1)
                }
                ActionSpec::Text(s) | ActionSpec::AppName(s) => {
                    texts.push(s);
                    Src::Text(texts.len() - 1)
                }
                ActionSpec::Empty => {
                    empties += 1;
                    Src::Empty
                }
            };
            order.push(src);
        }
    }
    bundle.check_image_dims(&elements)?;

    // Pool layout: [texts | elements | end | types | clicks | empty]
    let ids = bundle.ids;
    let mut parts = vec![bundle.text_rows(tape, bound, &texts)];
    let el_base = texts.len();
    if !elements.is_empty() {
        parts.push(bundle.element_rows(tape, bound, &elements));
    }
    let end_base = el_base + elements.len();
    let e_end = bound.var(tape, ids.e_end);
    parts.push(tape.gather_rows(e_end, &vec![0; ends]));
    let type_base = end_base + ends;
    if !types.is_empty() {
        let table = bound.var(tape, ids.type_table);
        parts.push(tape.gather_rows(table, &types));
    }
    let click_base = type_base + types.len();
    if !clicks.is_empty() {
        let table = bound.var(tape, ids.click_table);
        parts.push(tape.gather_rows(table, &clicks));
    }
    let empty_base = click_base + clicks.len();
    if empties > 0 {
        let e_empty = bound.var(tape, ids.e_empty);
        parts.push(tape.gather_rows(e_empty, &vec![0; empties]));
    }
    let pool = tape.concat_rows(&parts);
    let mut end_seen = 0;
    let perm: Vec<usize> = order
        .iter()
        .map(|s| match *s {
            Src::Text(k) => k,
            Src::Element(k) => el_base + k,
            Src::End => {
                end_seen += 1;
                end_base + end_seen - 1
            }
            Src::Type(k) => type_base + k,
            Src::Click(k) => click_base + k,
            Src::Empty => empty_base,
        })
        .collect();
    let content = tape.gather_rows(pool, &perm);

    let p_step = bound.var(tape, ids.p_step);
    let step_rows = tape.gather_rows_opt(p_step, layout.timestep.clone());
    let p_elem = bound.var(tape, ids.p_elem);
    let elem_rows = tape.gather_rows_opt(p_elem, layout.ui_index_map.iter().map(|u| u.map(|(_, i)| i)).collect());
    let x = tape.add(content, step_rows);
    let x = tape.add(x, elem_rows);
    Ok((x, layout))
}

/// Builds the token sequence of a history.
pub fn build_history_sequence(
    h: &History<'_>,
    bundle: &EncoderBundle,
    span: Span,
) -> Result<TokenSequence, SequenceError> {
    let mut tape = Tape::new();
    let mut bound = Bound::new(bundle.params());
    let (x, layout) = embed_on_tape(h, span, bundle, &mut tape, &mut bound)?;
    Ok(TokenSequence {
        layout,
        tokens: tape.value(x).to_owned(),
    })
}

/// Builds the token sequence of an episode using its ground-truth actions.
pub fn build_sequence(
    episode: &Episode,
    bundle: &EncoderBundle,
    span: Span,
) -> Result<TokenSequence, SequenceError> {
    let obs: Vec<&Observation> = episode.steps.iter().map(|s| &s.observation).collect();
    let actions: Vec<ActionRecord> = episode.steps.iter().map(|s| s.action.clone()).collect();
    build_history_sequence(
        &History {
            goal: &episode.goal,
            observations: &obs,
            actions: &actions,
        },
        bundle,
        span,
    )
}

/// Lower-triangular attention mask: `mask[i][j]` is true iff `j <= i`.
pub fn causal_mask(len: usize) -> Array2<bool> {
    Array2::from_shape_fn((len, len), |(i, j)| j <= i)
}
