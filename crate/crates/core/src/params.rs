//! Named parameter tensors and their binding onto a [`Tape`].

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    /// Receives decoupled weight decay.
    pub decay: bool,
    /// Fixed tables (sinusoidal positions) are excluded from optimization.
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_fixed(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            decay: false,
            trainable: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamSet) {
        assert_eq!(self.params.len(), other.params.len());
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            assert_eq!(dst.name, src.name);
            dst.value.assign(&src.value);
        }
    }
}

/// Per-tape view of a [`ParamSet`]; each parameter becomes a leaf on first use.
pub struct Bound<'a> {
    set: &'a ParamSet,
    vars: Vec<Option<Var>>,
}

impl<'a> Bound<'a> {
    pub fn new(set: &'a ParamSet) -> Self {
        Self {
            set,
            vars: vec![None; set.len()],
        }
    }

    pub fn var(&mut self, tape: &mut Tape<'a>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = &self.set.params[id.0];
        let v = if p.trainable {
            tape.param(&p.value)
        } else {
            tape.constant_ref(&p.value)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradient per parameter, zeros for parameters the graph never touched.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Array2<f64>> {
        self.set
            .params
            .iter()
            .zip(&self.vars)
            .map(|(p, v)| {
                v.filter(|_| p.trainable)
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Array2::zeros(p.value.dim()))
            })
            .collect()
    }
}

pub(crate) fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}
