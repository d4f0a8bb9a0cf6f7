//! Layers built on the gradcore tape.
//!
//! Every model owns a [`ParamStore`]. Layers only hold [`ParamId`] handles
//! into it; a forward pass binds the store onto a fresh tape and looks the
//! leaves up through the resulting [`Bound`].

mod attention;
pub mod checkpoint;
mod clstm;
mod linear;
mod spectral;

use gradcore::{Adam, AdamConfig, Gradients, Matrix, Tape, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use attention::{CausalAttention, LayerNorm};
pub use clstm::{clstm_decay, clstm_decay_rows, clstm_hidden, clstm_hidden_rows, Clstm, ClstmRun, ClstmState, Projections};
pub use linear::{Linear, Mlp};
pub use spectral::SpectralLinear;

use crate::error::Result;

/// Which optimizer group a parameter belongs to. `Buffer` entries are state
/// that is never differentiated (power-iteration vectors).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Encoder,
    Actor,
    Critic,
    Head,
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    pub role: ParamRole,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Tape leaves for every entry of a store, in store order.
pub struct Bound(Vec<Var>);

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, role: ParamRole) -> ParamId {
        let name = name.into();
        assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, value, role, frozen: false });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        let e = &self.entries[id.0];
        !e.frozen && e.role != ParamRole::Buffer
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.ids().filter(|&id| self.is_trainable(id)).map(|id| self.value(id).len()).sum()
    }

    /// Places every entry on `tape`; only trainable entries request gradients.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let mut vars = Vec::with_capacity(self.entries.len());
        for id in self.ids() {
            vars.push(tape.leaf(self.value(id).clone(), self.is_trainable(id))?);
        }
        Ok(Bound(vars))
    }

    /// Binds with no gradients at all (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Bound> {
        let mut vars = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            vars.push(tape.constant(e.value.clone())?);
        }
        Ok(Bound(vars))
    }

    /// Gradients for every entry in store order; zeros for non-trainable ones.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Matrix> {
        self.ids()
            .map(|id| {
                if self.is_trainable(id) {
                    grads.take(bound.var(id))
                } else {
                    let (r, c) = self.value(id).shape();
                    Matrix::zeros(r, c)
                }
            })
            .collect()
    }

    pub fn adam(&self) -> Adam {
        Adam::new(self.entries.iter().map(|e| e.value.shape()), AdamConfig::default())
    }

    /// Clips the trainable gradients to `max_norm` (if given) and takes one
    /// Adam step with a per-role learning rate. Returns the pre-clip norm.
    pub fn apply_adam(&mut self, opt: &mut Adam, mut grads: Vec<Matrix>, lr: impl Fn(ParamRole) -> f64, max_norm: Option<f64>) -> f64 {
        let norm = match max_norm {
            Some(m) => gradcore::clip_global_norm(&mut grads, m),
            None => grads.iter().map(Matrix::sq_norm).sum::<f64>().sqrt(),
        };
        let lrs: Vec<f64> = self
            .ids()
            .map(|id| if self.is_trainable(id) { lr(self.entries[id.0].role) } else { 0.0 })
            .collect();
        let mut params: Vec<&mut Matrix> = self.entries.iter_mut().map(|e| &mut e.value).collect();
        opt.step(&mut params, &grads, &lrs);
        norm
    }
}

/// `U(-1/√fan_in, 1/√fan_in)`, the usual default for dense layers.
pub fn init_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

/// Unit-norm Gaussian direction as an `n x 1` column.
pub fn random_unit(rng: &mut impl Rng, n: usize) -> Matrix {
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    Matrix::col_vector(v)
}
