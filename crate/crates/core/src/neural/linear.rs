use gradcore::{Matrix, Tape, Var};
use rand::Rng;

use super::{init_uniform, Bound, ParamId, ParamRole, ParamStore};
use crate::error::Result;

/// `y = x · W + b` with `W` stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, role: ParamRole, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.weight"), init_uniform(rng, inputs, outputs, inputs), role);
        let b = store.add(format!("{name}.bias"), Matrix::zeros(1, outputs), role);
        Self { w, b, inputs, outputs }
    }

    pub fn zero_weights(&self, store: &mut ParamStore) {
        store.value_mut(self.w).as_mut_slice().fill(0.0);
        store.value_mut(self.b).as_mut_slice().fill(0.0);
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        Ok(tape.add(y, p.var(self.b))?)
    }
}

/// Dense layers with tanh between them and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, sizes: &[usize], role: ParamRole, rng: &mut impl Rng) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], role, rng))
            .collect();
        Self { layers }
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, p, x)?;
            if i + 1 < self.layers.len() {
                x = tape.tanh(x)?;
            }
        }
        Ok(x)
    }
}
