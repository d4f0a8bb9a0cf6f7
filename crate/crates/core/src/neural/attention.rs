use gradcore::{Matrix, Tape, Var};
use rand::Rng;

use super::{init_uniform, Bound, ParamId, ParamRole, ParamStore};
use crate::error::Result;

const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization, optionally with a learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub affine: Option<(ParamId, ParamId)>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, affine: bool, role: ParamRole) -> Self {
        let affine = affine.then(|| {
            let g = store.add(format!("{name}.gamma"), Matrix::filled(1, width, 1.0), role);
            let b = store.add(format!("{name}.beta"), Matrix::zeros(1, width), role);
            (g, b)
        });
        Self { affine }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut y = tape.layer_norm_rows(x, LN_EPS)?;
        if let Some((g, b)) = self.affine {
            y = tape.mul(y, p.var(g))?;
            y = tape.add(y, p.var(b))?;
        }
        Ok(y)
    }
}

/// Single-head scaled dot-product self-attention where row `n` only sees
/// rows `1..=n`, followed by an optional residual connection and layer norm.
#[derive(Clone, Debug)]
pub struct CausalAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub norm: LayerNorm,
    pub residual: bool,
    pub width: usize,
}

/// Masked score fill; `exp` of this underflows to exactly 0.
const MASKED: f64 = -1e30;

impl CausalAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, residual: bool, affine: bool, role: ParamRole, rng: &mut impl Rng) -> Self {
        let wq = store.add(format!("{name}.query"), init_uniform(rng, width, width, width), role);
        let wk = store.add(format!("{name}.key"), init_uniform(rng, width, width, width), role);
        let wv = store.add(format!("{name}.value"), init_uniform(rng, width, width, width), role);
        let norm = LayerNorm::new(store, &format!("{name}.norm"), width, affine, role);
        Self { wq, wk, wv, norm, residual, width }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, x)?.0)
    }

    /// Output rows and the `N x N` attention weights.
    pub fn forward_with_weights(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let n = tape.shape(x).0;
        let q = tape.matmul(x, p.var(self.wq))?;
        let k = tape.matmul(x, p.var(self.wk))?;
        let v = tape.matmul(x, p.var(self.wv))?;
        let scores = tape.matmul_bt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (self.width as f64).sqrt())?;
        let mask: Vec<bool> = (0..n * n).map(|i| i % n > i / n).collect();
        let scores = tape.masked_fill(scores, mask, MASKED)?;
        let weights = tape.softmax_rows(scores)?;
        let mut out = tape.matmul(weights, v)?;
        if self.residual {
            out = tape.add(x, out)?;
        }
        let out = self.norm.forward(tape, p, out)?;
        Ok((out, weights))
    }
}
