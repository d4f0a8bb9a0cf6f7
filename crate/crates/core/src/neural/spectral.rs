use gradcore::{Matrix, Tape, Var};
use rand::Rng;

use super::{init_uniform, random_unit, Bound, ParamId, ParamRole, ParamStore};
use crate::error::Result;

/// Power iterations run when the layer is created, so the estimate is
/// already tight before the first training step.
const WARMUP_ITERS: usize = 30;

/// Lower bound on `σ̂`; an all-zero weight then maps to an all-zero output.
const SIGMA_FLOOR: f64 = 1e-12;

/// Linear layer whose weight is divided by a power-iteration estimate of its
/// largest singular value, `σ̂ = uᵀ W v`.
///
/// `u` and `v` live in the store as buffers. They advance only through
/// [`SpectralLinear::power_iterate`]; a forward pass treats them as constants
/// and differentiates through `σ̂` as a function of `W`.
#[derive(Clone, Debug)]
pub struct SpectralLinear {
    pub w: ParamId,
    pub b: ParamId,
    pub u: ParamId,
    pub v: ParamId,
}

impl SpectralLinear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, role: ParamRole, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.weight"), init_uniform(rng, inputs, outputs, inputs), role);
        let b = store.add(format!("{name}.bias"), Matrix::zeros(1, outputs), role);
        let u = store.add(format!("{name}.sn_u"), random_unit(rng, inputs), ParamRole::Buffer);
        let v = store.add(format!("{name}.sn_v"), random_unit(rng, outputs), ParamRole::Buffer);
        let layer = Self { w, b, u, v };
        for _ in 0..WARMUP_ITERS {
            layer.power_iterate(store);
        }
        layer
    }

    /// One power-iteration step: `v ← Wᵀu/‖·‖`, `u ← Wv/‖·‖`.
    pub fn power_iterate(&self, store: &mut ParamStore) {
        let w = store.value(self.w).clone();
        let u = store.value(self.u).clone();
        // A zero weight has no direction to converge to; keep the old vectors.
        let Some(v) = normalized(w.transpose().matmul(&u)) else { return };
        let Some(u) = normalized(w.matmul(&v)) else { return };
        *store.value_mut(self.v) = v;
        *store.value_mut(self.u) = u;
    }

    /// Converges `u`, `v` onto the top singular pair.
    ///
    /// Warm-started iteration can sit on a pair that is no longer the top one
    /// after the spectrum reorders, so a second run starts from the largest
    /// row of `W` and the pair with the larger `σ̂` is kept. Each run stops
    /// once `‖Wᵀu − σ̂v‖ ≤ tol·σ̂` or after `max_iters` steps.
    pub fn refresh(&self, store: &mut ParamStore, tol: f64, max_iters: usize) {
        self.iterate_to(store, tol, max_iters);
        let warm = (store.value(self.u).clone(), store.value(self.v).clone(), self.sigma_estimate(store));
        let w = store.value(self.w);
        let sq = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();
        let Some(top) = (0..w.rows()).map(|r| w.row(r)).max_by(|a, b| sq(a).total_cmp(&sq(b))) else { return };
        let Some(u) = normalized(w.matmul(&Matrix::col_vector(top.to_vec()))) else { return };
        *store.value_mut(self.u) = u;
        self.iterate_to(store, tol, max_iters);
        if self.sigma_estimate(store) < warm.2 {
            *store.value_mut(self.u) = warm.0;
            *store.value_mut(self.v) = warm.1;
        }
    }

    fn iterate_to(&self, store: &mut ParamStore, tol: f64, max_iters: usize) {
        for _ in 0..max_iters {
            self.power_iterate(store);
            if self.residual(store) <= tol {
                break;
            }
        }
    }

    /// Relative singular-pair residual `‖Wᵀu − σ̂v‖ / σ̂`.
    pub fn residual(&self, store: &ParamStore) -> f64 {
        let s = self.sigma_estimate(store);
        if s <= SIGMA_FLOOR {
            return 0.0;
        }
        let wtu = store.value(self.w).transpose().matmul(store.value(self.u));
        let r: f64 = wtu.as_slice().iter().zip(store.value(self.v).as_slice()).map(|(a, b)| (a - s * b).powi(2)).sum();
        r.sqrt() / s
    }

    pub fn sigma_estimate(&self, store: &ParamStore) -> f64 {
        let wv = store.value(self.w).matmul(store.value(self.v));
        wv.as_slice().iter().zip(store.value(self.u).as_slice()).map(|(a, b)| a * b).sum()
    }

    /// `W / σ̂` as a plain matrix.
    pub fn effective_weight(&self, store: &ParamStore) -> Matrix {
        let s = self.sigma_estimate(store).max(SIGMA_FLOOR);
        store.value(self.w).map(|x| x / s)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let w = p.var(self.w);
        let wv = tape.matmul(w, p.var(self.v))?;
        let uwv = tape.mul(wv, p.var(self.u))?;
        let sigma = tape.sum(uwv)?;
        let sigma = tape.clamp(sigma, SIGMA_FLOOR, f64::INFINITY)?;
        let inv = tape.recip(sigma)?;
        let w_eff = tape.mul(w, inv)?;
        let y = tape.matmul(x, w_eff)?;
        Ok(tape.add(y, p.var(self.b))?)
    }
}

fn normalized(m: Matrix) -> Option<Matrix> {
    let n = m.sq_norm().sqrt();
    (n > 1e-12).then(|| m.map(|x| x / n))
}
