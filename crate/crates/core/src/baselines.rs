//! Comparison scorers: random (RND), inter-event gap (LEN) and a neural
//! point process fitted by maximum likelihood (PPOD).

use std::path::Path;

use gradcore::{Matrix, Tape, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{checkpoint, clstm_hidden_rows, Bound, Clstm, Linear, ParamRole, ParamStore};
use crate::seqdata::{Dataset, EventSequence, RngStream};

/// I.i.d. uniform scores.
pub fn rnd_scores(seq: &EventSequence, rng: &mut impl Rng) -> Vec<f64> {
    (0..seq.len()).map(|_| rng.random::<f64>()).collect()
}

/// `−(t_n − t_{n−1})` with `t_0 = 0`: a short preceding gap is suspicious.
pub fn len_scores(seq: &EventSequence) -> Vec<f64> {
    let mut prev = 0.0;
    seq.times()
        .iter()
        .map(|&t| {
            let s = -(t - prev);
            prev = t;
            s
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpodConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Uniform samples per inter-event interval for the compensator.
    pub mc_samples: usize,
    pub max_grad_norm: f64,
}

impl Default for PpodConfig {
    fn default() -> Self {
        Self { hidden: 64, epochs: 20, batch_size: 32, lr: 1e-3, mc_samples: 20, max_grad_norm: 5.0 }
    }
}

impl PpodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 || self.mc_samples == 0 {
            return Err(Error::Config("PPOD hidden size, batch size and sample count must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("PPOD learning rate must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// cLSTM with intensity `λ(t) = softplus(h(t) · w + b)`.
#[derive(Clone, Debug)]
pub struct PpodModel {
    cfg: PpodConfig,
    store: ParamStore,
    clstm: Clstm,
    head: Linear,
}

impl PpodModel {
    pub fn new(cfg: PpodConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let clstm = Clstm::new(&mut store, "ppod.clstm", cfg.hidden, ParamRole::Encoder, rng);
        let head = Linear::new(&mut store, "ppod.intensity", cfg.hidden, 1, ParamRole::Head, rng);
        Self { cfg, store, clstm, head }
    }

    pub fn config(&self) -> &PpodConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn clstm(&self) -> &Clstm {
        &self.clstm
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    fn intensity(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        let x = self.head.forward(tape, p, h)?;
        Ok(tape.softplus(x)?)
    }

    /// Mean over `seqs` of `−Σ_n log λ(t_n) + ∫_0^T λ(t) dt`, the integral
    /// estimated with `mc_samples` uniform points per inter-event interval.
    pub fn nll(&self, tape: &mut Tape, p: &Bound, seqs: &[&EventSequence], rng: &mut impl Rng) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::Validation("NLL needs at least one sequence".into()));
        }
        let times: Vec<&[f64]> = seqs.iter().map(|s| s.times()).collect();
        let run = self.clstm.run_batch(tape, p, &times)?;
        let order = run.order();
        let mut total = Vec::new();
        if let Some(pre) = run.stack_pre_event(tape)? {
            let lam = self.intensity(tape, p, pre)?;
            let log_lam = tape.log(lam)?;
            let s = tape.sum(log_lam)?;
            total.push(tape.neg(s)?);
        }
        let m = self.cfg.mc_samples;
        for (k, state) in run.states.iter().enumerate() {
            let rows = state.rows();
            let ends: Vec<f64> = order[..rows].iter().map(|&s| seqs[s].times().get(k).copied().unwrap_or(seqs[s].horizon())).collect();
            let widths: Vec<f64> = ends.iter().zip(&state.times).map(|(b, a)| b - a).collect();
            let weights = tape.constant(Matrix::col_vector(widths.iter().map(|w| w / m as f64).collect()))?;
            for _ in 0..m {
                let at: Vec<f64> = state.times.iter().zip(&widths).map(|(a, w)| a + w * rng.random::<f64>()).collect();
                let h = clstm_hidden_rows(tape, state, &at)?;
                let lam = self.intensity(tape, p, h)?;
                let weighted = tape.mul(lam, weights)?;
                total.push(tape.sum(weighted)?);
            }
        }
        let mut acc = total[0];
        for &t in &total[1..] {
            acc = tape.add(acc, t)?;
        }
        Ok(tape.scale(acc, 1.0 / seqs.len() as f64)?)
    }

    /// `λ(t_n | t_1..t_{n−1})` at every event.
    pub fn event_intensities(&self, seq: &EventSequence) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape)?;
        let run = self.clstm.run(&mut tape, &p, seq.times())?;
        let Some(pre) = run.stack_pre_event(&mut tape)? else { return Ok(vec![]) };
        let lam = self.intensity(&mut tape, &p, pre)?;
        Ok(tape.value(lam).as_slice().to_vec())
    }

    /// `λ(t)` at arbitrary (sorted) query times given the events of `seq`.
    pub fn intensity_at(&self, seq: &EventSequence, queries: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape)?;
        let run = self.clstm.run(&mut tape, &p, seq.times())?;
        let mut out = Vec::with_capacity(queries.len());
        for &t in queries {
            // State after the last event strictly before t.
            let k = seq.times().partition_point(|&e| e < t);
            let h = clstm_hidden_rows(&mut tape, &run.states[k], &[t])?;
            let lam = self.intensity(&mut tape, &p, h)?;
            out.push(tape.item(lam));
        }
        Ok(out)
    }

    /// `−log λ(t_n)`: events the model finds unlikely score high.
    pub fn scores(&self, seq: &EventSequence) -> Result<Vec<f64>> {
        Ok(self.event_intensities(seq)?.into_iter().map(|l| -l.ln()).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let cfg = serde_json::to_value(&self.cfg).expect("config serialises");
        checkpoint::save(dir, "ppod", cfg, &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(dir)?;
        if manifest.kind != "ppod" {
            return Err(Error::Checkpoint(format!("{} holds a {}, not a PPOD model", dir.display(), manifest.kind)));
        }
        let cfg: PpodConfig = serde_json::from_value(manifest.config.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut m = PpodModel::new(cfg, &mut RngStream::new(0, 0));
        checkpoint::load_into(dir, &manifest, &mut m.store)?;
        Ok(m)
    }
}

/// Minibatch Adam on the NLL. Returns the model and, per epoch, the mean NLL
/// over the whole dataset evaluated after the epoch with fixed compensator
/// samples (so successive values are comparable).
pub fn ppod_train(data: &Dataset, cfg: &PpodConfig, rng: &mut RngStream) -> Result<(PpodModel, Vec<f64>)> {
    cfg.validate()?;
    if data.sequences.is_empty() {
        return Err(Error::Validation("PPOD training needs a non-empty dataset".into()));
    }
    let base: u64 = rng.random();
    let mut model = PpodModel::new(cfg.clone(), &mut RngStream::new(base, 0));
    let mut opt = model.store.adam();
    let mut shuffle = RngStream::new(base, 1);
    let mut mc = RngStream::new(base, 2);
    let eval_seed = RngStream::new(base, 3).random::<u64>();
    let seqs: Vec<&EventSequence> = data.sequences.iter().map(|s| s.seq()).collect();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EventSequence> = chunk.iter().map(|&i| seqs[i]).collect();
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape)?;
            let loss = model.nll(&mut tape, &p, &batch, &mut mc)?;
            let mut grads = tape.backward(loss)?;
            let grads = model.store.collect_grads(&p, &mut grads);
            let lr = cfg.lr;
            model.store.apply_adam(&mut opt, grads, |_| lr, Some(cfg.max_grad_norm));
        }
        history.push(dataset_nll(&model, &seqs, &mut RngStream::new(eval_seed, 0))?);
    }
    Ok((model, history))
}

fn dataset_nll(model: &PpodModel, seqs: &[&EventSequence], rng: &mut RngStream) -> Result<f64> {
    let mut total = 0.0;
    for chunk in seqs.chunks(model.cfg.batch_size.max(64)) {
        let mut tape = Tape::new();
        let p = model.store.bind_frozen(&mut tape)?;
        let loss = model.nll(&mut tape, &p, chunk, rng)?;
        total += tape.item(loss) * chunk.len() as f64;
    }
    Ok(total / seqs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn len_formula() {
        let s = EventSequence::new(vec![1.0, 1.1, 5.0], 10.0).unwrap();
        let sc = len_scores(&s);
        let want = [-1.0, -0.1, -3.9];
        for (a, b) in sc.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(len_scores(&EventSequence::empty(10.0)).is_empty());
    }

    #[test]
    fn rnd_is_deterministic_and_bounded() {
        let s = EventSequence::new(vec![1.0, 2.0, 3.0], 10.0).unwrap();
        let a = rnd_scores(&s, &mut RngStream::new(5, 1));
        assert_eq!(a, rnd_scores(&s, &mut RngStream::new(5, 1)));
        assert!(a.iter().all(|x| (0.0..1.0).contains(x)));
    }

    #[test]
    fn constant_model_nll_matches_closed_form() {
        // Zero weights: h(t) = 0 everywhere, λ = softplus(b) constant, so the
        // NLL is exactly −N·log λ + λ·T regardless of the samples drawn.
        let cfg = PpodConfig { hidden: 4, ..Default::default() };
        let mut m = PpodModel::new(cfg, &mut RngStream::new(0, 0));
        for id in m.store.ids().collect::<Vec<_>>() {
            m.store.value_mut(id).as_mut_slice().fill(0.0);
        }
        m.store.value_mut(m.head.b).as_mut_slice().fill(0.3);
        let lam = (1.0 + 0.3f64.exp()).ln();
        let s = EventSequence::new(vec![0.5, 2.0, 6.5], 10.0).unwrap();
        let mut tape = Tape::new();
        let p = m.store.bind_frozen(&mut tape).unwrap();
        let nll = m.nll(&mut tape, &p, &[&s], &mut RngStream::new(1, 0)).unwrap();
        let want = -3.0 * lam.ln() + lam * 10.0;
        assert!((tape.item(nll) - want).abs() < 1e-10, "{} vs {want}", tape.item(nll));
        assert!(m.scores(&s).unwrap().iter().all(|&x| (x + lam.ln()).abs() < 1e-12));
    }
}
