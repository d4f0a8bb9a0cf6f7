//! Sequence discriminator: its own cLSTM encoder and a two-layer
//! spectrally normalized classifier giving `p(real | S)`.

use std::path::Path;

use gradcore::{Adam, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::copy_clstm;
use crate::error::{Error, Result};
use crate::neural::{checkpoint, clstm_hidden_rows, Bound, Clstm, ParamRole, ParamStore, SpectralLinear};
use crate::seqdata::{EventSequence, RngStream};

/// Where the encoder is read out before classification.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Hidden state right after the last event (the BOS state if empty).
    #[default]
    LastEvent,
    /// Hidden state decayed to the horizon.
    Horizon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub hidden: usize,
    pub lr: f64,
    pub readout: Readout,
    pub max_grad_norm: f64,
    /// Cap on power-iteration steps per update for each spectral layer.
    pub power_iterations: usize,
    /// Relative singular-pair residual at which power iteration stops.
    pub power_tol: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { hidden: 64, lr: 1e-3, readout: Readout::LastEvent, max_grad_norm: 5.0, power_iterations: 500, power_tol: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    store: ParamStore,
    clstm: Clstm,
    l1: SpectralLinear,
    l2: SpectralLinear,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let clstm = Clstm::new(&mut store, "disc.clstm", h, ParamRole::Encoder, rng);
        let l1 = SpectralLinear::new(&mut store, "disc.head.0", h, h, ParamRole::Head, rng);
        let l2 = SpectralLinear::new(&mut store, "disc.head.1", h, 1, ParamRole::Head, rng);
        Self { cfg, store, clstm, l1, l2 }
    }

    pub fn config(&self) -> &DiscriminatorConfig {
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

    pub fn head(&self) -> [&SpectralLinear; 2] {
        [&self.l1, &self.l2]
    }

    /// Zeroes the output layer so every score is exactly 0.5.
    pub fn zero_output(&mut self) {
        self.store.value_mut(self.l2.w).as_mut_slice().fill(0.0);
        self.store.value_mut(self.l2.b).as_mut_slice().fill(0.0);
    }

    pub fn freeze_clstm_from(&mut self, src: &ParamStore, src_cell: &Clstm) -> Result<()> {
        copy_clstm(src, src_cell, &mut self.store, &self.clstm)?;
        for id in self.clstm.ids() {
            self.store.set_frozen(id, true);
        }
        Ok(())
    }

    /// `B x 1` logits, one per sequence.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, seqs: &[&EventSequence]) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::Validation("discriminator needs at least one sequence".into()));
        }
        let times: Vec<&[f64]> = seqs.iter().map(|s| s.times()).collect();
        let run = self.clstm.run_batch(tape, p, &times)?;
        let features = match self.cfg.readout {
            Readout::LastEvent => {
                let stacked = run.stack_outputs(tape)?;
                tape.gather_rows(stacked, run.last_rows())?
            }
            Readout::Horizon => {
                let finals = run.final_states(tape)?;
                let horizons: Vec<f64> = seqs.iter().map(|s| s.horizon()).collect();
                clstm_hidden_rows(tape, &finals, &horizons)?
            }
        };
        let x = self.l1.forward(tape, p, features)?;
        let x = tape.tanh(x)?;
        self.l2.forward(tape, p, x)
    }

    /// `p(real)` for each sequence, with frozen power-iteration state.
    pub fn score_batch(&self, seqs: &[&EventSequence]) -> Result<Vec<f64>> {
        if seqs.is_empty() {
            return Ok(vec![]);
        }
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape)?;
        let logits = self.logits(&mut tape, &p, seqs)?;
        let probs = tape.sigmoid(logits)?;
        Ok(tape.value(probs).as_slice().to_vec())
    }

    pub fn score(&self, seq: &EventSequence) -> Result<f64> {
        Ok(self.score_batch(&[seq])?[0])
    }

    /// Mean binary cross-entropy with targets 1 for `reals` and 0 for `fakes`:
    /// `−mean log D(real) − mean log(1 − D(fake))`. An empty side contributes 0.
    pub fn bce_loss(&self, tape: &mut Tape, p: &Bound, reals: &[&EventSequence], fakes: &[&EventSequence]) -> Result<Var> {
        if reals.is_empty() && fakes.is_empty() {
            return Err(Error::Validation("BCE needs at least one sequence".into()));
        }
        let all: Vec<&EventSequence> = reals.iter().chain(fakes).copied().collect();
        let logits = self.logits(tape, p, &all)?;
        let mut terms = Vec::with_capacity(2);
        if !reals.is_empty() {
            // −log σ(x) = softplus(−x)
            let x = tape.slice_rows(logits, 0, reals.len())?;
            let nx = tape.neg(x)?;
            let sp = tape.softplus(nx)?;
            terms.push(tape.mean(sp)?);
        }
        if !fakes.is_empty() {
            // −log(1 − σ(x)) = softplus(x)
            let x = tape.slice_rows(logits, reals.len(), fakes.len())?;
            let sp = tape.softplus(x)?;
            terms.push(tape.mean(sp)?);
        }
        Ok(match terms[..] {
            [a] => a,
            [a, b] => tape.add(a, b)?,
            _ => unreachable!(),
        })
    }

    /// One Adam step on the BCE, then power iteration on the updated weights
    /// so every later forward pass uses a current estimate.
    pub fn bce_update(&mut self, opt: &mut Adam, reals: &[&EventSequence], fakes: &[&EventSequence]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape)?;
        let loss = self.bce_loss(&mut tape, &p, reals, fakes)?;
        let value = tape.item(loss);
        let mut grads = tape.backward(loss)?;
        let grads = self.store.collect_grads(&p, &mut grads);
        let lr = self.cfg.lr;
        self.store.apply_adam(opt, grads, |_| lr, Some(self.cfg.max_grad_norm));
        for layer in [&self.l1, &self.l2] {
            layer.refresh(&mut self.store, self.cfg.power_tol, self.cfg.power_iterations);
        }
        Ok(value)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let cfg = serde_json::to_value(&self.cfg).expect("config serialises");
        checkpoint::save(dir, "discriminator", cfg, &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(dir)?;
        if manifest.kind != "discriminator" {
            return Err(Error::Checkpoint(format!("{} holds a {}, not a discriminator", dir.display(), manifest.kind)));
        }
        let cfg: DiscriminatorConfig = serde_json::from_value(manifest.config.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut d = Discriminator::new(cfg, &mut RngStream::new(0, 0));
        checkpoint::load_into(dir, &manifest, &mut d.store)?;
        Ok(d)
    }
}
