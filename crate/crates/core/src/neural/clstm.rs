//! Continuous-time LSTM cell.
//!
//! Between events the cell memory relaxes exponentially from `c` toward the
//! target `c_bar` at per-unit rate `delta`:
//!
//! ```text
//! c(t) = c_bar + (c - c_bar) · exp(-delta · (t - t_last))
//! h(t) = o ⊙ tanh(c(t))
//! ```
//!
//! At an event, seven gate pre-activations are read off `[embedding ⊕ h(t)]`:
//! input `i`, forget `f`, candidate `z`, output `o`, target input `ī`,
//! target forget `f̄` and decay `d`. Then `c ← f⊙c(t) + i⊙z`,
//! `c_bar ← f̄⊙c_bar + ī⊙z`, `delta ← softplus(d)`.
//!
//! Sequences start with a beginning-of-sequence step at time 0 driven by its
//! own learned embedding, so the state before the first event already
//! carries a non-trivial decay and the first event's timing is observable.
//!
//! States are batched: row `s` of every state matrix belongs to sequence `s`.
//! Rows never interact, so a sequence gets bit-identical results whether it
//! runs alone or inside a batch.

use gradcore::{Matrix, Tape, Var};
use rand::Rng;

use super::{init_uniform, Bound, ParamId, ParamRole, ParamStore};
use crate::error::{Error, Result};

const GATES: usize = 7;

#[derive(Clone, Debug)]
pub struct Clstm {
    pub hidden: usize,
    /// `2H x 7H`: rows are `[embedding ⊕ hidden]`, column blocks are the gates.
    pub w: ParamId,
    pub b: ParamId,
    pub event_embedding: ParamId,
    pub bos_embedding: ParamId,
}

/// Cell state of a batch right after the latest update; `times[s]` is the
/// update time of row `s`.
#[derive(Clone, Debug)]
pub struct ClstmState {
    pub c: Var,
    pub c_bar: Var,
    pub delta: Var,
    pub o: Var,
    pub times: Vec<f64>,
}

impl ClstmState {
    pub fn rows(&self) -> usize {
        self.times.len()
    }
}

/// Gate projections shared by every step of a run on one tape.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    /// `1 x 7H`: `event_embedding · W_e + b`.
    pub event: Var,
    /// `1 x 7H`: `bos_embedding · W_e + b`.
    pub bos: Var,
    /// `H x 7H` hidden-to-gate block of `W`.
    pub hidden: Var,
}

/// Result of running the cell over a batch of sequences.
///
/// Internally the batch is ordered by decreasing length and step `k` only
/// updates the sequences that have a `k`-th event, so a step's matrices hold
/// the active prefix of that order. Use the row helpers to locate a sequence.
pub struct ClstmRun {
    pub lens: Vec<usize>,
    /// Position of each input sequence in the length-sorted order.
    pub pos: Vec<usize>,
    /// `states[k]` follows step `k` (`k = 0` is the BOS step).
    pub states: Vec<ClstmState>,
    /// `outputs[k]` is `h = o ⊙ tanh(c)` right after step `k`.
    pub outputs: Vec<Var>,
    /// `pre_event[k-1]` is `h(t_k)`, the decayed read-out just before event `k`.
    pub pre_event: Vec<Var>,
    offsets: Vec<usize>,
}

impl ClstmRun {
    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    /// Input indices in the length-sorted order (inverse of `pos`).
    pub fn order(&self) -> Vec<usize> {
        let mut order = vec![0; self.batch()];
        for (s, &p) in self.pos.iter().enumerate() {
            order[p] = s;
        }
        order
    }

    /// Row of sequence `s` at step `k` in [`ClstmRun::stack_outputs`] (and in
    /// any stack of per-step state fields).
    pub fn row(&self, k: usize, s: usize) -> usize {
        debug_assert!(k <= self.lens[s]);
        self.offsets[k] + self.pos[s]
    }

    /// Rows of sequence `s`'s events in [`ClstmRun::stack_outputs`].
    pub fn event_rows(&self, s: usize) -> Vec<usize> {
        (1..=self.lens[s]).map(|k| self.row(k, s)).collect()
    }

    /// Row of each sequence's last output (the BOS output if empty).
    pub fn last_rows(&self) -> Vec<usize> {
        (0..self.batch()).map(|s| self.row(self.lens[s], s)).collect()
    }

    /// Stack of all step outputs.
    pub fn stack_outputs(&self, tape: &mut Tape) -> Result<Var> {
        Ok(tape.concat_rows(&self.outputs)?)
    }

    /// `N x H` per-event outputs of sequence `s`, or `None` if it is empty.
    pub fn event_outputs(&self, tape: &mut Tape, stacked: Var, s: usize) -> Result<Option<Var>> {
        if self.lens[s] == 0 {
            return Ok(None);
        }
        Ok(Some(tape.gather_rows(stacked, self.event_rows(s))?))
    }

    /// Stack of the pre-event read-outs; event `k` of sequence `s` sits at
    /// row `row(k, s) - B`.
    pub fn stack_pre_event(&self, tape: &mut Tape) -> Result<Option<Var>> {
        if self.pre_event.is_empty() {
            return Ok(None);
        }
        Ok(Some(tape.concat_rows(&self.pre_event)?))
    }

    /// State of every input sequence right after its own last event, in input order.
    pub fn final_states(&self, tape: &mut Tape) -> Result<ClstmState> {
        let rows = self.last_rows();
        let pick = |tape: &mut Tape, f: fn(&ClstmState) -> Var| -> Result<Var> {
            let all: Vec<Var> = self.states.iter().map(f).collect();
            let stacked = tape.concat_rows(&all)?;
            Ok(tape.gather_rows(stacked, rows.clone())?)
        };
        let times = (0..self.batch()).map(|s| self.states[self.lens[s]].times[self.pos[s]]).collect();
        Ok(ClstmState {
            c: pick(tape, |s| s.c)?,
            c_bar: pick(tape, |s| s.c_bar)?,
            delta: pick(tape, |s| s.delta)?,
            o: pick(tape, |s| s.o)?,
            times,
        })
    }
}

/// Decayed cell memory `c(t)` at one time per row. Written as
/// `c⊙e + c_bar⊙(1−e)` so that `t = state.time` returns `c` exactly.
pub fn clstm_decay_rows(tape: &mut Tape, state: &ClstmState, ts: &[f64]) -> Result<Var> {
    if ts.len() != state.rows() {
        return Err(Error::Validation(format!("{} decay times for {} state rows", ts.len(), state.rows())));
    }
    let mut dt = Vec::with_capacity(ts.len());
    for (&t, &t0) in ts.iter().zip(&state.times) {
        if t < t0 {
            return Err(Error::Validation(format!("cannot decay cell state at {t0} back to {t}")));
        }
        dt.push(t0 - t);
    }
    let neg_dt = tape.constant(Matrix::col_vector(dt))?;
    let decay = tape.mul(state.delta, neg_dt)?;
    let e = tape.exp(decay)?;
    let ce = tape.mul(state.c, e)?;
    let one_minus = tape.scale(e, -1.0)?;
    let one_minus = tape.shift(one_minus, 1.0)?;
    let cbe = tape.mul(state.c_bar, one_minus)?;
    Ok(tape.add(ce, cbe)?)
}

/// [`clstm_decay_rows`] with the same time for every row.
pub fn clstm_decay(tape: &mut Tape, state: &ClstmState, t: f64) -> Result<Var> {
    clstm_decay_rows(tape, state, &vec![t; state.rows()])
}

/// Hidden read-out `h(t) = o ⊙ tanh(c(t))` at one time per row.
pub fn clstm_hidden_rows(tape: &mut Tape, state: &ClstmState, ts: &[f64]) -> Result<Var> {
    let c = clstm_decay_rows(tape, state, ts)?;
    let th = tape.tanh(c)?;
    Ok(tape.mul(state.o, th)?)
}

pub fn clstm_hidden(tape: &mut Tape, state: &ClstmState, t: f64) -> Result<Var> {
    clstm_hidden_rows(tape, state, &vec![t; state.rows()])
}

impl Clstm {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, role: ParamRole, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.weight"), init_uniform(rng, 2 * hidden, GATES * hidden, 2 * hidden), role);
        let b = store.add(format!("{name}.bias"), Matrix::zeros(1, GATES * hidden), role);
        let event_embedding = store.add(format!("{name}.event_embedding"), init_uniform(rng, 1, hidden, 1), role);
        let bos_embedding = store.add(format!("{name}.bos_embedding"), init_uniform(rng, 1, hidden, 1), role);
        Self { hidden, w, b, event_embedding, bos_embedding }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w, self.b, self.event_embedding, self.bos_embedding]
    }

    pub fn project(&self, tape: &mut Tape, p: &Bound) -> Result<Projections> {
        let h = self.hidden;
        let w_emb = tape.slice_rows(p.var(self.w), 0, h)?;
        let hidden = tape.slice_rows(p.var(self.w), h, h)?;
        let mut proj = |emb: ParamId| -> Result<Var> {
            let x = tape.matmul(p.var(emb), w_emb)?;
            Ok(tape.add(x, p.var(self.b))?)
        };
        let event = proj(self.event_embedding)?;
        let bos = proj(self.bos_embedding)?;
        Ok(Projections { event, bos, hidden })
    }

    /// All-zero memory, unit decay, closed output gate, at time 0.
    pub fn zero_state(&self, tape: &mut Tape, rows: usize) -> Result<ClstmState> {
        let h = self.hidden;
        Ok(ClstmState {
            c: tape.constant(Matrix::zeros(rows, h))?,
            c_bar: tape.constant(Matrix::zeros(rows, h))?,
            delta: tape.constant(Matrix::filled(rows, h, 1.0))?,
            o: tape.constant(Matrix::zeros(rows, h))?,
            times: vec![0.0; rows],
        })
    }

    /// One update of every row at its own time `ts[s]`, driven by the
    /// projected embedding `input` (`1 x 7H`). Returns the new state, the
    /// output `h_n` and the pre-update read-out `h(t)`.
    pub fn step(&self, tape: &mut Tape, proj: &Projections, state: &ClstmState, ts: &[f64], input: Var) -> Result<(ClstmState, Var, Var)> {
        let h = self.hidden;
        let c_t = clstm_decay_rows(tape, state, ts)?;
        let th = tape.tanh(c_t)?;
        let h_t = tape.mul(state.o, th)?;
        let pre = tape.matmul(h_t, proj.hidden)?;
        let pre = tape.add(pre, input)?;

        let gate = |tape: &mut Tape, k: usize| tape.slice_cols(pre, k * h, h);
        let i = gate(tape, 0)?;
        let i = tape.sigmoid(i)?;
        let f = gate(tape, 1)?;
        let f = tape.sigmoid(f)?;
        let z = gate(tape, 2)?;
        let z = tape.tanh(z)?;
        let o = gate(tape, 3)?;
        let o = tape.sigmoid(o)?;
        let ib = gate(tape, 4)?;
        let ib = tape.sigmoid(ib)?;
        let fb = gate(tape, 5)?;
        let fb = tape.sigmoid(fb)?;
        let d = gate(tape, 6)?;
        let delta = tape.softplus(d)?;

        let fc = tape.mul(f, c_t)?;
        let iz = tape.mul(i, z)?;
        let c = tape.add(fc, iz)?;
        let fbc = tape.mul(fb, state.c_bar)?;
        let ibz = tape.mul(ib, z)?;
        let c_bar = tape.add(fbc, ibz)?;
        let tc = tape.tanh(c)?;
        let h_n = tape.mul(o, tc)?;
        Ok((ClstmState { c, c_bar, delta, o, times: ts.to_vec() }, h_n, h_t))
    }

    /// Runs the cell over a batch of strictly increasing time lists.
    pub fn run_batch(&self, tape: &mut Tape, p: &Bound, seqs: &[&[f64]]) -> Result<ClstmRun> {
        for times in seqs {
            if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
                return Err(Error::Validation(format!("event times must increase: {} after {}", w[1], w[0])));
            }
            if times.first().is_some_and(|&t| t < 0.0) {
                return Err(Error::Validation("event times must be non-negative".into()));
            }
        }
        let rows = seqs.len();
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let mut order: Vec<usize> = (0..rows).collect();
        order.sort_by_key(|&s| std::cmp::Reverse(lens[s]));
        let mut pos = vec![0; rows];
        for (i, &s) in order.iter().enumerate() {
            pos[s] = i;
        }
        let steps = lens.iter().copied().max().unwrap_or(0);

        let proj = self.project(tape, p)?;
        let zero = self.zero_state(tape, rows)?;
        let (mut state, out, _) = self.step(tape, &proj, &zero, &vec![0.0; rows], proj.bos)?;
        let mut states = Vec::with_capacity(steps + 1);
        let mut outputs = Vec::with_capacity(steps + 1);
        let mut pre_event = Vec::with_capacity(steps);
        let mut offsets = Vec::with_capacity(steps + 1);
        offsets.push(0);
        states.push(state.clone());
        outputs.push(out);
        let mut next_offset = rows;
        for k in 0..steps {
            let active = order.iter().take_while(|&&s| lens[s] > k).count();
            if active < state.rows() {
                state = self.keep_rows(tape, &state, active)?;
            }
            let ts: Vec<f64> = order[..active].iter().map(|&s| seqs[s][k]).collect();
            let (next, out, h_t) = self.step(tape, &proj, &state, &ts, proj.event)?;
            offsets.push(next_offset);
            next_offset += active;
            state = next;
            states.push(state.clone());
            outputs.push(out);
            pre_event.push(h_t);
        }
        Ok(ClstmRun { lens, pos, states, outputs, pre_event, offsets })
    }

    fn keep_rows(&self, tape: &mut Tape, state: &ClstmState, n: usize) -> Result<ClstmState> {
        Ok(ClstmState {
            c: tape.slice_rows(state.c, 0, n)?,
            c_bar: tape.slice_rows(state.c_bar, 0, n)?,
            delta: tape.slice_rows(state.delta, 0, n)?,
            o: tape.slice_rows(state.o, 0, n)?,
            times: state.times[..n].to_vec(),
        })
    }

    pub fn run(&self, tape: &mut Tape, p: &Bound, times: &[f64]) -> Result<ClstmRun> {
        self.run_batch(tape, p, &[times])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(tape: &mut Tape, c: f64, c_bar: f64, delta: f64) -> ClstmState {
        ClstmState {
            c: tape.constant(Matrix::scalar(c)).unwrap(),
            c_bar: tape.constant(Matrix::scalar(c_bar)).unwrap(),
            delta: tape.constant(Matrix::scalar(delta)).unwrap(),
            o: tape.constant(Matrix::scalar(1.0)).unwrap(),
            times: vec![3.0],
        }
    }

    #[test]
    fn zero_elapsed_returns_cell() {
        let mut t = Tape::new();
        let s = scalar_state(&mut t, 0.37, -1.3, 2.1);
        let c = clstm_decay(&mut t, &s, 3.0).unwrap();
        assert_eq!(t.item(c), 0.37);
    }

    #[test]
    fn half_life_example() {
        let mut t = Tape::new();
        let s = scalar_state(&mut t, 2.0, 0.0, std::f64::consts::LN_2);
        let c = clstm_decay(&mut t, &s, 4.0).unwrap();
        assert!((t.item(c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fast_decay_reaches_target() {
        let mut t = Tape::new();
        let s = scalar_state(&mut t, 2.0, -0.5, 1e4);
        let c = clstm_decay(&mut t, &s, 3.1).unwrap();
        assert!((t.item(c) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn decay_backwards_in_time_fails() {
        let mut t = Tape::new();
        let s = scalar_state(&mut t, 2.0, 0.0, 1.0);
        assert!(clstm_decay(&mut t, &s, 2.9).is_err());
    }

    #[test]
    fn zero_parameters_give_closed_form_output() {
        // With all weights zero every sigmoid gate is 1/2, z = tanh(0) = 0 and
        // delta = ln 2, so c stays 0 and h = 0 after any number of events.
        let mut store = ParamStore::new();
        let mut rng = crate::seqdata::RngStream::new(0, 0);
        let cell = Clstm::new(&mut store, "c", 3, ParamRole::Encoder, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).as_mut_slice().fill(0.0);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let run = cell.run(&mut tape, &p, &[0.5, 1.5]).unwrap();
        let last = run.states.last().unwrap();
        assert_eq!(tape.value(last.o).as_slice(), &[0.5; 3]);
        for &d in tape.value(last.delta).as_slice() {
            assert!((d - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert_eq!(tape.value(run.outputs[2]).as_slice(), &[0.0; 3]);
    }

    #[test]
    fn batch_rows_match_single_runs() {
        let mut store = ParamStore::new();
        let mut rng = crate::seqdata::RngStream::new(4, 0);
        let cell = Clstm::new(&mut store, "c", 5, ParamRole::Encoder, &mut rng);
        let seqs: [&[f64]; 3] = [&[0.4, 1.0, 2.5], &[], &[3.0]];
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape).unwrap();
        let run = cell.run_batch(&mut tape, &p, &seqs).unwrap();
        let stacked = run.stack_outputs(&mut tape).unwrap();
        let last = tape.gather_rows(stacked, run.last_rows()).unwrap();
        let finals = run.final_states(&mut tape).unwrap();
        for (s, times) in seqs.iter().enumerate() {
            let single = cell.run(&mut tape, &p, times).unwrap();
            let h = *single.outputs.last().unwrap();
            assert_eq!(tape.value(h).row(0), tape.value(last).row(s));
            let c = single.states.last().unwrap().c;
            assert_eq!(tape.value(c).row(0), tape.value(finals.c).row(s));
            let single_stack = single.stack_outputs(&mut tape).unwrap();
            let alone = single.event_outputs(&mut tape, single_stack, 0).unwrap();
            let batched = run.event_outputs(&mut tape, stacked, s).unwrap();
            match (alone, batched) {
                (Some(a), Some(b)) => assert_eq!(tape.value(a), tape.value(b)),
                (None, None) => assert!(times.is_empty()),
                _ => panic!("event outputs disagree on emptiness"),
            }
        }
        assert_eq!(finals.times, vec![2.5, 0.0, 3.0]);
        assert_eq!(run.pos, vec![0, 2, 1]);
    }
}
