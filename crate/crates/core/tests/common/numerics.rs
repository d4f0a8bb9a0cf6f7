//! Central-difference gradient checks for every trainable layer, each over
//! 20 random parameter and input draws.

use gradcore::{Matrix, Tape, Var};
use rand::Rng;
use tpp_outlier::agent::{ppo_loss, Generator, GeneratorConfig, PpoConfig, PpoTargets};
use tpp_outlier::baselines::{PpodConfig, PpodModel};
use tpp_outlier::discriminator::{Discriminator, DiscriminatorConfig, Readout};
use tpp_outlier::neural::{clstm_hidden_rows, Bound, CausalAttention, Clstm, LayerNorm, Mlp, ParamRole, ParamStore, SpectralLinear};
use tpp_outlier::seqdata::{EventSequence, RngStream};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const DRAWS: u64 = 20;

fn random(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Moves every trainable entry off its initialisation (zero-initialised
/// layers would otherwise hide upstream gradients).
fn jitter(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        for x in store.value_mut(id).as_mut_slice() {
            *x += rng.random_range(-scale..scale);
        }
    }
}

/// `Σ out ⊙ W` for a fixed random `W`, so no output direction is special.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let (r, c) = tape.shape(out);
    let w = random(&mut RngStream::new(seed, 99), r, c, 1.0);
    let w = tape.constant(w).unwrap();
    let m = tape.mul(out, w).unwrap();
    tape.sum(m).unwrap()
}

/// Compares tape gradients with central differences for every trainable entry.
fn check(store: &ParamStore, what: &str, f: &dyn Fn(&mut Tape, &Bound) -> Var) {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let loss = f(&mut tape, &p);
    let mut grads = tape.backward(loss).unwrap();
    let grads = store.collect_grads(&p, &mut grads);
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let p = s.bind_frozen(&mut t).unwrap();
        let l = f(&mut t, &p);
        t.item(l)
    };
    let mut checked = 0;
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        for idx in 0..store.value(id).len() {
            let mut plus = store.clone();
            plus.value_mut(id).as_mut_slice()[idx] += H;
            let mut minus = store.clone();
            minus.value_mut(id).as_mut_slice()[idx] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let an = grads[store.ids().position(|x| x == id).unwrap()].as_slice()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(rel < TOL, "{what}: {} [{idx}] analytic {an} vs numeric {fd} (rel {rel})", store.entry(id).name);
            checked += 1;
        }
    }
    assert!(checked > 0, "{what}: nothing to check");
}

fn random_times(rng: &mut impl Rng, n: usize, horizon: f64) -> Vec<f64> {
    let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..horizon)).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

pub fn clstm_step_and_decay() {
    for draw in 0..DRAWS {
        let mut rng = RngStream::new(draw, 1);
        let mut store = ParamStore::new();
        let cell = Clstm::new(&mut store, "c", 3, ParamRole::Encoder, &mut rng);
        jitter(&mut store, &mut rng, 0.3);
        let a = random_times(&mut rng, 4, 5.0);
        let b = random_times(&mut rng, 2, 5.0);
        check(&store, "clstm", &|tape, p| {
            let run = cell.run_batch(tape, p, &[&a, &b]).unwrap();
            let out = run.stack_outputs(tape).unwrap();
            let finals = run.final_states(tape).unwrap();
            let h = clstm_hidden_rows(tape, &finals, &[6.0, 5.5]).unwrap();
            let x = project(tape, out, draw);
            let y = project(tape, h, draw + 1);
            tape.add(x, y).unwrap()
        });
    }
}

pub fn attention_and_layer_norm() {
    for draw in 0..DRAWS {
        let mut rng = RngStream::new(draw, 2);
        let mut store = ParamStore::new();
        let x = store.add("input", random(&mut rng, 4, 5, 1.0), ParamRole::Encoder);
        let att = CausalAttention::new(&mut store, "att", 5, true, true, ParamRole::Encoder, &mut rng);
        let ln = LayerNorm::new(&mut store, "ln", 5, true, ParamRole::Encoder);
        jitter(&mut store, &mut rng, 0.2);
        check(&store, "attention", &|tape, p| {
            let out = att.forward(tape, p, p.var(x)).unwrap();
            project(tape, out, draw)
        });
        check(&store, "layer norm", &|tape, p| {
            let out = ln.forward(tape, p, p.var(x)).unwrap();
            project(tape, out, draw)
        });
    }
}

pub fn spectral_linear_and_mlp() {
    for draw in 0..DRAWS {
        let mut rng = RngStream::new(draw, 3);
        let mut store = ParamStore::new();
        let x = store.add("input", random(&mut rng, 3, 4, 1.0), ParamRole::Head);
        let sn = SpectralLinear::new(&mut store, "sn", 4, 3, ParamRole::Head, &mut rng);
        let mlp = Mlp::new(&mut store, "mlp", &[4, 5, 5, 2], ParamRole::Actor, &mut rng);
        jitter(&mut store, &mut rng, 0.2);
        check(&store, "spectral linear", &|tape, p| {
            let out = sn.forward(tape, p, p.var(x)).unwrap();
            project(tape, out, draw)
        });
        check(&store, "mlp", &|tape, p| {
            let out = mlp.forward(tape, p, p.var(x)).unwrap();
            project(tape, out, draw)
        });
    }
}

pub fn discriminator_bce() {
    for draw in 0..DRAWS {
        let mut rng = RngStream::new(draw, 4);
        let readout = if draw % 2 == 0 { Readout::LastEvent } else { Readout::Horizon };
        let mut d = Discriminator::new(DiscriminatorConfig { hidden: 3, readout, ..Default::default() }, &mut rng);
        jitter(d.store_mut(), &mut rng, 0.3);
        let real = EventSequence::new(random_times(&mut rng, 3, 10.0), 10.0).unwrap();
        let fake = EventSequence::new(random_times(&mut rng, 2, 10.0), 10.0).unwrap();
        let empty = EventSequence::empty(10.0);
        check(d.store(), "bce", &|tape, p| d.bce_loss(tape, p, &[&real], &[&fake, &empty]).unwrap());
    }
}

pub fn ppo_objective() {
    for draw in 0..DRAWS {
        let mut rng = RngStream::new(draw, 5);
        let cfg = GeneratorConfig { hidden: 3, mlp_hidden: 3, attention: draw % 2 == 0, ..Default::default() };
        let mut g = Generator::new(cfg, &mut rng);
        jitter(g.store_mut(), &mut rng, 0.3);
        let a = EventSequence::new(random_times(&mut rng, 3, 10.0), 10.0).unwrap();
        let b = EventSequence::new(random_times(&mut rng, 2, 10.0), 10.0).unwrap();
        let n = a.len() + b.len();
        let targets = PpoTargets {
            actions: (0..n).map(|_| rng.random_range(0..2)).collect(),
            old_log_probs: (0..n).map(|_| rng.random_range(-1.2..-0.3)).collect(),
            returns: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
            advantages: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let ppo = PpoConfig::default();
        check(g.store(), "ppo", &|tape, p| {
            let pass = g.forward_batch(tape, p, &[&a, &b]).unwrap().unwrap();
            ppo_loss(tape, pass.log_probs, pass.values, &targets, &ppo).unwrap().total
        });
    }
}

pub fn ppod_nll() {
    for draw in 0..DRAWS {
        let mut rng = RngStream::new(draw, 6);
        let mut m = PpodModel::new(PpodConfig { hidden: 3, mc_samples: 4, ..Default::default() }, &mut rng);
        jitter(m.store_mut(), &mut rng, 0.3);
        let a = EventSequence::new(random_times(&mut rng, 3, 10.0), 10.0).unwrap();
        let b = EventSequence::empty(10.0);
        // The same Monte Carlo points on every evaluation.
        check(m.store(), "nll", &|tape, p| m.nll(tape, p, &[&a, &b], &mut RngStream::new(draw, 60)).unwrap());
    }
}

/// Every layer check, by name.
pub const ALL: [(&str, fn()); 6] = [
    ("clstm", clstm_step_and_decay),
    ("attention + layer norm", attention_and_layer_norm),
    ("spectral linear + mlp", spectral_linear_and_mlp),
    ("discriminator bce", discriminator_bce),
    ("ppo objective", ppo_objective),
    ("ppod nll", ppod_nll),
];
