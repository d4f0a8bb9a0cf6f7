//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! Pass criterion numbers to run a subset:
//! `cargo test -p tpp-outlier --test acceptance -- 1 2 10`.

mod common;

use std::cell::OnceCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{fidelity, numerics, props};
use tpp_outlier::evalkit::{ablation_run, baseline_report, mean_stderr, run_gan, AblationKind, AblationResult, ExperimentSpec, GanRun};
use tpp_outlier::tppsim::{HawkesSpec, PoissonSpec, ProcessSpec};
use tpp_outlier::Result;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

/// Runs shared by several criteria, computed on first use.
#[derive(Default)]
struct Cache {
    poisson: OnceCell<Vec<GanRun>>,
    hawkes: OnceCell<Vec<GanRun>>,
}

fn spec(process: ProcessSpec) -> ExperimentSpec {
    ExperimentSpec { process, ..ExperimentSpec::default() }
}

fn poisson() -> ExperimentSpec {
    spec(ProcessSpec::Poisson(PoissonSpec::default()))
}

fn hawkes() -> ExperimentSpec {
    spec(ProcessSpec::Hawkes(HawkesSpec::default()))
}

fn runs(spec: &ExperimentSpec, label: &str) -> Result<Vec<GanRun>> {
    spec.seeds
        .iter()
        .map(|&seed| {
            let t0 = Instant::now();
            let run = run_gan(spec, seed)?;
            eprintln!(
                "  [{label}] seed {seed}: test AUROC {:.3}, tail training AUROC {:.3} ({:.0}s)",
                run.test_auroc,
                run.tail_train_auroc().unwrap_or(f64::NAN),
                t0.elapsed().as_secs_f64()
            );
            Ok(run)
        })
        .collect()
}

impl Cache {
    fn get<'a>(cell: &'a OnceCell<Vec<GanRun>>, spec: ExperimentSpec, label: &str) -> Result<&'a [GanRun]> {
        if cell.get().is_none() {
            let r = runs(&spec, label)?;
            let _ = cell.set(r);
        }
        Ok(cell.get().expect("just set"))
    }

    fn poisson(&self) -> Result<&[GanRun]> {
        Self::get(&self.poisson, poisson(), "poisson")
    }

    fn hawkes(&self) -> Result<&[GanRun]> {
        Self::get(&self.hawkes, hawkes(), "hawkes")
    }
}

fn test_mean(runs: &[GanRun]) -> f64 {
    mean_stderr(&runs.iter().map(|r| r.test_auroc).collect::<Vec<_>>()).0
}

fn tail_mean_over(runs: &[GanRun]) -> f64 {
    mean_stderr(&runs.iter().map(|r| r.tail_train_auroc().unwrap_or(f64::NAN)).collect::<Vec<_>>()).0
}

fn list(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", ")
}

/// Runs named checks that signal failure by panicking.
fn panicking_suite(checks: &[(&str, fn())], budget_secs: Option<f64>) -> Verdict {
    let t0 = Instant::now();
    let failed: Vec<&str> = checks.iter().filter(|(_, f)| catch_unwind(AssertUnwindSafe(f)).is_err()).map(|(n, _)| *n).collect();
    let secs = t0.elapsed().as_secs_f64();
    let in_time = budget_secs.is_none_or(|b| secs < b);
    let mut detail = format!("{}/{} suites pass in {secs:.1}s", checks.len() - failed.len(), checks.len());
    if !failed.is_empty() {
        detail += &format!("; failing: {}", failed.join(", "));
    }
    Verdict::new(failed.is_empty() && in_time, detail)
}

fn c1_numerics(_: &Cache) -> Result<Verdict> {
    Ok(panicking_suite(&numerics::ALL, Some(60.0)))
}

fn c2_simulators(_: &Cache) -> Result<Verdict> {
    let t0 = Instant::now();
    let p = fidelity::poisson(&PoissonSpec::default(), fidelity::RUNS, 100);
    let h = fidelity::hawkes(&HawkesSpec::default(), fidelity::RUNS, 100);
    let secs = t0.elapsed().as_secs_f64();
    let p_ok = (p.target - 10.2960).abs() < 1e-4 && (p.empirical - p.target).abs() <= 3.0 * p.stderr;
    let h_ok = (h.empirical - h.target).abs() <= 0.02 * h.target;
    Ok(Verdict::new(
        p_ok && h_ok && secs < 60.0,
        format!(
            "poisson {:.4} ± {:.4} vs {:.4}; hawkes {:.4} vs branching {:.4} ({:+.2}%); {secs:.1}s",
            p.empirical,
            p.stderr,
            p.target,
            h.empirical,
            h.target,
            100.0 * (h.empirical / h.target - 1.0)
        ),
    ))
}

fn main_result(runs: &[GanRun], spec: &ExperimentSpec, floor: f64) -> Result<Verdict> {
    let ppod = baseline_report(spec, "ppod")?;
    let gan = test_mean(runs);
    let values: Vec<f64> = runs.iter().map(|r| r.test_auroc).collect();
    Ok(Verdict::new(
        gan >= floor && gan > ppod.mean,
        format!("GAN-RL {gan:.3} [{}] vs PPOD {:.3} [{}]; need ≥ {floor} and > PPOD", list(&values), ppod.mean, list(&ppod.values)),
    ))
}

fn c3_poisson(c: &Cache) -> Result<Verdict> {
    main_result(c.poisson()?, &poisson(), 0.58)
}

fn c4_hawkes(c: &Cache) -> Result<Verdict> {
    main_result(c.hawkes()?, &hawkes(), 0.56)
}

fn c5_rnd(_: &Cache) -> Result<Verdict> {
    let p = baseline_report(&poisson(), "rnd")?;
    let h = baseline_report(&hawkes(), "rnd")?;
    let band = |m: f64| (0.45..=0.55).contains(&m);
    Ok(Verdict::new(band(p.mean) && band(h.mean), format!("poisson {:.3} [{}]; hawkes {:.3} [{}]", p.mean, list(&p.values), h.mean, list(&h.values))))
}

fn c6_beta(c: &Cache) -> Result<Verdict> {
    let at = |beta: f64| runs(&ExperimentSpec { beta, ..poisson() }, &format!("poisson β={beta}"));
    let zero = test_mean(&at(0.0)?);
    let six = test_mean(&at(0.6)?);
    let eight = test_mean(c.poisson()?);
    Ok(Verdict::new(
        (0.40..=0.60).contains(&zero) && eight - zero > 0.05 && six > 0.55,
        format!("β=0.0 {zero:.3}, β=0.6 {six:.3}, β=0.8 {eight:.3}"),
    ))
}

fn ablation(kind: AblationKind, spec: &ExperimentSpec, label: &str) -> Result<AblationResult> {
    let t0 = Instant::now();
    let r = ablation_run(kind, spec)?;
    eprintln!(
        "  [{label}] tail training AUROC [{}], test [{}] ({:.0}s)",
        list(&r.train_tail.values),
        list(&r.test.values),
        t0.elapsed().as_secs_f64()
    );
    Ok(r)
}

fn ablation_gap(c: &Cache, kind: AblationKind, min_gap: f64) -> Result<Verdict> {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, spec, full) in [("poisson", poisson(), c.poisson()?), ("hawkes", hawkes(), c.hawkes()?)] {
        let full = tail_mean_over(full);
        let ablated = ablation(kind, &spec, &format!("{name} {kind:?}"))?.train_tail.mean;
        let gap = full - ablated;
        pass &= if min_gap > 0.0 { gap >= min_gap } else { gap > 0.0 };
        parts.push(format!("{name} full {full:.3} vs ablated {ablated:.3} (gap {gap:+.3})"));
    }
    Ok(Verdict::new(pass, parts.join("; ")))
}

fn c7_attention(c: &Cache) -> Result<Verdict> {
    ablation_gap(c, AblationKind::NoAttention, 0.03)
}

fn c8_wasserstein(c: &Cache) -> Result<Verdict> {
    ablation_gap(c, AblationKind::WdReward, 0.0)
}

fn c9_equilibrium(c: &Cache) -> Result<Verdict> {
    let runs = c.poisson()?;
    let (real, fake): (Vec<f64>, Vec<f64>) = runs.iter().map(|r| r.tail_disc_scores()).unzip();
    let (r, f) = (mean_stderr(&real).0, mean_stderr(&fake).0);
    let band = |x: f64| (0.35..=0.65).contains(&x);
    Ok(Verdict::new(band(r) && band(f), format!("D(real) {r:.3} [{}], D(generated) {f:.3} [{}]", list(&real), list(&fake))))
}

fn c10_properties(_: &Cache) -> Result<Verdict> {
    Ok(panicking_suite(&props::ALL, None))
}

type Criterion = (u32, &'static str, fn(&Cache) -> Result<Verdict>);

const CRITERIA: [Criterion; 10] = [
    (1, "gradient checks", c1_numerics),
    (2, "simulator fidelity", c2_simulators),
    (5, "random baseline", c5_rnd),
    (10, "property suites", c10_properties),
    (3, "Poisson main result", c3_poisson),
    (9, "discriminator equilibrium", c9_equilibrium),
    (4, "Hawkes main result", c4_hawkes),
    (6, "clean-fraction sensitivity", c6_beta),
    (7, "attention ablation", c7_attention),
    (8, "Wasserstein-reward ablation", c8_wasserstein),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let cache = Cache::default();
    let mut lines = Vec::new();
    for (id, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        eprintln!("criterion {id} ({name}) ...");
        let t0 = Instant::now();
        let verdict = match catch_unwind(AssertUnwindSafe(|| run(&cache))) {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => Verdict::new(false, format!("error: {e}")),
            Err(_) => Verdict::new(false, "panicked"),
        };
        let line = format!("criterion {id:>2} {} {name}: {} [{:.0}s]", if verdict.pass { "PASS" } else { "FAIL" }, verdict.detail, t0.elapsed().as_secs_f64());
        println!("{line}");
        lines.push((id, verdict.pass, line));
    }
    lines.sort_by_key(|l| l.0);
    println!("\nacceptance summary");
    for (_, _, line) in &lines {
        println!("{line}");
    }
    let failed = lines.iter().filter(|l| !l.1).count();
    println!("{} of {} criteria pass", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
