//! `tppod`: simulate, train, detect, evaluate, baselines, sweeps, ablations and plots.

mod manifest;
mod scores;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tpp_outlier::agent::Generator;
use tpp_outlier::baselines::{len_scores, ppod_train, rnd_scores, PpodConfig, PpodModel};
use tpp_outlier::config::RunConfig;
use tpp_outlier::evalkit::{
    ablation_run, auroc, beta_sweep, emit_plots, mean_stderr, sensitivity_sweep, AblationKind,
    ExperimentSpec, GanRun, Pooling, SweepParam,
};
use tpp_outlier::neural::checkpoint;
use tpp_outlier::seqdata::{read_dataset, write_dataset, Dataset, RngStream};
use tpp_outlier::tppsim::{build_dataset, HawkesSpec, OutlierSpec, PoissonSpec, ProcessSpec};
use tpp_outlier::train::{write_metrics, EpisodeMetrics, Trainer};
use tpp_outlier::{Error, Result};

use manifest::{sidecar, ManifestBuilder, RUN_MANIFEST};
use scores::{read_scores, write_scores};

#[derive(Parser)]
#[command(name = "tppod", version, about = "Unsupervised event outlier detection for temporal point processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Process {
    Poisson,
    Hawkes,
}

impl Process {
    fn spec(self, horizon: f64) -> ProcessSpec {
        match self {
            Process::Poisson => ProcessSpec::Poisson(PoissonSpec { horizon, ..Default::default() }),
            Process::Hawkes => ProcessSpec::Hawkes(HawkesSpec { horizon, ..Default::default() }),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Rnd,
    Len,
    Ppod,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum PoolingArg {
    Events,
    PerSequence,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Events => Pooling::Events,
            PoolingArg::PerSequence => Pooling::PerSequence,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum SweepArg {
    Beta,
    UpdateFreq,
    DiscLr,
    GenLr,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AblationArg {
    NoAttention,
    WdReward,
    FrozenEncoder,
}

/// Overrides shared by the experiment commands (`sweep`, `ablate`).
#[derive(clap::Args, Debug)]
struct ExperimentArgs {
    /// TOML experiment file (process, outliers, sizes, seeds, [train] ...).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    process: Option<Process>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    update_frequency: Option<usize>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a labelled dataset with injected outliers.
    Simulate {
        #[arg(long, value_enum, default_value = "poisson")]
        process: Process,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0.8)]
        beta: f64,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 100)]
        seed: u64,
        #[arg(long, default_value_t = 10.0)]
        horizon: f64,
    },
    /// Train the generator and discriminator.
    Train {
        /// TOML run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Dataset file, overriding the configuration.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        update_frequency: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Score every event of a dataset with a generator or PPOD checkpoint.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Omit the ground-truth label column.
        #[arg(long)]
        no_labels: bool,
    },
    /// AUROC of one or more labelled score files (one per seed).
    Evaluate {
        #[arg(long, required = true, num_args = 1..)]
        scores: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "events")]
        pooling: PoolingArg,
        /// Also write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a dataset with a baseline detector.
    Baseline {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training data for PPOD (defaults to `--data`).
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        /// Save the fitted PPOD model here.
        #[arg(long)]
        save_model: Option<PathBuf>,
        #[arg(long)]
        no_labels: bool,
    },
    /// Train one cell per value and seed; writes per-cell metrics and a summary.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepArg,
        #[arg(long, required = true, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Train an ablated variant and report test and late-training AUROC.
    Ablate {
        #[arg(long, value_enum)]
        kind: AblationArg,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Render mean ± standard-error curves from every metrics.csv under a directory.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "auroc,d_real,d_fake")]
        metrics: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::Config(_) | Error::Parse { .. } => 2,
        _ => 3,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { process, out, n, beta, alpha, seed, horizon } => simulate(process, &out, n, beta, alpha, seed, horizon),
        Command::Train { config, out_dir, data, episodes, seed, update_frequency, checkpoint_every } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(d) = data {
                cfg.data.path = Some(d);
            } else if let (Some(p), Some(c)) = (cfg.data.path.clone(), &config) {
                if p.is_relative() {
                    cfg.data.path = Some(c.parent().unwrap_or(Path::new(".")).join(p));
                }
            }
            set(&mut cfg.train.episodes, episodes);
            set(&mut cfg.train.seed, seed);
            set(&mut cfg.train.update_frequency, update_frequency);
            set(&mut cfg.train.checkpoint_every, checkpoint_every);
            cfg.validate()?;
            train(cfg, &out_dir)
        }
        Command::Detect { model, data, out, no_labels } => detect(&model, &data, &out, !no_labels),
        Command::Evaluate { scores, pooling, out } => evaluate(&scores, pooling.into(), out.as_deref()),
        Command::Baseline { method, data, out, train, seed, epochs, save_model, no_labels } => {
            baseline(method, &data, &out, train.as_deref(), seed, epochs, save_model.as_deref(), !no_labels)
        }
        Command::Sweep { param, values, out_dir, exp } => sweep(param, &values, &out_dir, experiment(&exp)?),
        Command::Ablate { kind, out_dir, exp } => ablate(kind, &out_dir, experiment(&exp)?),
        Command::Plot { input, out, metrics } => plot(&input, &out, &metrics),
    }
}

fn value_name(v: impl ValueEnum) -> String {
    v.to_possible_value().expect("no skipped variants").get_name().to_string()
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn simulate(process: Process, out: &Path, n: usize, beta: f64, alpha: f64, seed: u64, horizon: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Validation(format!("beta must lie in [0, 1], got {beta}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Validation(format!("outlier rate must be > 0, got {alpha}")));
    }
    let spec = process.spec(horizon);
    let outliers = OutlierSpec { alpha };
    let m = ManifestBuilder::start("simulate").seed(seed).config(&serde_json::json!({
        "process": spec, "outliers": outliers, "n": n, "beta": beta, "seed": seed,
    }));
    let ds = build_dataset(&spec, &outliers, n, beta, &mut RngStream::new(seed, 0))?;
    write_dataset(&ds, out)?;
    m.finish(&sidecar(out), &[out.to_path_buf()])?;
    println!("wrote {} sequences ({} events, {} clean) to {}", ds.len(), ds.event_count(), ds.clean_count(), out.display());
    Ok(())
}

fn train(cfg: RunConfig, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    let data = cfg.dataset(None)?;
    let m = ManifestBuilder::start("train").seed(cfg.train.seed).config(&cfg);
    write_file(&out_dir.join("config.toml"), &cfg.to_toml())?;
    let ckpt_dir = out_dir.join("checkpoints");
    let every = cfg.train.checkpoint_every;
    let total = cfg.train.episodes;
    let mut trainer = Trainer::new(cfg.train.clone(), &data)?;
    let log = trainer.run(|t, row| {
        let done = row.episode + 1;
        if every > 0 && done % every == 0 && done < total {
            let dir = ckpt_dir.join(format!("episode-{done:06}"));
            t.generator().save(&dir.join("generator"))?;
            t.discriminator().save(&dir.join("discriminator"))?;
        }
        if done % 500 == 0 || done == total {
            eprintln!("episode {done}/{total} phase {} auroc {}", row.phase.as_str(), fmt_opt(row.auroc));
        }
        Ok(())
    })?;
    let (gen, disc) = trainer.into_models();
    let final_dir = ckpt_dir.join("final");
    gen.save(&final_dir.join("generator"))?;
    disc.save(&final_dir.join("discriminator"))?;
    let metrics = out_dir.join("metrics.csv");
    write_metrics_file(&metrics, &log)?;
    m.finish(
        &out_dir.join(RUN_MANIFEST),
        &[out_dir.join("config.toml"), metrics.clone(), ckpt_dir],
    )?;
    println!("trained {} episodes; metrics in {}", log.len(), metrics.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

fn write_metrics_file(path: &Path, log: &[EpisodeMetrics]) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics(&mut buf, log).map_err(|e| Error::Io { path: path.into(), source: e })?;
    std::fs::write(path, buf).map_err(|e| Error::Io { path: path.into(), source: e })
}

enum Model {
    Gen(Generator),
    Ppod(PpodModel),
}

/// Accepts a checkpoint directory, or a training output directory whose
/// final generator is used.
fn load_model(path: &Path) -> Result<Model> {
    let dir = if path.join(checkpoint::MANIFEST_FILE).is_file() {
        path.to_path_buf()
    } else {
        let candidate = path.join("checkpoints").join("final").join("generator");
        if candidate.is_dir() {
            candidate
        } else {
            path.join("generator")
        }
    };
    let manifest = checkpoint::read_manifest(&dir)?;
    match manifest.kind.as_str() {
        "generator" => Ok(Model::Gen(Generator::load(&dir)?)),
        "ppod" => Ok(Model::Ppod(PpodModel::load(&dir)?)),
        other => Err(Error::Validation(format!("{}: a {other} checkpoint cannot score events", dir.display()))),
    }
}

fn detect(model: &Path, data_path: &Path, out: &Path, with_labels: bool) -> Result<()> {
    let m = ManifestBuilder::start("detect").config(&serde_json::json!({
        "model": model, "data": data_path, "labels": with_labels,
    }));
    let model = load_model(model)?;
    let data = read_dataset(data_path)?;
    let scores: Vec<Vec<f64>> = data
        .sequences
        .iter()
        .map(|ls| match &model {
            Model::Gen(g) => g.outlier_scores(ls.seq()),
            Model::Ppod(p) => p.scores(ls.seq()),
        })
        .collect::<Result<_>>()?;
    write_scores(out, &data, &scores, with_labels)?;
    m.finish(&sidecar(out), &[out.to_path_buf()])?;
    println!("scored {} events in {} sequences", data.event_count(), data.len());
    Ok(())
}

fn evaluate(files: &[PathBuf], pooling: Pooling, out: Option<&Path>) -> Result<()> {
    let mut values = Vec::with_capacity(files.len());
    for f in files {
        let table = read_scores(f)?;
        let labels = table
            .labels
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("{}: no label column to evaluate against", f.display())))?;
        let v = match pooling {
            Pooling::Events => {
                let (s, l) = table.flat();
                auroc(&s, &l.expect("labels present"))
            }
            Pooling::PerSequence => {
                let per: Vec<f64> = table.scores.iter().zip(labels).filter_map(|(s, l)| auroc(s, l)).collect();
                (!per.is_empty()).then(|| mean_stderr(&per).0)
            }
        }
        .ok_or_else(|| Error::Validation(format!("{}: needs both outlier and clean events", f.display())))?;
        println!("{}: AUROC {v:.4}", f.display());
        values.push(v);
    }
    let (mean, se) = mean_stderr(&values);
    println!("mean AUROC {mean:.4} ± {se:.4} over {} file(s)", values.len());
    if let Some(out) = out {
        let mut csv = String::from("file,auroc\n");
        for (f, v) in files.iter().zip(&values) {
            let _ = writeln!(csv, "{},{v:.12}", f.display());
        }
        let _ = writeln!(csv, "mean,{mean:.12}\nstderr,{se:.12}");
        write_file(out, &csv)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn baseline(
    method: Method,
    data_path: &Path,
    out: &Path,
    train_path: Option<&Path>,
    seed: u64,
    epochs: Option<usize>,
    save_model: Option<&Path>,
    with_labels: bool,
) -> Result<()> {
    let mut ppod_cfg = PpodConfig::default();
    set(&mut ppod_cfg.epochs, epochs);
    let m = ManifestBuilder::start("baseline").seed(seed).config(&serde_json::json!({
        "method": value_name(method), "data": data_path, "train": train_path, "ppod": ppod_cfg,
    }));
    let data = read_dataset(data_path)?;
    let mut artifacts = vec![out.to_path_buf()];
    let scores: Vec<Vec<f64>> = match method {
        Method::Rnd => {
            let mut rng = RngStream::new(seed, 7);
            data.sequences.iter().map(|ls| rnd_scores(ls.seq(), &mut rng)).collect()
        }
        Method::Len => data.sequences.iter().map(|ls| len_scores(ls.seq())).collect(),
        Method::Ppod => {
            ppod_cfg.validate()?;
            let train_data: Dataset = match train_path {
                Some(p) => read_dataset(p)?,
                None => data.clone(),
            };
            let (model, history) = ppod_train(&train_data, &ppod_cfg, &mut RngStream::new(seed, 6))?;
            if let Some(last) = history.last() {
                eprintln!("ppod: final epoch NLL {last:.4}");
            }
            if let Some(dir) = save_model {
                model.save(dir)?;
                artifacts.push(dir.to_path_buf());
            }
            data.sequences.iter().map(|ls| model.scores(ls.seq())).collect::<Result<_>>()?
        }
    };
    write_scores(out, &data, &scores, with_labels)?;
    m.finish(&sidecar(out), &artifacts)?;
    println!("wrote {} scores to {}", data.event_count(), out.display());
    Ok(())
}

fn experiment(args: &ExperimentArgs) -> Result<ExperimentSpec> {
    let mut spec = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            toml::from_str::<ExperimentSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentSpec::default(),
    };
    if let Some(p) = args.process {
        spec.process = p.spec(spec.process.horizon());
    }
    set(&mut spec.train.episodes, args.episodes);
    set(&mut spec.train.update_frequency, args.update_frequency);
    set(&mut spec.seeds, args.seeds.clone());
    set(&mut spec.train_size, args.train_size);
    set(&mut spec.test_size, args.test_size);
    if spec.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    spec.process.validate()?;
    spec.train.validate()?;
    Ok(spec)
}

/// Writes each run's metrics under `dir/seed-<s>/metrics.csv`; returns the paths.
fn write_runs(dir: &Path, runs: &[GanRun]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for r in runs {
        let d = dir.join(format!("seed-{}", r.seed));
        create_dir(&d)?;
        let p = d.join("metrics.csv");
        write_metrics_file(&p, &r.metrics)?;
        paths.push(p);
    }
    Ok(paths)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &serde_json::to_string_pretty(value).expect("serialisable"))
}

fn sweep(param: SweepArg, values: &[f64], out_dir: &Path, spec: ExperimentSpec) -> Result<()> {
    create_dir(out_dir)?;
    let name = value_name(param);
    let m = ManifestBuilder::start("sweep").config(&serde_json::json!({ "param": name, "values": values, "experiment": spec }));
    let cells = match param {
        SweepArg::Beta => beta_sweep(&spec, values)?,
        SweepArg::UpdateFreq => sensitivity_sweep(SweepParam::UpdateFrequency, values, &spec)?,
        SweepArg::DiscLr => sensitivity_sweep(SweepParam::DiscLr, values, &spec)?,
        SweepArg::GenLr => sensitivity_sweep(SweepParam::GenLr, values, &spec)?,
    };
    let mut summary = String::from("value,mean_auroc,stderr,n_seeds\n");
    let mut artifacts = Vec::new();
    for (v, report, runs) in &cells {
        let cell = out_dir.join(format!("{name}={v}"));
        create_dir(&cell)?;
        artifacts.extend(write_runs(&cell, runs)?);
        let rp = cell.join("report.json");
        write_json(&rp, report)?;
        artifacts.push(rp);
        let _ = writeln!(summary, "{v},{:.12},{:.12},{}", report.mean, report.stderr, report.values.len());
        println!("{name}={v}: {}", report.summary());
    }
    let sp = out_dir.join("summary.csv");
    write_file(&sp, &summary)?;
    artifacts.push(sp);
    m.finish(&out_dir.join(RUN_MANIFEST), &artifacts)?;
    Ok(())
}

fn ablate(kind: AblationArg, out_dir: &Path, spec: ExperimentSpec) -> Result<()> {
    create_dir(out_dir)?;
    let kind = match kind {
        AblationArg::NoAttention => AblationKind::NoAttention,
        AblationArg::WdReward => AblationKind::WdReward,
        AblationArg::FrozenEncoder => AblationKind::FrozenEncoder,
    };
    let m = ManifestBuilder::start("ablate").config(&serde_json::json!({ "kind": kind, "experiment": spec }));
    let res = ablation_run(kind, &spec)?;
    let mut artifacts = write_runs(out_dir, &res.runs)?;
    let rp = out_dir.join("report.json");
    write_json(&rp, &serde_json::json!({ "test": res.test, "train_tail": res.train_tail }))?;
    artifacts.push(rp);
    m.finish(&out_dir.join(RUN_MANIFEST), &artifacts)?;
    println!("test AUROC {}", res.test.summary());
    println!("last-10% training AUROC {}", res.train_tail.summary());
    Ok(())
}

fn find_metrics(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io { path: dir.into(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_metrics(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.csv") {
            out.push(p);
        }
    }
    Ok(())
}

fn plot(input: &Path, out: &Path, metrics: &[String]) -> Result<()> {
    let mut files = Vec::new();
    if input.is_file() {
        files.push(input.to_path_buf());
    } else {
        find_metrics(input, &mut files)?;
    }
    if files.is_empty() {
        return Err(Error::Validation(format!("{}: no metrics.csv files found", input.display())));
    }
    let names: Vec<&str> = metrics.iter().map(String::as_str).collect();
    let m = ManifestBuilder::start("plot").config(&serde_json::json!({ "inputs": files, "metrics": names }));
    emit_plots(&files, &names, out)?;
    m.finish(&sidecar(out), &[out.to_path_buf()])?;
    println!("plotted {} run(s) to {}", files.len(), out.display());
    Ok(())
}
