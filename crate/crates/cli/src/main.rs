use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use foss_core::ablation::{self, AblationConfig, AblationRow};
use foss_core::bench::{self, BenchConfig, BenchRow, ScalingRatio};
use foss_core::datagen::{by_split, generate_dataset_file, load_scenarios, split_sizes, DatasetSpec, Horizon, MotifCounts};
use foss_core::gradcheck::suite::{self, SuiteEntry};
use foss_core::helix::HelixPermutation;
use foss_core::spectral::{dft_forward, to_polar};
use foss_core::train::{evaluate, load_model, predict, save_model, train, CheckpointMeta, EpochLog, RunConfig, TrainEvent, CHECKPOINT_FORMAT_VERSION};
use foss_core::{Scenario, Split};

#[derive(Parser)]
#[command(name = "foss", version, about = "Frequency-ordered selective state-space trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario dataset as JSON lines.
    GenData(GenDataArgs),
    /// Train a model and write the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write the candidate trajectories for one scenario.
    Predict(PredictArgs),
    /// Time components across sequence lengths.
    Bench(BenchArgs),
    /// Compare tape gradients with finite differences for every module.
    Gradcheck(GradcheckArgs),
    /// Train and score the component ablations.
    Ablate(AblateArgs),
    /// Show the amplitude and phase spectrum of one observed track.
    InspectSpectrum(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    #[value(name = "argo1-like")]
    Argo1Like,
    #[value(name = "argo2-like")]
    Argo2Like,
}

impl Preset {
    fn horizon(self) -> Horizon {
        match self {
            Preset::Argo1Like => Horizon::ARGO1_LIKE,
            Preset::Argo2Like => Horizon::ARGO2_LIKE,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset spec as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSON-lines file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Scenarios per motif.
    #[arg(long)]
    per_motif: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset produced by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Epoch log CSV; defaults to the checkpoint path with `.log.csv` appended.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Candidates scored by the validation monitor.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// CSV report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Scenario id.
    #[arg(long)]
    id: String,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Bench config as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Repetitions per measurement.
    #[arg(long)]
    reps: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Random points per check.
    #[arg(long, default_value_t = 10)]
    points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Ablation config as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    id: String,
    /// List coefficients in helix order instead of natural frequency order.
    #[arg(long)]
    helix: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match run(Cli::parse().command) {
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => Ok(()),
        other => other,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::InspectSpectrum(a) => inspect_spectrum(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

/// CSV goes to `out` or stdout; the JSON line goes to stdout unless the CSV
/// already did, in which case it goes to stderr.
struct Output {
    table: Box<dyn Write>,
    to_stdout: bool,
}

impl Output {
    fn open(out: Option<&Path>, header: &str) -> Result<Self> {
        let table: Box<dyn Write> = match out {
            Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
            None => Box::new(io::stdout().lock()),
        };
        let mut o = Self {
            table,
            to_stdout: out.is_none(),
        };
        o.row(header)?;
        Ok(o)
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.table, "{line}")?;
        Ok(())
    }

    fn finish(mut self, summary: serde_json::Value) -> Result<()> {
        self.table.flush()?;
        drop(self.table);
        if self.to_stdout {
            eprintln!("{summary}");
        } else {
            println!("{summary}");
        }
        Ok(())
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec: DatasetSpec = read_json(a.config.as_deref())?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(p) = a.preset {
        spec.horizon = p.horizon();
    }
    if let Some(n) = a.per_motif {
        spec.counts = MotifCounts::uniform(n);
    }
    let data = generate_dataset_file(&spec, &a.out)?;
    let (train, val, test) = split_sizes(data.len());
    println!(
        "{}",
        json!({
            "path": a.out,
            "records": data.len(),
            "train": train,
            "val": val,
            "test": test,
            "seed": spec.seed,
            "t_obs": spec.horizon.t_obs,
            "t_fut": spec.horizon.t_fut,
        })
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg: RunConfig = read_json(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(k) = a.k {
        cfg.eval_k = Some(k);
    }
    if let Some(p) = a.preset {
        let h = p.horizon();
        cfg.model.t_obs = h.t_obs;
        cfg.model.t_fut = h.t_fut;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.lr = lr;
    }
    if a.data.is_some() {
        cfg.data = a.data;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    cfg.validate()?;
    let data_path = cfg.data.clone().context("no dataset: pass --data or set \"data\" in the config")?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("foss.ckpt"));
    let log_path = a.log.unwrap_or_else(|| {
        let mut s = out.clone().into_os_string();
        s.push(".log.csv");
        PathBuf::from(s)
    });
    let data = load_scenarios(&data_path)?;
    let train_set = by_split(&data, Split::Train);
    let val = by_split(&data, Split::Val);
    if train_set.is_empty() {
        bail!("{} has no training scenarios", data_path.display());
    }
    let mut log = Output::open(Some(&log_path), EpochLog::CSV_HEADER)?;
    let mut saved = 0usize;
    let outcome = train(&cfg, &train_set, &val, |event| {
        match event {
            TrainEvent::Epoch(l) => {
                log.row(&l.csv_row()).map_err(|e| foss_core::Error::Io(io::Error::other(e)))?;
                eprintln!("epoch {} l_total {:.6} val_minade {:.4} lr {:e}", l.epoch, l.l_total, l.val_minade, l.lr);
            }
            TrainEvent::Improved { epoch, metric, store } => {
                let meta = CheckpointMeta {
                    format_version: CHECKPOINT_FORMAT_VERSION,
                    config: cfg.clone(),
                    epoch,
                    best_metric: metric,
                };
                save_model(&out, store, &meta)?;
                saved += 1;
            }
        }
        Ok(())
    })?;
    log.table.flush()?;
    println!(
        "{}",
        json!({
            "checkpoint": out,
            "log": log_path,
            "epochs": outcome.log.len(),
            "best_epoch": outcome.best_epoch,
            "best_metric": outcome.best_metric,
            "monitor": if val.is_empty() { "train_loss" } else { "val_minade" },
            "checkpoints_written": saved,
            "initial_l_total": outcome.initial.l_total,
            "final_l_total": outcome.log.last().map(|l| l.l_total),
        })
    );
    Ok(())
}

fn select(data: &[Scenario], split: SplitArg) -> Vec<Scenario> {
    match split {
        SplitArg::Train => by_split(data, Split::Train),
        SplitArg::Val => by_split(data, Split::Val),
        SplitArg::Test => by_split(data, Split::Test),
        SplitArg::All => data.to_vec(),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, store, meta) = load_model(&a.checkpoint)?;
    let data = select(&load_scenarios(&a.data)?, a.split);
    let k = a.k.unwrap_or(model.cfg.k);
    let report = evaluate(&model, &store, &data, k)?;
    let mut out = Output::open(a.out.as_deref(), foss_core::EvalReport::CSV_HEADER)?;
    out.row(&report.csv_row())?;
    let mut summary = serde_json::to_value(report)?;
    summary["checkpoint_epoch"] = json!(meta.epoch);
    out.finish(summary)
}

fn find<'a>(data: &'a [Scenario], id: &str) -> Result<&'a Scenario> {
    data.iter().find(|s| s.id == id).with_context(|| format!("no scenario with id {id}"))
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let (model, store, _) = load_model(&a.checkpoint)?;
    let data = load_scenarios(&a.data)?;
    let sc = find(&data, &a.id)?;
    let all = predict(&model, &store, sc)?;
    let cands = all.top_k(a.k.unwrap_or(all.k()))?;
    let mut out = Output::open(a.out.as_deref(), "t,k,x,y,p_k")?;
    for k in 0..cands.k() {
        for t in 0..cands.horizon() {
            let p = cands.point(k, t);
            out.row(&format!("{t},{k},{},{},{}", p[0], p[1], cands.probabilities[k]))?;
        }
    }
    out.finish(json!({
        "id": sc.id,
        "K": cands.k(),
        "t_fut": cands.horizon(),
        "probabilities": cands.probabilities,
    }))
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut cfg: BenchConfig = read_json(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.reps {
        cfg.reps = r;
    }
    let mut out = Output::open(a.out.as_deref(), BenchRow::CSV_HEADER)?;
    let mut failed = None;
    let rows = bench::run(&cfg, |r| {
        if let Err(e) = out.row(&r.csv_row()) {
            failed.get_or_insert(e);
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    let ratios: Vec<ScalingRatio> = bench::scaling_ratios(&rows);
    out.finish(json!({ "rows": rows.len(), "ratios": ratios }))
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let entries = suite::run(a.points, a.seed.unwrap_or(0))?;
    let mut out = Output::open(a.out.as_deref(), SuiteEntry::CSV_HEADER)?;
    for e in &entries {
        out.row(&e.csv_row())?;
    }
    let failed: Vec<&str> = entries.iter().filter(|e| !e.pass()).map(|e| e.name.as_str()).collect();
    let worst = |tol: f64| {
        entries
            .iter()
            .filter(|e| e.tolerance == tol)
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    };
    let ok = failed.is_empty();
    out.finish(json!({
        "checks": entries.len(),
        "points": a.points,
        "failed": failed,
        "max_rel_error_primitive": worst(suite::PRIMITIVE_TOLERANCE),
        "max_rel_error_module": worst(suite::MODULE_TOLERANCE),
        "pass": ok,
    }))?;
    if !ok {
        bail!("gradient check failed");
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut cfg: AblationConfig = read_json(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.run.seed = s;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(e) = a.epochs {
        cfg.run.epochs = e;
    }
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    if let Some(n) = a.n_train {
        cfg.n_train = n;
    }
    if let Some(n) = a.n_test {
        cfg.n_test = n;
    }
    let mut out = Output::open(a.out.as_deref(), AblationRow::CSV_HEADER)?;
    let mut failed = None;
    let rows = ablation::run(&cfg, |r| {
        eprintln!("{} seed {} minade_{} {:.4}", r.variant.name(), r.seed, r.report.k, r.report.minade_k);
        if let Err(e) = out.row(&r.csv_row()) {
            failed.get_or_insert(e);
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    let summary = ablation::summarize(&rows);
    out.finish(json!({
        "K": cfg.k,
        "seeds": cfg.seeds,
        "summary": summary,
        "full_is_best": ablation::full_is_best(&summary),
    }))
}

fn inspect_spectrum(a: InspectArgs) -> Result<()> {
    let data = load_scenarios(&a.data)?;
    let sc = find(&data, &a.id)?;
    let local = foss_core::frame::Frame::from_observed(&sc.observed).encode(&sc.observed);
    let polar = to_polar(&dft_forward(&local)?)?;
    let t = sc.observed.len();
    let helix = HelixPermutation::new(t)?;
    let (order, radii): (Vec<usize>, Vec<f64>) = if a.helix {
        (helix.pi().to_vec(), helix.radii().to_vec())
    } else {
        ((0..t).collect(), (0..t).map(|f| helix.radii()[helix.pi_inv()[f]]).collect())
    };
    let (amp, phase) = (polar.amplitude.data(), polar.phase.data());
    let mut out = Output::open(a.out.as_deref(), "rank,freq,radius,amp_x,amp_y,phase_x,phase_y")?;
    for (rank, (&f, r)) in order.iter().zip(&radii).enumerate() {
        out.row(&format!(
            "{rank},{f},{r},{},{},{},{}",
            amp[2 * f],
            amp[2 * f + 1],
            phase[2 * f],
            phase[2 * f + 1]
        ))?;
    }
    let dc = amp[0].hypot(amp[1]);
    out.finish(json!({
        "id": sc.id,
        "T": t,
        "order": if a.helix { "helix" } else { "natural" },
        "dc_amplitude": dc,
        "helix_grid": helix.grid_side(),
    }))
}
