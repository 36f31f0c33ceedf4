use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use issgd::actors::{ActorError, MasterConfig, Mode, Staleness, Worker, WorkerConfig};
use issgd::bench::{per_seed_path, run_experiment, Backend, ExperimentConfig, Summary};
use issgd::dataset::{load_dataset, save_dataset, synth_dataset, SynthSpec};
use issgd::metrics::write_csv_file;
use issgd::store::{connect_with_retry, MemoryStore, StoreError, StoreServer};

#[derive(Parser)]
#[command(name = "issgd", version, about = "Distributed importance-sampling SGD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-cluster dataset.
    Gen(GenArgs),
    /// Run a weight store server.
    Store(StoreArgs),
    /// Run a worker that keeps the gradient-norm weights fresh.
    Worker(WorkerArgs),
    /// Train a model and write a metrics CSV.
    Train(TrainArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    dims: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Fraction of examples placed near a decision boundary.
    #[arg(long, default_value_t = 0.2)]
    tail: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StoreArgs {
    /// 0 picks a free port; the bound address is printed on stdout.
    #[arg(long, default_value_t = 7070)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

#[derive(Args)]
struct WorkerArgs {
    /// Store address, host:port.
    #[arg(long)]
    store: String,
    #[arg(long, default_value_t = 0)]
    id: u32,
    /// Total number of workers; this one scores indices congruent to `id`.
    #[arg(long, default_value_t = 1)]
    of: usize,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 256)]
    scoring_batch: usize,
    #[arg(long, default_value_t = 20)]
    poll_ms: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "issgd")]
    mode: Mode,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 1000)]
    updates: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    smoothing: f64,
    /// Sample only from weights written in the last SECONDS.
    #[arg(long, value_name = "SECONDS", conflicts_with = "staleness_version")]
    staleness_sec: Option<f64>,
    /// Sample only from weights computed from the latest pushed parameters.
    #[arg(long)]
    staleness_version: bool,
    #[arg(long, default_value_t = 2)]
    workers: usize,
    /// Use a running store; workers must be started separately.
    #[arg(long, conflicts_with = "inproc")]
    store: Option<String>,
    /// Run store and workers on the master's thread, deterministically.
    #[arg(long)]
    inproc: bool,
    /// Chunks each in-process worker scores per master step.
    #[arg(long, default_value_t = 1)]
    chunks_per_tick: usize,
    #[arg(long, default_value_t = 256)]
    scoring_batch: usize,
    #[arg(long, default_value_t = 20)]
    param_push_every: usize,
    #[arg(long, default_value_t = 50)]
    metrics_every: usize,
    #[arg(long, default_value_t = 2048)]
    audit_size: usize,
    #[arg(long, default_value_t = 0.95)]
    bootstrap_coverage: f64,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 60.0)]
    barrier_timeout_sec: f64,
    /// Stop a run once a logged training loss is at or below this.
    #[arg(long)]
    stop_at_loss: Option<f64>,
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    seeds: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ISSGD_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Store(a) => store(a),
        Command::Worker(a) => worker(a),
        Command::Train(a) => train(a),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let spec = SynthSpec { n: a.n, dims: a.dims, classes: a.classes, difficulty_tail: a.tail, seed: a.seed };
    let ds = synth_dataset(&spec)?;
    save_dataset(&ds, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    info!("wrote {} examples to {}", ds.len(), a.out.display());
    Ok(())
}

fn store(a: StoreArgs) -> Result<()> {
    let addr = format!("{}:{}", a.host, a.port);
    let server = StoreServer::bind(&addr, MemoryStore::new(None)).with_context(|| format!("binding {addr}"))?;
    let mut out = std::io::stdout();
    writeln!(out, "listening on {}", server.local_addr()?)?;
    out.flush()?;
    server.serve()?;
    Ok(())
}

fn worker(a: WorkerArgs) -> Result<()> {
    if a.of == 0 || a.id as usize >= a.of {
        bail!("worker id {} must be below --of {}", a.id, a.of);
    }
    let train = Arc::new(load_dataset(&a.dataset)?.train());
    let mut cfg = WorkerConfig::new(a.id, a.of);
    cfg.scoring_batch = a.scoring_batch;
    cfg.poll_interval = Duration::from_millis(a.poll_ms);
    let stop = AtomicBool::new(false);
    loop {
        let client = connect_with_retry(&a.store, 10, Duration::from_millis(200))?;
        let mut w = Worker::new(cfg.clone(), client, train.clone())?;
        match w.run(&stop) {
            Ok(()) => return Ok(()),
            Err(ActorError::Store(StoreError::Io(e))) => warn!("lost store connection ({e}), reconnecting"),
            Err(e) => return Err(e.into()),
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let data = load_dataset(&a.dataset)?;
    let staleness = match (a.staleness_sec, a.staleness_version) {
        (Some(s), _) => Staleness::MaxAgeSeconds(s),
        (None, true) => Staleness::CurrentVersion,
        (None, false) => Staleness::Any,
    };
    if !(a.barrier_timeout_sec > 0.0) {
        bail!("--barrier-timeout-sec must be positive");
    }
    let master = MasterConfig {
        mode: a.mode,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        smoothing: a.smoothing,
        staleness,
        param_push_every: a.param_push_every,
        total_updates: a.updates,
        seed: a.seed,
        bootstrap_min_coverage: a.bootstrap_coverage,
        metrics_every: a.metrics_every,
        audit_size: a.audit_size,
        weights_refresh_every: 1,
        num_workers: a.workers,
        barrier_timeout: Duration::from_secs_f64(a.barrier_timeout_sec),
        hidden_layers: a.hidden,
        stop_at_train_loss: a.stop_at_loss,
    };
    let backend = match (a.store, a.inproc) {
        (Some(addr), _) => Backend::External(addr),
        (None, true) => Backend::InProc { chunks_per_tick: a.chunks_per_tick },
        (None, false) => Backend::Threaded,
    };
    let cfg = ExperimentConfig { master, workers: a.workers, scoring_batch: a.scoring_batch, backend, seeds: a.seeds.max(1) };
    let runs = run_experiment(&cfg, &data)?;
    if runs.len() == 1 {
        write_csv_file(&a.metrics, &runs[0].rows)?;
        return Ok(());
    }
    for run in &runs {
        write_csv_file(&per_seed_path(&a.metrics, run.seed), &run.rows)?;
    }
    match Summary::of(&runs) {
        Some(s) => println!("{s}"),
        None => println!("seeds={} no rows logged", runs.len()),
    }
    Ok(())
}
