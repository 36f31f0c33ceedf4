//! Experiment orchestration: wires a store, workers and a master together
//! for one or more seeds and summarizes the resulting metrics.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crate::actors::{ActorError, ExternalWorkers, InProcWorkers, Master, MasterConfig, Worker, WorkerConfig};
use crate::dataset::Dataset;
use crate::metrics::{MetricsRow, Quartiles};
use crate::store::{connect_with_retry, MemoryStore, StoreError, StoreServer, TcpStoreClient};

/// Where the store lives and how workers are run.
#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    /// In-memory store; workers score `chunks_per_tick` chunks each after
    /// every master step, on the master's thread. Fully deterministic.
    InProc { chunks_per_tick: usize },
    /// TCP store on an ephemeral local port, one thread per worker.
    Threaded,
    /// An already running store; workers are started separately.
    External(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub master: MasterConfig,
    pub workers: usize,
    pub scoring_batch: usize,
    pub backend: Backend,
    pub seeds: usize,
}

impl ExperimentConfig {
    pub fn new(master: MasterConfig) -> Self {
        let workers = master.num_workers;
        Self { master, workers, scoring_batch: 256, backend: Backend::InProc { chunks_per_tick: 1 }, seeds: 1 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Actor(#[from] ActorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("store server: {0}")]
    Io(#[from] std::io::Error),
    #[error("worker {id} failed: {message}")]
    Worker { id: u32, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
}

/// Seed used for run `k` of an experiment whose base seed is `base`.
pub fn seed_for(base: u64, k: usize) -> u64 {
    base.wrapping_add(k as u64)
}

/// Runs `cfg.seeds` independent trainings, seeds `base, base+1, ...`.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<SeedRun>, BenchError> {
    (0..cfg.seeds.max(1))
        .map(|k| {
            let seed = seed_for(cfg.master.seed, k);
            let mut master = cfg.master.clone();
            master.seed = seed;
            master.num_workers = cfg.workers;
            let rows = run_seed(cfg, master, data)?;
            Ok(SeedRun { seed, rows })
        })
        .collect()
}

fn worker_configs(cfg: &ExperimentConfig) -> Vec<WorkerConfig> {
    (0..cfg.workers)
        .map(|id| {
            let mut wc = WorkerConfig::new(id as u32, cfg.workers);
            wc.scoring_batch = cfg.scoring_batch;
            wc.poll_interval = Duration::from_millis(2);
            wc
        })
        .collect()
}

fn run_seed(cfg: &ExperimentConfig, master_cfg: MasterConfig, data: &Dataset) -> Result<Vec<MetricsRow>, BenchError> {
    let population = data.splits.train.len();
    match &cfg.backend {
        Backend::InProc { chunks_per_tick } => {
            let store = MemoryStore::new(Some(population));
            let train = Arc::new(data.train());
            let workers = worker_configs(cfg)
                .into_iter()
                .map(|wc| Worker::new(wc, store.clone(), train.clone()))
                .collect::<Result<_, _>>()?;
            let mut driver = InProcWorkers { workers, chunks_per_tick: *chunks_per_tick };
            let mut master = Master::new(master_cfg, Some(store), data)?;
            Ok(master.run(&mut driver)?)
        }
        Backend::Threaded => {
            let server = StoreServer::bind("127.0.0.1:0", MemoryStore::new(Some(population)))?.spawn()?;
            let addr = server.addr().to_string();
            let rows = run_with_threads(cfg, master_cfg, data, &addr);
            server.shutdown();
            rows
        }
        Backend::External(addr) => {
            let store = connect_with_retry(addr, 8, Duration::from_millis(100))?;
            let mut master = Master::new(master_cfg, Some(store), data)?;
            Ok(master.run(&mut ExternalWorkers { poll: Duration::from_millis(2) })?)
        }
    }
}

fn run_with_threads(
    cfg: &ExperimentConfig,
    master_cfg: MasterConfig,
    data: &Dataset,
    addr: &str,
) -> Result<Vec<MetricsRow>, BenchError> {
    let stop = Arc::new(AtomicBool::new(false));
    let train = Arc::new(data.train());
    let mut handles = Vec::new();
    if master_cfg.mode != crate::actors::Mode::Sgd {
        for wc in worker_configs(cfg) {
            let id = wc.worker_id;
            let client = TcpStoreClient::connect(addr)?;
            let mut worker = Worker::new(wc, client, train.clone())?;
            let stop = stop.clone();
            handles.push((id, thread::spawn(move || worker.run(&stop))));
        }
    }
    let outcome = TcpStoreClient::connect(addr)
        .map_err(BenchError::from)
        .and_then(|client| Ok(Master::new(master_cfg, Some(client), data)?))
        .and_then(|mut master| Ok(master.run(&mut ExternalWorkers { poll: Duration::from_millis(2) })?));
    stop.store(true, Ordering::Relaxed);
    for (id, h) in handles {
        match h.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => return Err(BenchError::Worker { id, message: e.to_string() }),
            Err(_) => return Err(BenchError::Worker { id, message: "panicked".into() }),
        }
    }
    outcome
}

/// First logged step whose training loss is at or below `threshold`.
pub fn updates_to_loss(rows: &[MetricsRow], threshold: f64) -> Option<u64> {
    rows.iter().find(|r| r.train_loss <= threshold).map(|r| r.step)
}

/// Spread of final-row quantities across seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub seeds: usize,
    pub final_train_loss: Quartiles,
    pub final_test_err: Option<Quartiles>,
}

impl Summary {
    /// `None` when no run logged a row.
    pub fn of(runs: &[SeedRun]) -> Option<Self> {
        let finals: Vec<&MetricsRow> = runs.iter().filter_map(|r| r.rows.last()).collect();
        if finals.is_empty() {
            return None;
        }
        let losses: Vec<f64> = finals.iter().map(|r| r.train_loss).collect();
        let errs: Vec<f64> = finals.iter().filter_map(|r| r.test_err).collect();
        Some(Self {
            seeds: runs.len(),
            final_train_loss: Quartiles::of(&losses),
            final_test_err: (!errs.is_empty()).then(|| Quartiles::of(&errs)),
        })
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let q = &self.final_train_loss;
        write!(
            f,
            "seeds={} final_train_loss median={:.6} q1={:.6} q3={:.6}",
            self.seeds, q.median, q.q1, q.q3
        )?;
        if let Some(q) = &self.final_test_err {
            write!(f, " final_test_err median={:.6} q1={:.6} q3={:.6}", q.median, q.q1, q.q3)?;
        }
        Ok(())
    }
}

/// `out.csv` → `out.seed7.csv`.
pub fn per_seed_path(path: &Path, seed: u64) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}.seed{seed}"),
    };
    path.with_file_name(name)
}
