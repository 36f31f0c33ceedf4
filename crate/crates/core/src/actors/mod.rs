//! The master training loop, the worker scoring loop, and the drivers that
//! interleave them.
//!
//! Master and workers only communicate through a [`WeightStore`]: the master
//! pushes parameter snapshots and reads probability weights, workers read
//! snapshots and push per-example gradient norms.

mod master;
mod worker;

use std::time::Duration;

pub use master::{audit_norms, evaluate_set, master_step, Master, StepMetrics};
pub use worker::{ChunkOutcome, Worker};

use crate::nn::NnError;
use crate::sampler::SamplerError;
use crate::store::{StoreError, WeightStore};
use crate::variance::VarianceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Uniform minibatches, no weights read.
    Sgd,
    /// Importance sampling from whatever weights the store holds.
    Issgd,
    /// Importance sampling with a barrier after every parameter push.
    IssgdExact,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Mode::Sgd),
            "issgd" => Ok(Mode::Issgd),
            "issgd-exact" | "issgd_exact" => Ok(Mode::IssgdExact),
            other => Err(format!("unknown mode {other:?} (expected sgd, issgd or issgd-exact)")),
        }
    }
}

/// Which stored weights the master is willing to sample from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Staleness {
    Any,
    /// Only weights written in the last `n` seconds of store time.
    MaxAgeSeconds(f64),
    /// Only weights computed from the most recently pushed parameters.
    CurrentVersion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MasterConfig {
    pub mode: Mode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub smoothing: f64,
    pub staleness: Staleness,
    pub param_push_every: usize,
    pub total_updates: usize,
    pub seed: u64,
    pub bootstrap_min_coverage: f64,
    /// Steps between metrics rows.
    pub metrics_every: usize,
    /// Examples used to measure fresh gradient norms for the variance report.
    pub audit_size: usize,
    /// Steps between weight fetches.
    pub weights_refresh_every: usize,
    /// Workers the exact-mode barrier waits for.
    pub num_workers: usize,
    pub barrier_timeout: Duration,
    pub hidden_layers: Vec<usize>,
    /// Stop once a metrics row reports a training loss at or below this.
    pub stop_at_train_loss: Option<f64>,
}

impl Default for MasterConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Issgd,
            learning_rate: 0.01,
            batch_size: 128,
            smoothing: 1.0,
            staleness: Staleness::Any,
            param_push_every: 20,
            total_updates: 1000,
            seed: 0,
            bootstrap_min_coverage: 0.95,
            metrics_every: 50,
            audit_size: 2048,
            weights_refresh_every: 1,
            num_workers: 1,
            barrier_timeout: Duration::from_secs(60),
            hidden_layers: vec![64, 64],
            stop_at_train_loss: None,
        }
    }
}

impl MasterConfig {
    pub fn validate(&self) -> Result<(), ActorError> {
        let bad = |m: &str| Err(ActorError::Config(m.to_owned()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.smoothing >= 0.0) || !self.smoothing.is_finite() {
            return bad("smoothing must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.bootstrap_min_coverage) {
            return bad("bootstrap coverage must lie in [0, 1]");
        }
        if self.param_push_every == 0 || self.metrics_every == 0 || self.weights_refresh_every == 0 {
            return bad("intervals must be at least 1");
        }
        if self.mode == Mode::IssgdExact && self.num_workers == 0 {
            return bad("exact mode needs at least one worker");
        }
        Ok(())
    }
}

/// Residue class of example indices a worker is responsible for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shard {
    pub offset: usize,
    pub stride: usize,
}

impl Shard {
    /// Shard `id` of `of` workers.
    pub fn of(id: usize, of: usize) -> Self {
        Self { offset: id, stride: of.max(1) }
    }

    pub fn indices(&self, population: usize) -> Vec<usize> {
        (self.offset..population).step_by(self.stride.max(1)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerConfig {
    pub worker_id: u32,
    pub scoring_batch: usize,
    pub poll_interval: Duration,
    pub shard: Shard,
}

impl WorkerConfig {
    pub fn new(worker_id: u32, num_workers: usize) -> Self {
        Self {
            worker_id,
            scoring_batch: 256,
            poll_interval: Duration::from_millis(20),
            shard: Shard::of(worker_id as usize, num_workers),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ActorError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Variance(#[from] VarianceError),
    #[error("timed out after {waited:?} waiting for workers to score version {version}")]
    BarrierTimeout { version: u64, waited: Duration },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Gives workers a chance to make progress between master steps and while
/// the master waits on a barrier.
pub trait WorkerDriver {
    /// Called after every relaxed-mode update.
    fn tick(&mut self) -> Result<(), ActorError>;

    /// Called between polls of the exact-mode barrier.
    fn wait(&mut self) -> Result<(), ActorError> {
        self.tick()
    }
}

/// Workers running on other threads or processes. Ticks do nothing; barrier
/// waits sleep for `poll`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExternalWorkers {
    pub poll: Duration,
}

impl WorkerDriver for ExternalWorkers {
    fn tick(&mut self) -> Result<(), ActorError> {
        Ok(())
    }

    fn wait(&mut self) -> Result<(), ActorError> {
        std::thread::sleep(self.poll);
        Ok(())
    }
}

/// Deterministic in-process workers: each tick, every worker scores a fixed
/// number of chunks of its current sweep.
pub struct InProcWorkers<S: WeightStore> {
    pub workers: Vec<Worker<S>>,
    pub chunks_per_tick: usize,
}

impl<S: WeightStore> WorkerDriver for InProcWorkers<S> {
    fn tick(&mut self) -> Result<(), ActorError> {
        for w in &mut self.workers {
            for _ in 0..self.chunks_per_tick {
                if let ChunkOutcome::Idle = w.step_chunk()? {
                    break;
                }
            }
        }
        Ok(())
    }
}
