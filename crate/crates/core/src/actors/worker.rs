use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::dataset::LabeledSet;
use crate::nn::{backward, forward, per_example_grad_sq_norms, ModelParams};
use crate::store::WeightStore;

use super::{ActorError, WorkerConfig};

/// Result of one scoring chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkOutcome {
    /// No parameters yet, or the latest version was already scored.
    Idle,
    /// Pushed this many weights; the sweep continues.
    Scored(usize),
    /// Pushed this many weights and reported the sweep's version as scored.
    SweepDone(usize),
}

struct Sweep {
    model: ModelParams<f64>,
    version: u64,
    pos: usize,
}

/// Recomputes `‖g_n‖` for its shard of the training set against the latest
/// parameters in the store and pushes them back.
pub struct Worker<S: WeightStore> {
    cfg: WorkerConfig,
    store: S,
    data: Arc<LabeledSet>,
    shard: Vec<usize>,
    sweep: Option<Sweep>,
    last_scored: Option<u64>,
}

impl<S: WeightStore> Worker<S> {
    /// `data` is the training set; store indices are positions in it.
    pub fn new(cfg: WorkerConfig, store: S, data: Arc<LabeledSet>) -> Result<Self, ActorError> {
        if cfg.shard.stride == 0 {
            return Err(ActorError::Config("shard stride must be at least 1".into()));
        }
        if cfg.scoring_batch == 0 {
            return Err(ActorError::Config("scoring batch must be at least 1".into()));
        }
        let shard = cfg.shard.indices(data.len());
        Ok(Self { cfg, store, data, shard, sweep: None, last_scored: None })
    }

    pub fn config(&self) -> &WorkerConfig {
        &self.cfg
    }

    pub fn shard(&self) -> &[usize] {
        &self.shard
    }

    pub fn last_scored(&self) -> Option<u64> {
        self.last_scored
    }

    pub fn store_mut(&mut self) -> &mut S {
        &mut self.store
    }

    fn begin_sweep(&mut self) -> Result<bool, ActorError> {
        let Some(snapshot) = self.store.get_params()? else {
            return Ok(false);
        };
        if self.last_scored == Some(snapshot.version) {
            return Ok(false);
        }
        let model = snapshot.to_model()?;
        log::debug!("worker {} scoring version {}", self.cfg.worker_id, snapshot.version);
        self.sweep = Some(Sweep { model, version: snapshot.version, pos: 0 });
        Ok(true)
    }

    /// Scores the next `scoring_batch` examples of the current sweep, starting
    /// a new sweep first if the store holds unscored parameters.
    pub fn step_chunk(&mut self) -> Result<ChunkOutcome, ActorError> {
        if self.sweep.is_none() && !self.begin_sweep()? {
            return Ok(ChunkOutcome::Idle);
        }
        let sweep = self.sweep.as_mut().expect("sweep started above");
        let end = (sweep.pos + self.cfg.scoring_batch).min(self.shard.len());
        let indices = &self.shard[sweep.pos..end];
        let mut pushed = 0;
        if !indices.is_empty() {
            let (x, labels) = self.data.rows(indices);
            let cache = forward(&sweep.model, &x, &labels)?;
            let back = backward(&sweep.model, &cache, &vec![1.0; indices.len()])?;
            let sq = per_example_grad_sq_norms(&cache, &back);
            let entries: Vec<(usize, f64)> =
                indices.iter().zip(&sq).map(|(&i, &s)| (i, s.max(0.0).sqrt())).collect();
            self.store.put_weights(sweep.version, &entries)?;
            pushed = entries.len();
        }
        sweep.pos = end;
        if end < self.shard.len() {
            return Ok(ChunkOutcome::Scored(pushed));
        }
        let version = sweep.version;
        self.sweep = None;
        self.store.put_worker_status(self.cfg.worker_id, version)?;
        self.last_scored = Some(version);
        Ok(ChunkOutcome::SweepDone(pushed))
    }

    /// Scores the whole shard against the latest parameters. Returns the
    /// number of weights pushed; 0 when there was nothing new to score.
    pub fn sweep(&mut self) -> Result<usize, ActorError> {
        let mut total = 0;
        loop {
            match self.step_chunk()? {
                ChunkOutcome::Idle => return Ok(total),
                ChunkOutcome::Scored(n) => total += n,
                ChunkOutcome::SweepDone(n) => return Ok(total + n),
            }
        }
    }

    /// Scores continuously until `stop` is set, polling while idle.
    pub fn run(&mut self, stop: &AtomicBool) -> Result<(), ActorError> {
        while !stop.load(Ordering::Relaxed) {
            if let ChunkOutcome::Idle = self.step_chunk()? {
                std::thread::sleep(self.cfg.poll_interval);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actors::Shard;
    use crate::dataset::{synth_dataset, SynthSpec};
    use crate::nn::{naive_per_example_norms, LayerSpec};
    use crate::sampler::StalenessFilter;
    use crate::store::{MemoryStore, ParamsSnapshot};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize) -> (Arc<LabeledSet>, ModelParams<f64>) {
        let ds = synth_dataset(&SynthSpec { n, dims: 5, classes: 3, difficulty_tail: 0.2, seed: 3 }).unwrap();
        let train = Arc::new(ds.train());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ModelParams::init(&LayerSpec::chain(&[5, 8, 3]), &mut rng).unwrap();
        (train, model)
    }

    fn push(store: &mut MemoryStore, model: &ModelParams<f64>, version: u64) {
        let mut snap = ParamsSnapshot::from_model(model);
        snap.version = version;
        store.put_params(snap).unwrap();
    }

    #[test]
    fn idle_without_params() {
        let (train, _) = setup(40);
        let mut w = Worker::new(WorkerConfig::new(0, 1), MemoryStore::default(), train).unwrap();
        assert_eq!(w.step_chunk().unwrap(), ChunkOutcome::Idle);
        assert_eq!(w.sweep().unwrap(), 0);
    }

    #[test]
    fn shards_partition_indices() {
        for k in 1..5 {
            let mut seen = [0; 37];
            for id in 0..k {
                for i in Shard::of(id, k).indices(37) {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn sweep_pushes_norms_and_status() {
        let (train, model) = setup(60);
        let mut store = MemoryStore::default();
        push(&mut store, &model, 1);
        let mut cfg = WorkerConfig::new(0, 1);
        cfg.scoring_batch = 7;
        let mut w = Worker::new(cfg, store.clone(), train.clone()).unwrap();
        assert_eq!(w.sweep().unwrap(), train.len());
        // Nothing new to score.
        assert_eq!(w.sweep().unwrap(), 0);

        let rounded = ParamsSnapshot::from_model(&model).to_model().unwrap();
        let all: Vec<usize> = (0..train.len()).collect();
        let (x, labels) = train.rows(&all);
        let naive = naive_per_example_norms(&rounded, &x, &labels).unwrap();
        let entries = store.get_weights(StalenessFilter::All).unwrap();
        assert_eq!(entries.len(), train.len());
        for e in &entries {
            let want = naive[e.index].sqrt();
            assert!((e.weight - want).abs() <= 1e-6 * want.max(1e-12), "{} vs {}", e.weight, want);
            assert_eq!(e.param_version, 1);
        }
        let status = store.get_worker_status().unwrap();
        assert_eq!(status.len(), 1);
        assert_eq!(status[0].scored_version, 1);

        push(&mut store, &model, 2);
        assert_eq!(w.sweep().unwrap(), train.len());
        assert!(store.get_weights(StalenessFilter::All).unwrap().iter().all(|e| e.param_version == 2));
        assert_eq!(w.last_scored(), Some(2));
    }

    #[test]
    fn rejects_bad_config() {
        let (train, _) = setup(20);
        let mut cfg = WorkerConfig::new(0, 1);
        cfg.scoring_batch = 0;
        assert!(Worker::new(cfg, MemoryStore::default(), train).is_err());
    }
}
