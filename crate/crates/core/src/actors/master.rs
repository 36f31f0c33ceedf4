use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, LabeledSet};
use crate::metrics::MetricsRow;
use crate::nn::{backward, forward, per_example_grad_sq_norms, LayerSpec, ModelParams};
use crate::sampler::{build_proposal, Proposal, SamplerError, StalenessFilter};
use crate::store::{ParamsSnapshot, WeightStore};
use crate::variance::{estimate_gtrue_sq, intersect, VarianceReport};

use super::{ActorError, MasterConfig, Mode, Staleness, WorkerDriver};

/// Rows evaluated per forward pass when measuring loss and error.
const EVAL_CHUNK: usize = 1024;

/// Outcome of one parameter update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// Unweighted mean loss of the drawn minibatch, before the update.
    pub loss: f64,
    pub misclassified: usize,
    pub batch_size: usize,
    /// The step used uniform sampling although importance sampling was requested.
    pub fallback: bool,
}

/// Draws a minibatch of `m` from `proposal`, backpropagates the
/// coefficient-scaled loss and applies one SGD update.
pub fn master_step<R: Rng + ?Sized>(
    params: &mut ModelParams<f64>,
    proposal: &Proposal<f64>,
    data: &LabeledSet,
    lr: f64,
    m: usize,
    rng: &mut R,
) -> Result<StepMetrics, ActorError> {
    let batch = proposal.draw_minibatch(m, rng);
    let (x, labels) = data.rows(&batch.indices);
    let cache = forward(params, &x, &labels)?;
    let back = backward(params, &cache, &batch.coefficients)?;
    params.sgd_update(&back.grads, lr);
    Ok(StepMetrics { loss: cache.mean_loss(), misclassified: cache.misclassified(), batch_size: m, fallback: false })
}

/// Mean loss and error rate over a whole set.
pub fn evaluate_set(params: &ModelParams<f64>, set: &LabeledSet) -> Result<(f64, f64), ActorError> {
    if set.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss = 0.0;
    let mut wrong = 0;
    let all: Vec<usize> = (0..set.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, labels) = set.rows(chunk);
        let cache = forward(params, &x, &labels)?;
        loss += cache.losses.iter().sum::<f64>();
        wrong += cache.misclassified();
    }
    let n = set.len() as f64;
    Ok((loss / n, wrong as f64 / n))
}

/// Per-example gradient norms over `indices`, and the norm of each chunk's
/// mean gradient (chunks of `chunk` consecutive indices).
pub fn audit_norms(
    params: &ModelParams<f64>,
    set: &LabeledSet,
    indices: &[usize],
    chunk: usize,
) -> Result<(Vec<f64>, Vec<f64>), ActorError> {
    let mut norms = Vec::with_capacity(indices.len());
    let mut chunk_norms = Vec::new();
    for part in indices.chunks(chunk.max(1)) {
        let (x, labels) = set.rows(part);
        let cache = forward(params, &x, &labels)?;
        let back = backward(params, &cache, &vec![1.0; part.len()])?;
        norms.extend(per_example_grad_sq_norms(&cache, &back).into_iter().map(|s| s.max(0.0).sqrt()));
        let k = part.len() as f64;
        chunk_norms.push(back.grad_sq_norm().sqrt() / k);
    }
    Ok((norms, chunk_norms))
}

/// The trainer. Owns the authoritative 64-bit parameters, publishes 32-bit
/// snapshots to the store and samples minibatches from the weights workers
/// push back.
pub struct Master<S: WeightStore> {
    cfg: MasterConfig,
    store: Option<S>,
    train: Arc<LabeledSet>,
    valid: LabeledSet,
    test: LabeledSet,
    params: ModelParams<f64>,
    rng: ChaCha8Rng,
    audit: Vec<usize>,
    uniform: Proposal<f64>,
    proposal: Option<Proposal<f64>>,
    bootstrapped: bool,
    version: u64,
    steps: u64,
    started: Instant,
}

impl<S: WeightStore> Master<S> {
    /// Initializes parameters from `cfg.seed`. A store is required unless
    /// the mode is plain SGD, which never touches it.
    pub fn new(cfg: MasterConfig, mut store: Option<S>, data: &Dataset) -> Result<Self, ActorError> {
        cfg.validate()?;
        if cfg.mode != Mode::Sgd && store.is_none() {
            return Err(ActorError::Config("importance sampling needs a weight store".into()));
        }
        let train = Arc::new(data.train());
        if train.is_empty() {
            return Err(ActorError::Config("training split is empty".into()));
        }
        let mut widths = vec![data.dims()];
        widths.extend(&cfg.hidden_layers);
        widths.push(data.num_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = ModelParams::init(&LayerSpec::chain(&widths), &mut rng)?;

        let n = train.len();
        let audit = if n <= cfg.audit_size {
            (0..n).collect()
        } else {
            let mut audit_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa0d1_7000_5eed);
            let mut picked = rand::seq::index::sample(&mut audit_rng, n, cfg.audit_size).into_vec();
            picked.sort_unstable();
            picked
        };

        let version = match (&cfg.mode, store.as_mut()) {
            (Mode::Sgd, _) | (_, None) => 0,
            (_, Some(s)) => s.get_params()?.map_or(0, |p| p.version),
        };
        let bootstrapped = cfg.mode == Mode::IssgdExact;
        Ok(Self {
            uniform: Proposal::uniform(n)?,
            cfg,
            store,
            valid: data.valid(),
            test: data.test(),
            train,
            params,
            rng,
            audit,
            proposal: None,
            bootstrapped,
            version,
            steps: 0,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &MasterConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams<f64> {
        &self.params
    }

    pub fn train_set(&self) -> Arc<LabeledSet> {
        self.train.clone()
    }

    /// Last parameter version pushed to the store.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// The importance proposal the next step will use, if any.
    pub fn proposal(&self) -> Option<&Proposal<f64>> {
        self.proposal.as_ref()
    }

    pub fn audit_indices(&self) -> &[usize] {
        &self.audit
    }

    pub fn store_mut(&mut self) -> Option<&mut S> {
        self.store.as_mut()
    }

    fn store(&mut self) -> &mut S {
        self.store.as_mut().expect("importance modes always have a store")
    }

    /// Publishes the current parameters under a new version.
    pub fn push_params(&mut self) -> Result<u64, ActorError> {
        self.version += 1;
        self.params.version = self.version;
        let snapshot = ParamsSnapshot::from_model(&self.params);
        self.store().put_params(snapshot)?;
        Ok(self.version)
    }

    /// Blocks until every worker reports having scored the current version.
    pub fn barrier<D: WorkerDriver + ?Sized>(&mut self, driver: &mut D) -> Result<(), ActorError> {
        let version = self.version;
        let needed = self.cfg.num_workers;
        let timeout = self.cfg.barrier_timeout;
        let start = Instant::now();
        loop {
            let done = self.store().get_worker_status()?.iter().filter(|s| s.scored_version >= version).count();
            if done >= needed {
                return Ok(());
            }
            if start.elapsed() > timeout {
                return Err(ActorError::BarrierTimeout { version, waited: start.elapsed() });
            }
            driver.wait()?;
        }
    }

    fn filter(&self) -> StalenessFilter {
        if self.cfg.mode == Mode::IssgdExact {
            return StalenessFilter::ExactVersion(self.version);
        }
        match self.cfg.staleness {
            Staleness::Any => StalenessFilter::All,
            Staleness::MaxAgeSeconds(s) => StalenessFilter::MaxAge(s),
            Staleness::CurrentVersion => StalenessFilter::ExactVersion(self.version),
        }
    }

    /// Fetches weights and rebuilds the proposal. Leaves no proposal (uniform
    /// fallback) while bootstrapping or when the filter starves it.
    pub fn refresh_proposal(&mut self) -> Result<(), ActorError> {
        let n = self.train.len();
        if !self.bootstrapped {
            let covered = self.store().get_weights(StalenessFilter::All)?.len();
            if (covered as f64) < self.cfg.bootstrap_min_coverage * n as f64 {
                self.proposal = None;
                return Ok(());
            }
            log::info!("weights cover {covered} of {n} examples, switching to importance sampling");
            self.bootstrapped = true;
        }
        let filter = self.filter();
        let entries = self.store().get_weights(filter)?;
        // The store already applied the filter against its own clock.
        match build_proposal(&entries, self.cfg.smoothing, StalenessFilter::All, 0.0, n) {
            Ok(p) => self.proposal = Some(p),
            Err(e @ (SamplerError::StalenessStarvation { .. } | SamplerError::Degenerate)) => {
                log::warn!("step {}: {e}; sampling uniformly", self.steps);
                self.proposal = None;
            }
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }

    /// Pushes, synchronizes and refreshes as scheduled for the upcoming step.
    fn prepare<D: WorkerDriver + ?Sized>(&mut self, driver: &mut D) -> Result<(), ActorError> {
        let i = self.steps as usize;
        match self.cfg.mode {
            Mode::Sgd => {}
            Mode::IssgdExact => {
                self.push_params()?;
                self.barrier(driver)?;
                self.refresh_proposal()?;
            }
            Mode::Issgd => {
                if i.is_multiple_of(self.cfg.param_push_every) {
                    self.push_params()?;
                }
                if i.is_multiple_of(self.cfg.weights_refresh_every) {
                    self.refresh_proposal()?;
                }
            }
        }
        Ok(())
    }

    /// One update from the current proposal, or uniform when there is none.
    pub fn step(&mut self) -> Result<StepMetrics, ActorError> {
        let (proposal, fallback) = match (&self.proposal, self.cfg.mode) {
            (Some(p), Mode::Issgd | Mode::IssgdExact) => (p, false),
            (_, mode) => (&self.uniform, mode != Mode::Sgd),
        };
        let mut out =
            master_step(&mut self.params, proposal, &self.train, self.cfg.learning_rate, self.cfg.batch_size, &mut self.rng)?;
        out.fallback = fallback;
        self.steps += 1;
        Ok(out)
    }

    /// Exact mode: push, wait for every worker to rescore, sample from the
    /// fresh weights only, update.
    pub fn run_exact_round<D: WorkerDriver + ?Sized>(&mut self, driver: &mut D) -> Result<StepMetrics, ActorError> {
        self.push_params()?;
        self.barrier(driver)?;
        let saved = std::mem::replace(&mut self.cfg.mode, Mode::IssgdExact);
        let refreshed = self.refresh_proposal();
        self.cfg.mode = saved;
        refreshed?;
        if self.proposal.is_none() {
            return Err(SamplerError::StalenessStarvation { population: self.train.len() }.into());
        }
        self.step()
    }

    /// Variance report over the audit set, using fresh norms of the current
    /// parameters at snapshot precision. `tr_stale` and `tr_ideal` are taken
    /// over audited examples the proposal retains.
    pub fn variance_report(&self) -> Result<VarianceReport<f64>, ActorError> {
        let rounded = ParamsSnapshot::from_model(&self.params).to_model()?;
        let (norms, chunk_norms) = audit_norms(&rounded, &self.train, &self.audit, self.cfg.batch_size)?;
        let gtrue = estimate_gtrue_sq(&chunk_norms)?;
        if let Some(p) = &self.proposal {
            let fresh: Vec<(usize, f64)> = self.audit.iter().copied().zip(norms.iter().copied()).collect();
            let (idx, old, fresh) = intersect(p.retained(), &fresh);
            if !idx.is_empty() {
                return Ok(VarianceReport::compute(self.steps, &fresh, Some(&old), gtrue)?);
            }
        }
        Ok(VarianceReport::compute(self.steps, &norms, None, gtrue)?)
    }

    pub fn metrics_row(&self) -> Result<MetricsRow, ActorError> {
        let (train_loss, train_err) = evaluate_set(&self.params, &self.train)?;
        let opt = |v: f64| if v.is_nan() { None } else { Some(v) };
        let valid_err = opt(evaluate_set(&self.params, &self.valid)?.1);
        let test_err = opt(evaluate_set(&self.params, &self.test)?.1);
        let mut row = MetricsRow {
            step: self.steps,
            wall_seconds: self.started.elapsed().as_secs_f64(),
            train_loss,
            train_err,
            valid_err,
            test_err,
            tr_ideal: None,
            tr_stale: None,
            tr_unif: None,
            gtrue_sq_est: None,
            kept_fraction: None,
            params_version: self.version,
            fallback_flag: 0,
        };
        if self.cfg.mode != Mode::Sgd {
            let report = self.variance_report()?;
            row.tr_ideal = Some(report.tr_ideal);
            row.tr_stale = report.tr_stale;
            row.tr_unif = Some(report.tr_unif);
            row.gtrue_sq_est = Some(report.gtrue_sq_estimate);
            row.kept_fraction = self.proposal.as_ref().map(Proposal::kept_fraction);
            row.fallback_flag = u8::from(self.proposal.is_none());
        }
        Ok(row)
    }

    /// Trains for `total_updates` steps, logging a metrics row every
    /// `metrics_every` steps and once more after the last update.
    pub fn run<D: WorkerDriver + ?Sized>(&mut self, driver: &mut D) -> Result<Vec<MetricsRow>, ActorError> {
        let total = self.cfg.total_updates as u64;
        let mut rows = Vec::new();
        if total == 0 {
            return Ok(rows);
        }
        while self.steps < total {
            self.prepare(driver)?;
            if self.steps.is_multiple_of(self.cfg.metrics_every as u64) {
                let row = self.metrics_row()?;
                let reached = self.reached_target(&row);
                log::info!("step {} train loss {:.5} train err {:.4}", row.step, row.train_loss, row.train_err);
                rows.push(row);
                if reached {
                    return Ok(rows);
                }
            }
            self.step()?;
            if self.cfg.mode != Mode::IssgdExact {
                driver.tick()?;
            }
        }
        self.prepare(driver)?;
        let row = self.metrics_row()?;
        log::info!("step {} train loss {:.5} train err {:.4}", row.step, row.train_loss, row.train_err);
        rows.push(row);
        Ok(rows)
    }

    fn reached_target(&self, row: &MetricsRow) -> bool {
        self.cfg.stop_at_train_loss.is_some_and(|t| row.train_loss <= t)
    }
}
