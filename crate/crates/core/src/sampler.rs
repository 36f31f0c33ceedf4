//! Smoothed, staleness-filtered sampling proposals over training examples,
//! minibatch draws with replacement, and the importance coefficients that
//! keep the scaled minibatch loss unbiased.

use rand::Rng;

use crate::scalar::Scalar;

/// Probability weight for one example as recorded in the weight store.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightEntry<T> {
    pub index: usize,
    pub weight: T,
    pub param_version: u64,
    /// Store clock, seconds.
    pub timestamp: f64,
}

/// Which weight entries a proposal may use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StalenessFilter {
    All,
    /// Keep entries with `now − timestamp ≤ seconds`.
    MaxAge(f64),
    /// Keep entries computed from exactly this parameter version.
    ExactVersion(u64),
}

impl StalenessFilter {
    pub fn keeps<T>(&self, e: &WeightEntry<T>, now: f64) -> bool {
        match *self {
            StalenessFilter::All => true,
            StalenessFilter::MaxAge(s) => now - e.timestamp <= s,
            StalenessFilter::ExactVersion(v) => e.param_version == v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SamplerError {
    #[error("no weight entry survived the staleness filter ({population} examples)")]
    StalenessStarvation { population: usize },
    #[error("all probability weights are zero and no smoothing is applied")]
    Degenerate,
    #[error("weight for example {index} is negative or not finite")]
    InvalidWeight { index: usize },
    #[error("example index {index} outside population of {population}")]
    IndexOutOfRange { index: usize, population: usize },
    #[error("smoothing constant must be finite and non-negative")]
    InvalidSmoothing,
    #[error("population must contain at least one example")]
    EmptyPopulation,
}

/// Normalized sampling distribution over the retained examples.
///
/// Examples passing the filter form the effective population for the step;
/// `zbar` is the mean smoothed weight over that population. Entries whose
/// smoothed weight is exactly zero have zero gradient and are never drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal<T> {
    retained: Vec<(usize, T)>,
    cumulative: Vec<T>,
    total_smoothed: T,
    zbar: T,
    passing: usize,
    population: usize,
}

impl<T: Scalar> Proposal<T> {
    /// Uniform proposal over `0..population`.
    pub fn uniform(population: usize) -> Result<Self, SamplerError> {
        Self::from_weights(&vec![T::one(); population], T::zero())
    }

    /// Proposal over every index of a dense weight vector.
    pub fn from_weights(weights: &[T], smoothing: T) -> Result<Self, SamplerError> {
        let entries: Vec<_> = weights
            .iter()
            .enumerate()
            .map(|(index, &weight)| WeightEntry { index, weight, param_version: 0, timestamp: 0.0 })
            .collect();
        build_proposal(&entries, smoothing, StalenessFilter::All, 0.0, weights.len())
    }

    /// `(index, smoothed weight)` for every drawable example, ascending by index.
    pub fn retained(&self) -> &[(usize, T)] {
        &self.retained
    }

    pub fn total_smoothed(&self) -> T {
        self.total_smoothed
    }

    pub fn zbar(&self) -> T {
        self.zbar
    }

    /// Number of examples that passed the staleness filter.
    pub fn passing(&self) -> usize {
        self.passing
    }

    pub fn population(&self) -> usize {
        self.population
    }

    pub fn kept_fraction(&self) -> f64 {
        self.passing as f64 / self.population as f64
    }

    /// `(index, ω_n)` normalized probabilities.
    pub fn probabilities(&self) -> Vec<(usize, T)> {
        self.retained.iter().map(|&(i, w)| (i, w / self.total_smoothed)).collect()
    }

    pub fn max_probability(&self) -> T {
        self.retained.iter().map(|&(_, w)| w).fold(T::zero(), T::max) / self.total_smoothed
    }

    /// Loss multiplier for one draw of the retained entry at `pos` in a minibatch of `m`.
    pub fn coefficient(&self, pos: usize, m: usize) -> T {
        self.zbar / (T::of_usize(m) * self.retained[pos].1)
    }

    fn sample_position<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = T::of(rng.random::<f64>()) * self.total_smoothed;
        self.cumulative.partition_point(|&c| c <= u).min(self.retained.len() - 1)
    }

    /// Draws `m` indices i.i.d. from the proposal (inverse CDF, binary search).
    pub fn draw_minibatch<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Minibatch<T> {
        assert!(m >= 1, "minibatch size must be at least 1");
        let mut indices = Vec::with_capacity(m);
        let mut coefficients = Vec::with_capacity(m);
        for _ in 0..m {
            let pos = self.sample_position(rng);
            indices.push(self.retained[pos].0);
            coefficients.push(self.coefficient(pos, m));
        }
        Minibatch { indices, coefficients }
    }

    /// Exact expectation of the single-draw importance-weighted gradient.
    ///
    /// `per_example_grads` is indexed by example id over the whole population.
    /// The result equals the plain mean gradient over the examples that passed
    /// the filter.
    pub fn expected_is_gradient(&self, per_example_grads: &[Vec<T>]) -> Vec<T> {
        let dim = per_example_grads.first().map_or(0, Vec::len);
        let mut out = vec![T::zero(); dim];
        for (pos, &(index, w)) in self.retained.iter().enumerate() {
            let scale = (w / self.total_smoothed) * self.coefficient(pos, 1);
            for (o, &g) in out.iter_mut().zip(&per_example_grads[index]) {
                *o += scale * g;
            }
        }
        out
    }
}

/// Sampled example ids and the per-element multipliers for the scaled loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch<T> {
    pub indices: Vec<usize>,
    pub coefficients: Vec<T>,
}

/// Builds a proposal from store entries: filter, add `smoothing` to every
/// surviving weight, normalize. Later duplicates of an index replace earlier ones.
pub fn build_proposal<T: Scalar>(
    entries: &[WeightEntry<T>],
    smoothing: T,
    filter: StalenessFilter,
    now: f64,
    population: usize,
) -> Result<Proposal<T>, SamplerError> {
    if population == 0 {
        return Err(SamplerError::EmptyPopulation);
    }
    if !(smoothing >= T::zero()) || !smoothing.is_finite() {
        return Err(SamplerError::InvalidSmoothing);
    }
    let mut dense: Vec<Option<T>> = vec![None; population];
    for e in entries {
        if e.index >= population {
            return Err(SamplerError::IndexOutOfRange { index: e.index, population });
        }
        if !(e.weight >= T::zero()) || !e.weight.is_finite() {
            return Err(SamplerError::InvalidWeight { index: e.index });
        }
        if filter.keeps(e, now) {
            dense[e.index] = Some(e.weight);
        } else {
            dense[e.index] = None;
        }
    }

    let passing = dense.iter().filter(|w| w.is_some()).count();
    if passing == 0 {
        return Err(SamplerError::StalenessStarvation { population });
    }
    let retained: Vec<(usize, T)> = dense
        .iter()
        .enumerate()
        .filter_map(|(i, w)| w.map(|w| (i, w + smoothing)))
        .filter(|&(_, w)| w > T::zero())
        .collect();
    if retained.is_empty() {
        return Err(SamplerError::Degenerate);
    }
    let mut acc = T::zero();
    let cumulative: Vec<T> = retained
        .iter()
        .map(|&(_, w)| {
            acc += w;
            acc
        })
        .collect();
    let total_smoothed = acc;
    Ok(Proposal {
        retained,
        cumulative,
        total_smoothed,
        zbar: total_smoothed / T::of_usize(passing),
        passing,
        population,
    })
}
