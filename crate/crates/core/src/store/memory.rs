use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use crate::sampler::{StalenessFilter, WeightEntry};

use super::clock::{Clock, SystemClock};
use super::{ParamsSnapshot, StoreError, WeightStore, WorkerStatus};

#[derive(Debug, Default)]
struct StoreState {
    params: Option<Arc<ParamsSnapshot>>,
    /// Dense by example index; `None` until first scored.
    weights: Vec<Option<WeightEntry<f64>>>,
    worker_status: BTreeMap<u32, u64>,
    last_stamp: f64,
}

struct Inner {
    state: Mutex<StoreState>,
    clock: Arc<dyn Clock>,
    population: Option<usize>,
}

/// In-process store. Clones are handles onto the same state.
#[derive(Clone)]
pub struct MemoryStore {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for MemoryStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryStore").field("population", &self.inner.population).finish_non_exhaustive()
    }
}

impl Default for MemoryStore {
    fn default() -> Self {
        Self::new(None)
    }
}

impl MemoryStore {
    /// `population` bounds accepted example indices when given.
    pub fn new(population: Option<usize>) -> Self {
        Self::with_clock(population, Arc::new(SystemClock::new()))
    }

    pub fn with_clock(population: Option<usize>, clock: Arc<dyn Clock>) -> Self {
        Self {
            inner: Arc::new(Inner { state: Mutex::new(StoreState::default()), clock, population }),
        }
    }

    /// Current store time in seconds.
    pub fn now(&self) -> f64 {
        self.inner.clock.now()
    }

    pub fn population(&self) -> Option<usize> {
        self.inner.population
    }

    /// Number of examples with at least one recorded weight.
    pub fn coverage(&self) -> usize {
        self.inner.state.lock().unwrap().weights.iter().filter(|w| w.is_some()).count()
    }
}

impl WeightStore for MemoryStore {
    fn put_params(&mut self, snapshot: ParamsSnapshot) -> Result<(), StoreError> {
        if snapshot.params.len() != ParamsSnapshot::expected_len(&snapshot.shapes) {
            return Err(StoreError::InvalidParams);
        }
        let snapshot = Arc::new(snapshot);
        let mut st = self.inner.state.lock().unwrap();
        let stored = st.params.as_ref().map_or(0, |p| p.version);
        if snapshot.version <= stored {
            return Err(StoreError::StaleVersion { stored, attempted: snapshot.version });
        }
        st.params = Some(snapshot);
        Ok(())
    }

    fn get_params(&mut self) -> Result<Option<Arc<ParamsSnapshot>>, StoreError> {
        Ok(self.inner.state.lock().unwrap().params.clone())
    }

    fn put_weights(&mut self, param_version: u64, entries: &[(usize, f64)]) -> Result<(), StoreError> {
        let limit = self.inner.population.unwrap_or(u32::MAX as usize + 1);
        for &(index, weight) in entries {
            if index >= limit {
                return Err(StoreError::IndexOutOfRange { index, population: limit });
            }
            if !(weight >= 0.0) || !weight.is_finite() {
                return Err(StoreError::InvalidWeight { index });
            }
        }
        let mut st = self.inner.state.lock().unwrap();
        let stamp = self.inner.clock.now().max(st.last_stamp);
        st.last_stamp = stamp;
        for &(index, weight) in entries {
            if st.weights.len() <= index {
                st.weights.resize(index + 1, None);
            }
            st.weights[index] = Some(WeightEntry { index, weight, param_version, timestamp: stamp });
        }
        Ok(())
    }

    fn get_weights(&mut self, filter: StalenessFilter) -> Result<Vec<WeightEntry<f64>>, StoreError> {
        let st = self.inner.state.lock().unwrap();
        let now = self.inner.clock.now();
        Ok(st.weights.iter().flatten().filter(|e| filter.keeps(e, now)).copied().collect())
    }

    fn put_worker_status(&mut self, worker_id: u32, scored_version: u64) -> Result<(), StoreError> {
        self.inner.state.lock().unwrap().worker_status.insert(worker_id, scored_version);
        Ok(())
    }

    fn get_worker_status(&mut self) -> Result<Vec<WorkerStatus>, StoreError> {
        Ok(self
            .inner
            .state
            .lock()
            .unwrap()
            .worker_status
            .iter()
            .map(|(&worker_id, &scored_version)| WorkerStatus { worker_id, scored_version })
            .collect())
    }
}
