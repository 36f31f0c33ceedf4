use std::sync::{Arc, Mutex};
use std::time::Instant;

/// Source of store timestamps, in seconds.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

/// Seconds elapsed since construction.
#[derive(Debug, Clone)]
pub struct SystemClock {
    start: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { start: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

/// Scripted clock for tests; clones share the same time.
#[derive(Debug, Clone, Default)]
pub struct ManualClock {
    t: Arc<Mutex<f64>>,
}

impl ManualClock {
    pub fn new(t: f64) -> Self {
        Self { t: Arc::new(Mutex::new(t)) }
    }

    pub fn set(&self, t: f64) {
        *self.t.lock().unwrap() = t;
    }

    pub fn advance(&self, dt: f64) {
        *self.t.lock().unwrap() += dt;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        *self.t.lock().unwrap()
    }
}
