//! Versioned parameter / probability-weight store shared by the master and
//! the workers, with an in-process backend and a TCP backend speaking the
//! same binary protocol.

mod clock;
mod memory;
mod tcp;
pub mod wire;

use std::sync::Arc;

pub use clock::{Clock, ManualClock, SystemClock};
pub use memory::MemoryStore;
pub use tcp::{connect_with_retry, StoreServer, ServerHandle, TcpStoreClient};
pub use wire::{ErrorCode, Message, ProtocolError, ProtocolErrorKind};

use crate::nn::{ModelParams, NnError};
use crate::sampler::{StalenessFilter, WeightEntry};

/// A complete parameter snapshot as stored and transmitted (32-bit floats).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamsSnapshot {
    pub version: u64,
    /// `(in_dim, out_dim)` per layer.
    pub shapes: Vec<(u32, u32)>,
    pub params: Vec<f32>,
}

impl ParamsSnapshot {
    pub fn from_model(model: &ModelParams<f64>) -> Self {
        Self {
            version: model.version,
            shapes: model.shapes().iter().map(|&(i, o)| (i as u32, o as u32)).collect(),
            params: model.flatten().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_model(&self) -> Result<ModelParams<f64>, NnError> {
        let shapes: Vec<_> = self.shapes.iter().map(|&(i, o)| (i as usize, o as usize)).collect();
        let flat: Vec<f64> = self.params.iter().map(|&v| v as f64).collect();
        ModelParams::from_flat(self.version, &shapes, &flat)
    }

    pub fn expected_len(shapes: &[(u32, u32)]) -> usize {
        shapes.iter().map(|&(i, o)| i as usize * o as usize + o as usize).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerStatus {
    pub worker_id: u32,
    pub scored_version: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("parameter version {attempted} is not newer than stored version {stored}")]
    StaleVersion { stored: u64, attempted: u64 },
    #[error("example index {index} outside [0, {population})")]
    IndexOutOfRange { index: usize, population: usize },
    #[error("weight for example {index} is negative or not finite")]
    InvalidWeight { index: usize },
    #[error("parameter payload does not match its layer shapes")]
    InvalidParams,
    #[error("store replied with error {code:?}: {message}")]
    Remote { code: ErrorCode, message: String },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("unexpected reply kind 0x{0:02x}")]
    UnexpectedReply(u8),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl StoreError {
    /// Wire error code this error travels as; `None` for transport failures.
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            StoreError::StaleVersion { .. } => Some(ErrorCode::StaleVersion),
            StoreError::IndexOutOfRange { .. } => Some(ErrorCode::IndexOutOfRange),
            StoreError::InvalidWeight { .. } => Some(ErrorCode::InvalidWeight),
            StoreError::InvalidParams => Some(ErrorCode::InvalidParams),
            StoreError::Remote { code, .. } => Some(*code),
            StoreError::Protocol(_) => Some(ErrorCode::Protocol),
            StoreError::UnexpectedReply(_) | StoreError::Io(_) => None,
        }
    }
}

/// Operations shared by every store backend.
pub trait WeightStore: Send {
    /// Replaces the stored parameters. The version must be newer than the stored one.
    fn put_params(&mut self, snapshot: ParamsSnapshot) -> Result<(), StoreError>;
    fn get_params(&mut self) -> Result<Option<Arc<ParamsSnapshot>>, StoreError>;
    /// Records `(index, weight)` pairs computed from `param_version`; the store
    /// stamps them with its own clock. The batch is applied all-or-nothing.
    fn put_weights(&mut self, param_version: u64, entries: &[(usize, f64)]) -> Result<(), StoreError>;
    fn get_weights(&mut self, filter: StalenessFilter) -> Result<Vec<WeightEntry<f64>>, StoreError>;
    fn put_worker_status(&mut self, worker_id: u32, scored_version: u64) -> Result<(), StoreError>;
    fn get_worker_status(&mut self) -> Result<Vec<WorkerStatus>, StoreError>;
}

impl<S: WeightStore + ?Sized> WeightStore for Box<S> {
    fn put_params(&mut self, snapshot: ParamsSnapshot) -> Result<(), StoreError> {
        (**self).put_params(snapshot)
    }
    fn get_params(&mut self) -> Result<Option<Arc<ParamsSnapshot>>, StoreError> {
        (**self).get_params()
    }
    fn put_weights(&mut self, param_version: u64, entries: &[(usize, f64)]) -> Result<(), StoreError> {
        (**self).put_weights(param_version, entries)
    }
    fn get_weights(&mut self, filter: StalenessFilter) -> Result<Vec<WeightEntry<f64>>, StoreError> {
        (**self).get_weights(filter)
    }
    fn put_worker_status(&mut self, worker_id: u32, scored_version: u64) -> Result<(), StoreError> {
        (**self).put_worker_status(worker_id, scored_version)
    }
    fn get_worker_status(&mut self) -> Result<Vec<WorkerStatus>, StoreError> {
        (**self).get_worker_status()
    }
}
