//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use issgd::sampler::{StalenessFilter, WeightEntry};
use issgd::store::{Message, MemoryStore, ParamsSnapshot, StoreError, StoreServer, TcpStoreClient, WeightStore, WorkerStatus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One layer whose flattened size is exactly 1 MiB of f32.
pub const STRESS_SHAPE: (u32, u32) = (1023, 256);

/// Deterministic payload for `version`; the last slot holds a checksum of the rest.
pub fn stress_payload(version: u64) -> Vec<f32> {
    let len = ParamsSnapshot::expected_len(&[STRESS_SHAPE]);
    let mut v: Vec<f32> = (0..len - 1).map(|i| ((version as usize * 7919 + i * 31) % 65_521) as f32).collect();
    v.push(checksum(&v));
    v
}

pub fn checksum(v: &[f32]) -> f32 {
    (v.iter().map(|&x| x as u64).fold(0u64, |a, x| a.wrapping_mul(31).wrapping_add(x)) % 65_521) as f32
}

/// A snapshot is intact when its checksum holds and its body matches its version.
pub fn snapshot_intact(s: &ParamsSnapshot) -> bool {
    let (body, sum) = s.params.split_at(s.params.len() - 1);
    s.shapes == [STRESS_SHAPE] && checksum(body) == sum[0] && s.params == stress_payload(s.version)
}

#[derive(Debug, Default)]
pub struct StressReport {
    pub writes_accepted: usize,
    pub writes_rejected_stale: usize,
    pub reads: usize,
    pub torn: usize,
    pub versions_went_backwards: usize,
}

/// `clients` threads each alternate 1 MiB parameter writes and reads against
/// one TCP store for `rounds` rounds.
pub fn torn_write_stress(clients: usize, rounds: usize) -> Result<StressReport, StoreError> {
    let server = StoreServer::bind("127.0.0.1:0", MemoryStore::new(None))?.spawn()?;
    let addr = server.addr();
    let handles: Vec<_> = (0..clients)
        .map(|id| {
            thread::spawn(move || -> Result<StressReport, StoreError> {
                let mut c = TcpStoreClient::connect(addr)?;
                let mut r = StressReport::default();
                let mut last_seen = 0;
                for round in 0..rounds {
                    let version = (round * clients + id + 1) as u64;
                    let snap = ParamsSnapshot { version, shapes: vec![STRESS_SHAPE], params: stress_payload(version) };
                    match c.put_params(snap) {
                        Ok(()) => r.writes_accepted += 1,
                        Err(e) if e.code() == Some(issgd::store::ErrorCode::StaleVersion) => r.writes_rejected_stale += 1,
                        Err(e) => return Err(e),
                    }
                    if let Some(s) = c.get_params()? {
                        r.reads += 1;
                        if !snapshot_intact(&s) {
                            r.torn += 1;
                        }
                        if s.version < last_seen {
                            r.versions_went_backwards += 1;
                        }
                        last_seen = s.version;
                    }
                }
                Ok(r)
            })
        })
        .collect();
    let mut total = StressReport::default();
    for h in handles {
        let r = h.join().expect("stress client panicked")?;
        total.writes_accepted += r.writes_accepted;
        total.writes_rejected_stale += r.writes_rejected_stale;
        total.reads += r.reads;
        total.torn += r.torn;
        total.versions_went_backwards += r.versions_went_backwards;
    }
    server.shutdown();
    Ok(total)
}

pub const MESSAGE_KINDS: usize = 11;

/// Random message of kind `k` (0..MESSAGE_KINDS).
pub fn random_message(k: usize, rng: &mut ChaCha8Rng) -> Message {
    let small = |rng: &mut ChaCha8Rng| rng.random_range(0..40usize);
    let float = |rng: &mut ChaCha8Rng| -> f64 {
        match rng.random_range(0..4) {
            0 => 0.0,
            1 => rng.random_range(-1e6..1e6),
            2 => rng.random::<f64>() * 10f64.powi(rng.random_range(-300..300)),
            _ => rng.random::<f64>(),
        }
    };
    match k {
        0 | 2 => {
            let layers = rng.random_range(0..4);
            let shapes: Vec<(u32, u32)> =
                (0..layers).map(|_| (rng.random_range(1..6u32), rng.random_range(1..6u32))).collect();
            let len = ParamsSnapshot::expected_len(&shapes);
            let params = (0..len).map(|_| rng.random_range(-10.0f32..10.0)).collect();
            let snap = ParamsSnapshot { version: rng.random(), shapes, params };
            if k == 0 { Message::PutParams(snap) } else { Message::Params(snap) }
        }
        1 => Message::GetParams,
        3 => Message::PutWeights {
            param_version: rng.random(),
            entries: (0..small(rng)).map(|_| (rng.random(), float(rng).abs())).collect(),
        },
        4 => Message::GetWeights(match rng.random_range(0..3) {
            0 => StalenessFilter::All,
            1 => StalenessFilter::MaxAge(float(rng).abs()),
            _ => StalenessFilter::ExactVersion(rng.random()),
        }),
        5 => Message::Weights(
            (0..small(rng))
                .map(|_| WeightEntry {
                    index: rng.random::<u32>() as usize,
                    weight: float(rng).abs(),
                    param_version: rng.random(),
                    timestamp: float(rng).abs(),
                })
                .collect(),
        ),
        6 => Message::PutWorkerStatus(WorkerStatus { worker_id: rng.random(), scored_version: rng.random() }),
        7 => Message::GetWorkerStatus,
        8 => Message::WorkerStatuses(
            (0..small(rng)).map(|_| WorkerStatus { worker_id: rng.random(), scored_version: rng.random() }).collect(),
        ),
        9 => Message::Ok,
        _ => Message::Error {
            code: rng.random(),
            text: (0..small(rng)).map(|_| rng.random_range('a'..='z')).chain(['é', '→']).collect(),
        },
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scripted exact-mode worker: waits for each new parameter version, sleeps
/// `delay`, writes unit weights for its shard and reports the version.
pub fn scripted_worker(
    addr: std::net::SocketAddr,
    id: u32,
    of: usize,
    population: usize,
    delay: std::time::Duration,
    stop: Arc<AtomicBool>,
) -> thread::JoinHandle<Result<usize, StoreError>> {
    thread::spawn(move || {
        let mut c = TcpStoreClient::connect(addr)?;
        let mut scored = 0;
        let mut last = 0;
        while !stop.load(Ordering::Relaxed) {
            match c.get_params()? {
                Some(p) if p.version != last => {
                    thread::sleep(delay);
                    let entries: Vec<(usize, f64)> = (id as usize..population).step_by(of).map(|i| (i, 1.0)).collect();
                    c.put_weights(p.version, &entries)?;
                    c.put_worker_status(id, p.version)?;
                    last = p.version;
                    scored += 1;
                }
                _ => thread::sleep(std::time::Duration::from_millis(1)),
            }
        }
        Ok(scored)
    })
}
