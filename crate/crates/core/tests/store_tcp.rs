//! The TCP store against the in-memory backend, under concurrency and in
//! the exact-mode barrier.

mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use issgd::actors::{ExternalWorkers, Master, MasterConfig, Mode};
use issgd::dataset::{synth_dataset, SynthSpec};
use issgd::sampler::{StalenessFilter, WeightEntry};
use issgd::store::{
    wire, ErrorCode, ManualClock, MemoryStore, ParamsSnapshot, StoreError, StoreServer, TcpStoreClient, WeightStore,
    WorkerStatus,
};
use rand::Rng;

#[test]
fn concurrent_megabyte_writes_are_never_torn() {
    let report = common::torn_write_stress(4, 12).unwrap();
    assert_eq!(report.torn, 0);
    assert_eq!(report.versions_went_backwards, 0);
    assert_eq!(report.writes_accepted + report.writes_rejected_stale, 48);
    assert!(report.writes_accepted > 0);
    assert_eq!(report.reads, 48);
}

#[test]
fn random_messages_round_trip() {
    let mut rng = common::rng(9);
    for k in 0..common::MESSAGE_KINDS {
        for _ in 0..200 {
            let msg = common::random_message(k, &mut rng);
            let bytes = wire::encode(&msg);
            assert_eq!(wire::decode(&bytes).unwrap(), msg);
        }
    }
}

#[derive(Debug, PartialEq)]
enum Outcome {
    Unit,
    Params(Option<ParamsSnapshot>),
    Weights(Vec<WeightEntry<f64>>),
    Status(Vec<WorkerStatus>),
    Failed(Option<ErrorCode>),
}

fn apply<S: WeightStore>(s: &mut S, op: &Op) -> Outcome {
    let r: Result<Outcome, StoreError> = match op {
        Op::PutParams(snap) => s.put_params(snap.clone()).map(|_| Outcome::Unit),
        Op::GetParams => s.get_params().map(|p| Outcome::Params(p.map(|p| (*p).clone()))),
        Op::PutWeights(v, e) => s.put_weights(*v, e).map(|_| Outcome::Unit),
        Op::GetWeights(f) => s.get_weights(*f).map(Outcome::Weights),
        Op::PutStatus(id, v) => s.put_worker_status(*id, *v).map(|_| Outcome::Unit),
        Op::GetStatus => s.get_worker_status().map(Outcome::Status),
    };
    r.unwrap_or_else(|e| Outcome::Failed(e.code()))
}

#[derive(Debug, Clone)]
enum Op {
    PutParams(ParamsSnapshot),
    GetParams,
    PutWeights(u64, Vec<(usize, f64)>),
    GetWeights(StalenessFilter),
    PutStatus(u32, u64),
    GetStatus,
}

fn random_op(rng: &mut impl Rng, population: usize) -> Op {
    match rng.random_range(0..6) {
        0 => {
            let shapes = vec![(2, 3)];
            let params = (0..9).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            Op::PutParams(ParamsSnapshot { version: rng.random_range(0..30), shapes, params })
        }
        1 => Op::GetParams,
        2 => {
            let n = rng.random_range(0..6);
            let entries = (0..n)
                .map(|_| {
                    let i = rng.random_range(0..population + 2);
                    let w = if rng.random_bool(0.05) { -1.0 } else { rng.random_range(0.0..5.0) };
                    (i, w)
                })
                .collect();
            Op::PutWeights(rng.random_range(0..30), entries)
        }
        3 => Op::GetWeights(match rng.random_range(0..3) {
            0 => StalenessFilter::All,
            1 => StalenessFilter::MaxAge(rng.random_range(0.0..5.0)),
            _ => StalenessFilter::ExactVersion(rng.random_range(0..30)),
        }),
        4 => Op::PutStatus(rng.random_range(0..4), rng.random_range(0..30)),
        _ => Op::GetStatus,
    }
}

#[test]
fn tcp_backend_matches_memory_backend() {
    let population = 20;
    let local_clock = ManualClock::new(0.0);
    let remote_clock = ManualClock::new(0.0);
    let mut local = MemoryStore::with_clock(Some(population), Arc::new(local_clock.clone()));
    let remote_store = MemoryStore::with_clock(Some(population), Arc::new(remote_clock.clone()));
    let server = StoreServer::bind("127.0.0.1:0", remote_store).unwrap().spawn().unwrap();
    let mut remote = TcpStoreClient::connect(server.addr()).unwrap();
    let mut rng = common::rng(77);
    for step in 0..2000 {
        let op = random_op(&mut rng, population);
        let a = apply(&mut local, &op);
        let b = apply(&mut remote, &op);
        assert_eq!(a, b, "step {step}: {op:?}");
        let dt = rng.random_range(0.0..0.5);
        local_clock.advance(dt);
        remote_clock.advance(dt);
    }
}

#[test]
fn barrier_waits_for_every_scripted_worker() {
    let data = synth_dataset(&SynthSpec { n: 90, dims: 4, classes: 3, difficulty_tail: 0.2, seed: 5 }).unwrap();
    let population = data.train().len();
    let server = StoreServer::bind("127.0.0.1:0", MemoryStore::new(Some(population))).unwrap().spawn().unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let k = 3;
    let workers: Vec<_> = (0..k)
        .map(|id| {
            let delay = Duration::from_millis(5 * (id as u64 + 1));
            common::scripted_worker(server.addr(), id, k as usize, population, delay, stop.clone())
        })
        .collect();

    let cfg = MasterConfig {
        mode: Mode::IssgdExact,
        batch_size: 4,
        hidden_layers: vec![5],
        num_workers: k as usize,
        barrier_timeout: Duration::from_secs(20),
        smoothing: 0.0,
        ..MasterConfig::default()
    };
    let client = TcpStoreClient::connect(server.addr()).unwrap();
    let mut master = Master::new(cfg, Some(client), &data).unwrap();
    let mut driver = ExternalWorkers { poll: Duration::from_millis(1) };
    for round in 1..=5u64 {
        master.push_params().unwrap();
        master.barrier(&mut driver).unwrap();
        let statuses = master.store_mut().unwrap().get_worker_status().unwrap();
        assert_eq!(statuses.len(), k as usize);
        assert!(statuses.iter().all(|s| s.scored_version == round), "{statuses:?}");
        master.refresh_proposal().unwrap();
        let p = master.proposal().unwrap();
        assert_eq!(p.passing(), population);
        master.step().unwrap();
    }
    stop.store(true, Ordering::Relaxed);
    for w in workers {
        assert_eq!(w.join().unwrap().unwrap(), 5);
    }
}
