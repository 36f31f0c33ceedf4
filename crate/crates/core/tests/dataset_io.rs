//! Dataset files on disk and measured properties of the synthetic task.

use std::fs;

use issgd::actors::{audit_norms, master_step};
use issgd::dataset::{load_dataset, save_dataset, synth_dataset, Dataset, DatasetError, Splits, SynthSpec};
use issgd::nn::{LayerSpec, Matrix, ModelParams};
use issgd::sampler::Proposal;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn save_then_load_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.txt");
    let ds = synth_dataset(&SynthSpec { n: 300, dims: 7, classes: 4, difficulty_tail: 0.3, seed: 8 }).unwrap();
    save_dataset(&ds, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), ds);
    let header = fs::read_to_string(&path).unwrap().lines().next().unwrap().to_owned();
    assert_eq!(header, "issgd-ds v1 300 7 4");
}

#[test]
fn single_example_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.txt");
    let features = Matrix::from_vec(1, 3, vec![0.1, -2.5e-7, 3.0]).unwrap();
    let splits = Splits { train: vec![0], valid: vec![], test: vec![] };
    let ds = Dataset::new(features, vec![1], 2, splits).unwrap();
    save_dataset(&ds, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), ds);
}

#[test]
fn missing_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(&dir.path().join("absent.txt")), Err(DatasetError::Io { .. })));
}

#[test]
fn malformed_rows_report_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    fs::write(&path, "issgd-ds v1 3 2 2\n0,1.0,2.0\n1,1.0,oops\n0,0.0,0.0\n").unwrap();
    match load_dataset(&path) {
        Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    fs::write(&path, "issgd-ds v2 3 2 2\n").unwrap();
    assert!(matches!(load_dataset(&path), Err(DatasetError::Parse { line: 1, .. })));
    fs::write(&path, "issgd-ds v1 2 2 2\n0,1.0,2.0\n").unwrap();
    assert!(matches!(load_dataset(&path), Err(DatasetError::Parse { .. })));
    fs::write(&path, "issgd-ds v1 1 2 2\n5,1.0,2.0\n").unwrap();
    assert!(matches!(load_dataset(&path), Err(DatasetError::Parse { line: 2, .. })));
}

#[test]
fn partial_split_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.txt");
    let ds = synth_dataset(&SynthSpec { n: 50, dims: 2, classes: 2, difficulty_tail: 0.0, seed: 1 }).unwrap();
    save_dataset(&ds, &path).unwrap();
    fs::remove_file(dir.path().join("ds.txt.valid")).unwrap();
    assert!(load_dataset(&path).is_err());
}

/// Per-example gradient norms on the training set after 300 plain SGD steps.
fn norms_after_training(tail: f64) -> Vec<f64> {
    let ds = synth_dataset(&SynthSpec { n: 3000, dims: 16, classes: 5, difficulty_tail: tail, seed: 21 }).unwrap();
    let train = ds.train();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = ModelParams::init(&LayerSpec::chain(&[16, 32, 5]), &mut rng).unwrap();
    let uniform = Proposal::uniform(train.len()).unwrap();
    for _ in 0..300 {
        master_step(&mut params, &uniform, &train, 0.05, 64, &mut rng).unwrap();
    }
    let all: Vec<usize> = (0..train.len()).collect();
    audit_norms(&params, &train, &all, 256).unwrap().0
}

fn coefficient_of_variation(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

fn top_decile_share(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let k = s.len().div_ceil(10);
    s[..k].iter().sum::<f64>() / s.iter().sum::<f64>()
}

#[test]
fn difficulty_tail_concentrates_gradient_norms() {
    let easy = norms_after_training(0.0);
    let hard = norms_after_training(0.2);
    let (cv_easy, cv_hard) = (coefficient_of_variation(&easy), coefficient_of_variation(&hard));
    let (top_easy, top_hard) = (top_decile_share(&easy), top_decile_share(&hard));
    eprintln!("cv {cv_easy:.3} vs {cv_hard:.3}, top-10% share {top_easy:.3} vs {top_hard:.3}");
    assert!(top_hard > top_easy);
    assert!(cv_easy < cv_hard);
}
