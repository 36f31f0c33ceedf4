//! Labeled datasets: synthetic generation, train/valid/test splits and the
//! plain-text file format.
//!
//! File layout: a header line `issgd-ds v1 N D C`, then one row per example,
//! `label,f1,...,fD`. Splits live next to the data file as `<path>.train`,
//! `<path>.valid` and `<path>.test`, one index per line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nn::Matrix;

const HEADER_TAG: &str = "issgd-ds";
const HEADER_VERSION: &str = "v1";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Features and labels of one split, rows aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Matrix<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn rows(&self, indices: &[usize]) -> (Matrix<f64>, Vec<usize>) {
        (self.features.select_rows(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Shuffled split: `test_fraction` of all examples for test, then 5% of
    /// the remaining pool for validation, the rest for training.
    pub fn random(n: usize, test_fraction: f64, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5917));
        let n_test = (n as f64 * test_fraction).round() as usize;
        let pool = n - n_test;
        let n_valid = (pool as f64 * 0.05).round() as usize;
        let test = idx[..n_test].to_vec();
        let valid = idx[n_test..n_test + n_valid].to_vec();
        let train = idx[n_test + n_valid..].to_vec();
        Self { train, valid, test }
    }

    fn validate(&self, n: usize) -> Result<(), DatasetError> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.valid).chain(&self.test) {
            if i >= n {
                return Err(DatasetError::Invalid(format!("split index {i} out of range for {n} examples")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(DatasetError::Invalid(format!("example {i} appears in more than one split")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub splits: Splits,
}

impl Dataset {
    pub fn new(features: Matrix<f64>, labels: Vec<usize>, num_classes: usize, splits: Splits) -> Result<Self, DatasetError> {
        if features.rows() != labels.len() {
            return Err(DatasetError::Invalid(format!("{} rows but {} labels", features.rows(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DatasetError::Invalid(format!("label {l} not below {num_classes} classes")));
        }
        if !features.all_finite() {
            return Err(DatasetError::Invalid("non-finite feature".into()));
        }
        splits.validate(labels.len())?;
        Ok(Self { features, labels, num_classes, splits })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn train(&self) -> LabeledSet {
        self.subset(&self.splits.train)
    }

    pub fn valid(&self) -> LabeledSet {
        self.subset(&self.splits.valid)
    }

    pub fn test(&self) -> LabeledSet {
        self.subset(&self.splits.test)
    }
}

/// Parameters of the synthetic Gaussian-cluster task.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub dims: usize,
    pub classes: usize,
    /// Fraction of examples placed close to a decision boundary.
    pub difficulty_tail: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { n: 10_000, dims: 32, classes: 10, difficulty_tail: 0.2, seed: 0 }
    }
}

/// Distance of every class centre from the origin.
const CENTRE_RADIUS: f64 = 4.0;
const EASY_NOISE: f64 = 0.5;
const HARD_NOISE: f64 = 0.3;
/// Hard examples sit this fraction of the way towards a rival centre.
const HARD_SHIFT: (f64, f64) = (0.3, 0.45);
const TEST_FRACTION: f64 = 0.1;

/// Gaussian clusters around random class centres. A `difficulty_tail`
/// fraction of examples is moved towards a rival class centre, close to the
/// decision boundary, which gives the per-example gradient norms a heavy tail.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset, DatasetError> {
    if spec.n < 10 {
        return Err(DatasetError::InvalidSpec(format!("n = {} is below 10", spec.n)));
    }
    if spec.classes < 2 {
        return Err(DatasetError::InvalidSpec("at least two classes are required".into()));
    }
    if spec.dims == 0 {
        return Err(DatasetError::InvalidSpec("dims must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.difficulty_tail) {
        return Err(DatasetError::InvalidSpec(format!("difficulty_tail {} outside [0, 1]", spec.difficulty_tail)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centres: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dims).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x * CENTRE_RADIUS / norm).collect()
        })
        .collect();

    let mut data = Vec::with_capacity(spec.n * spec.dims);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let c = i % spec.classes;
        let hard = rng.random::<f64>() < spec.difficulty_tail;
        let (anchor, noise) = if hard {
            let mut rival = rng.random_range(0..spec.classes - 1);
            if rival >= c {
                rival += 1;
            }
            let t = rng.random_range(HARD_SHIFT.0..HARD_SHIFT.1);
            let a: Vec<f64> = centres[c].iter().zip(&centres[rival]).map(|(p, q)| p + t * (q - p)).collect();
            (a, HARD_NOISE)
        } else {
            (centres[c].clone(), EASY_NOISE)
        };
        for a in anchor {
            let z: f64 = rng.sample(StandardNormal);
            data.push(a + noise * z);
        }
        labels.push(c);
    }
    let features = Matrix::from_vec(spec.n, spec.dims, data).expect("sized by construction");
    let splits = Splits::random(spec.n, TEST_FRACTION, spec.seed);
    Dataset::new(features, labels, spec.classes, splits)
}

fn split_path(path: &Path, name: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(name);
    PathBuf::from(s)
}

fn write_indices(path: &Path, idx: &[usize]) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for i in idx {
        writeln!(w, "{i}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    writeln!(w, "{HEADER_TAG} {HEADER_VERSION} {} {} {}", ds.len(), ds.dims(), ds.num_classes).map_err(io_err(path))?;
    let mut line = String::new();
    for n in 0..ds.len() {
        line.clear();
        line.push_str(&ds.labels[n].to_string());
        for v in ds.features.row(n) {
            line.push(',');
            // shortest representation that parses back to the same f64
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    write_indices(&split_path(path, "train"), &ds.splits.train)?;
    write_indices(&split_path(path, "valid"), &ds.splits.valid)?;
    write_indices(&split_path(path, "test"), &ds.splits.test)
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn read_indices(path: &Path) -> Result<Vec<usize>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.trim().parse().map_err(|e| parse_err(path, i + 1, format!("bad index {l:?}: {e}"))))
        .collect()
}

/// Loads a dataset and its split files. When none of the split files exist a
/// default seeded split is derived; a partial set of split files is an error.
pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != HEADER_TAG || fields[1] != HEADER_VERSION {
        return Err(parse_err(path, 1, format!("expected `{HEADER_TAG} {HEADER_VERSION} N D C`, got {header:?}")));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|e| parse_err(path, 1, format!("bad {what} {s:?}: {e}")));
    let (n, d, c) = (num(fields[2], "N")?, num(fields[3], "D")?, num(fields[4], "C")?);

    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if labels.len() == n {
            return Err(parse_err(path, lineno, format!("more than the declared {n} rows")));
        }
        let mut parts = line.split(',');
        let label_s = parts.next().unwrap_or_default().trim();
        let label: usize = label_s.parse().map_err(|e| parse_err(path, lineno, format!("bad label {label_s:?}: {e}")))?;
        if label >= c {
            return Err(parse_err(path, lineno, format!("label {label} not below {c} classes")));
        }
        let before = data.len();
        for p in parts {
            let v: f64 = p.trim().parse().map_err(|e| parse_err(path, lineno, format!("bad feature {p:?}: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, lineno, "non-finite feature"));
            }
            data.push(v);
        }
        if data.len() - before != d {
            return Err(parse_err(path, lineno, format!("expected {d} features, found {}", data.len() - before)));
        }
        labels.push(label);
    }
    if labels.len() != n {
        return Err(parse_err(path, text.lines().count(), format!("declared {n} rows, found {}", labels.len())));
    }

    let split_files: Vec<PathBuf> = ["train", "valid", "test"].iter().map(|s| split_path(path, s)).collect();
    let present = split_files.iter().filter(|p| p.exists()).count();
    let splits = match present {
        0 => Splits::random(n, TEST_FRACTION, 0),
        3 => Splits {
            train: read_indices(&split_files[0])?,
            valid: read_indices(&split_files[1])?,
            test: read_indices(&split_files[2])?,
        },
        _ => return Err(DatasetError::Invalid(format!("only {present} of 3 split files next to {}", path.display()))),
    };
    let features = Matrix::from_vec(n, d, data).map_err(|e| DatasetError::Invalid(e.to_string()))?;
    Dataset::new(features, labels, c, splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_generation_is_deterministic() {
        let spec = SynthSpec { n: 200, dims: 5, classes: 3, difficulty_tail: 0.2, seed: 11 };
        assert_eq!(synth_dataset(&spec).unwrap(), synth_dataset(&spec).unwrap());
        let other = synth_dataset(&SynthSpec { seed: 12, ..spec.clone() }).unwrap();
        assert_ne!(other, synth_dataset(&spec).unwrap());
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(synth_dataset(&SynthSpec { n: 9, ..Default::default() }).is_err());
        assert!(synth_dataset(&SynthSpec { classes: 1, ..Default::default() }).is_err());
        assert!(synth_dataset(&SynthSpec { difficulty_tail: 1.5, ..Default::default() }).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let s = Splits::random(1000, 0.1, 3);
        assert_eq!(s.test.len(), 100);
        assert_eq!(s.valid.len(), 45);
        assert_eq!(s.train.len(), 855);
        let mut all: Vec<_> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn labels_cover_every_class() {
        let ds = synth_dataset(&SynthSpec { n: 100, dims: 3, classes: 4, difficulty_tail: 0.0, seed: 0 }).unwrap();
        for c in 0..4 {
            assert!(ds.labels.contains(&c));
        }
    }

    #[test]
    fn invalid_splits_rejected() {
        let m = Matrix::zeros(3, 1);
        let overlapping = Splits { train: vec![0, 1], valid: vec![1], test: vec![] };
        assert!(Dataset::new(m.clone(), vec![0, 1, 0], 2, overlapping).is_err());
        let oob = Splits { train: vec![5], valid: vec![], test: vec![] };
        assert!(Dataset::new(m, vec![0, 1, 0], 2, oob).is_err());
    }
}
