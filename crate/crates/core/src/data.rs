//! Datasets, file ingestion (IDX and CSV), label corruption and the synthetic
//! generators used when real data is not at hand.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rng_stream, Mat};

const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    Unsplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    /// Class ids in `[0, num_classes)`.
    Classes { ids: Vec<usize>, num_classes: usize },
    /// Real-valued targets, one row per example.
    Targets(Mat),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes { ids, .. } => ids.len(),
            Labels::Targets(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of model outputs these labels call for.
    pub fn outputs(&self) -> usize {
        match self {
            Labels::Classes { num_classes, .. } => *num_classes,
            Labels::Targets(m) => m.cols(),
        }
    }

    fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Classes { ids, num_classes } => Labels::Classes {
                ids: idx.iter().map(|&i| ids[i]).collect(),
                num_classes: *num_classes,
            },
            Labels::Targets(m) => Labels::Targets(m.select_rows(idx)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Mat,
    pub labels: Labels,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Mat, labels: Labels, split: Split) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape("Dataset::new", format!("{} feature rows", features.rows()), format!("{} labels", labels.len())));
        }
        if let Labels::Classes { ids, num_classes } = &labels {
            if let Some(bad) = ids.iter().find(|&&c| c >= *num_classes) {
                return Err(Error::Precondition(format!("class id {bad} outside [0, {num_classes})")));
            }
        }
        Ok(Dataset { features, labels, split })
    }

    pub fn classes(features: Mat, ids: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        Dataset::new(features, Labels::Classes { ids, num_classes }, split)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_outputs(&self) -> usize {
        self.labels.outputs()
    }

    pub fn class_ids(&self) -> Option<&[usize]> {
        match &self.labels {
            Labels::Classes { ids, .. } => Some(ids),
            Labels::Targets(_) => None,
        }
    }

    pub fn select(&self, idx: &[usize], split: Split) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: self.labels.select(idx),
            split,
        }
    }

    /// Stacks `other` below `self`.
    pub fn concat(&self, other: &Dataset, split: Split) -> Result<Dataset> {
        if self.num_features() != other.num_features() {
            return Err(Error::shape("Dataset::concat", self.num_features(), other.num_features()));
        }
        let mut data = self.features.as_slice().to_vec();
        data.extend_from_slice(other.features.as_slice());
        let features = Mat::from_vec(self.len() + other.len(), self.num_features(), data)?;
        let labels = match (&self.labels, &other.labels) {
            (Labels::Classes { ids: a, num_classes: ka }, Labels::Classes { ids: b, num_classes: kb }) => Labels::Classes {
                ids: a.iter().chain(b).copied().collect(),
                num_classes: (*ka).max(*kb),
            },
            (Labels::Targets(a), Labels::Targets(b)) if a.cols() == b.cols() => {
                let mut d = a.as_slice().to_vec();
                d.extend_from_slice(b.as_slice());
                Labels::Targets(Mat::from_vec(a.rows() + b.rows(), a.cols(), d)?)
            }
            _ => return Err(Error::Precondition("cannot concatenate datasets with different label kinds".into())),
        };
        Dataset::new(features, labels, split)
    }
}

fn data_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Data {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn read_be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| data_err(path, format!("header truncated at byte {at}")))
}

/// Reads an IDX image file (magic `0x00000803`) into an `n × (rows·cols)` matrix scaled to `[0,1]`.
pub fn read_idx_images(path: &Path) -> Result<Mat> {
    let bytes = fs::read(path)?;
    let magic = read_be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(data_err(path, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = read_be_u32(&bytes, 4, path)? as usize;
    let rows = read_be_u32(&bytes, 8, path)? as usize;
    let cols = read_be_u32(&bytes, 12, path)? as usize;
    let expected = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(data_err(path, format!("expected {expected} payload bytes, found {}", payload.len())));
    }
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Mat::from_vec(n, rows * cols, data)
}

/// Reads an IDX label file (magic `0x00000801`).
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    let magic = read_be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(data_err(path, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = read_be_u32(&bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(data_err(path, format!("expected {n} payload bytes, found {}", payload.len())));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

pub fn ingest_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let features = read_idx_images(images)?;
    let ids = read_idx_labels(labels)?;
    let k = ids.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::classes(features, ids, k, Split::Unsplit)
}

/// Reads a CSV file whose first column is an integer class label and the rest are features.
/// A header row is detected (and skipped) when its first field is not numeric.
pub fn ingest_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data_err(path, e.to_string()))?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut width = None;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| data_err(path, e.to_string()))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let first = rec.get(0).unwrap_or("");
        if line == 0 && first.parse::<f64>().is_err() {
            continue;
        }
        let n_feat = rec.len() - 1;
        match width {
            None => width = Some(n_feat),
            Some(w) if w != n_feat => {
                return Err(data_err(path, format!("ragged row {}: {} fields, expected {}", line + 1, rec.len(), w + 1)));
            }
            _ => {}
        }
        let label: f64 = first.parse().map_err(|_| data_err(path, format!("row {}: bad label {first:?}", line + 1)))?;
        if label < 0.0 || label.fract() != 0.0 {
            return Err(data_err(path, format!("row {}: label {label} is not a class id", line + 1)));
        }
        ids.push(label as usize);
        for field in rec.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| data_err(path, format!("row {}: bad value {field:?}", line + 1)))?;
            data.push(v);
        }
    }
    let width = width.ok_or_else(|| data_err(path, "no data rows"))?;
    let features = Mat::from_vec(ids.len(), width, data)?;
    let k = ids.iter().max().map_or(0, |m| m + 1);
    Dataset::classes(features, ids, k, Split::Unsplit)
}

/// Replaces the labels of `⌊fraction·n⌋` uniformly chosen examples with a uniformly
/// chosen different class. Returns the corrupted dataset and the sorted corrupted indices.
pub fn corrupt_labels(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Precondition(format!("corruption fraction {fraction} outside [0,1]")));
    }
    let Labels::Classes { ids, num_classes } = &ds.labels else {
        return Err(Error::Precondition("label corruption needs class labels".into()));
    };
    if *num_classes < 2 {
        return Err(Error::Precondition("label corruption needs at least 2 classes".into()));
    }
    let n = ids.len();
    let count = (fraction * n as f64).floor() as usize;
    let mut rng = rng_stream(seed, 0xC0);
    let mut picked: Vec<usize> = index::sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();
    let mut new_ids = ids.clone();
    for &i in &picked {
        let r = rng.random_range(0..num_classes - 1);
        new_ids[i] = if r < ids[i] { r } else { r + 1 };
    }
    let out = Dataset {
        features: ds.features.clone(),
        labels: Labels::Classes {
            ids: new_ids,
            num_classes: *num_classes,
        },
        split: ds.split,
    };
    Ok((out, picked))
}

/// Picks `n` examples with (as far as possible) equal counts per class, shuffled.
pub fn balanced_subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let Labels::Classes { ids, num_classes } = &ds.labels else {
        return Err(Error::Precondition("balanced subset needs class labels".into()));
    };
    let mut rng = rng_stream(seed, 0xBA);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); *num_classes];
    for (i, &c) in ids.iter().enumerate() {
        by_class[c].push(i);
    }
    let present = by_class.iter().filter(|v| !v.is_empty()).count().max(1);
    let per = n / present;
    let mut extra = n - per * present;
    let mut chosen = Vec::with_capacity(n);
    for members in by_class.iter().filter(|v| !v.is_empty()) {
        let want = per + usize::from(extra > 0);
        extra = extra.saturating_sub(1);
        if members.len() < want {
            return Err(Error::Precondition(format!("class has {} examples, need {want}", members.len())));
        }
        let pick = index::sample(&mut rng, members.len(), want);
        chosen.extend(pick.iter().map(|j| members[j]));
    }
    shuffle(&mut chosen, &mut rng);
    Ok(ds.select(&chosen, Split::Unsplit))
}

fn shuffle(v: &mut [usize], rng: &mut crate::numerics::Rng) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

/// Splits into consecutive train / validation / test blocks.
pub fn split3(ds: &Dataset, n_train: usize, n_val: usize) -> Result<(Dataset, Dataset, Dataset)> {
    let n = ds.len();
    if n_train + n_val > n {
        return Err(Error::Precondition(format!("split {n_train}+{n_val} exceeds {n} examples")));
    }
    let tr: Vec<usize> = (0..n_train).collect();
    let va: Vec<usize> = (n_train..n_train + n_val).collect();
    let te: Vec<usize> = (n_train + n_val..n).collect();
    Ok((ds.select(&tr, Split::Train), ds.select(&va, Split::Validation), ds.select(&te, Split::Test)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    pub noise: f64,
}

/// Balanced isotropic Gaussian blobs. Class means are fixed by `seed`; examples by
/// `(seed, stream)` so several splits can share the same class geometry.
pub fn gaussian_blobs(spec: &BlobSpec, n: usize, seed: u64, stream: u64) -> Result<Dataset> {
    let means = blob_means(spec, seed);
    let mut rng = rng_stream(seed, 0x1000 + stream);
    let mut ids: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    shuffle(&mut ids, &mut rng);
    let mut data = Vec::with_capacity(n * spec.dim);
    for &c in &ids {
        for &mu in &means[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(mu + spec.noise * z);
        }
    }
    Dataset::classes(Mat::from_vec(n, spec.dim, data)?, ids, spec.classes, Split::Unsplit)
}

fn blob_means(spec: &BlobSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_stream(seed, 0xB10B);
    (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| spec.separation * x / norm).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub tasks: usize,
    pub clusters: usize,
    pub dim: usize,
    /// Size of each cluster's own direction relative to the direction all clusters share.
    pub cluster_spread: f64,
    /// Spread of task weight vectors around their cluster centre, relative to the centre norm.
    pub task_spread: f64,
    /// Standard deviation of the logit noise.
    pub label_noise: f64,
}

/// Related binary tasks on shared Gaussian inputs: task `k` belongs to cluster
/// `k mod clusters` and its weight vector is the cluster centre plus a small
/// perturbation. Cluster centres are a common direction plus
/// `cluster_spread` times a direction of their own. Labels form an `n × tasks` 0/1 target matrix.
pub struct TaskGenerator {
    spec: TaskSpec,
    weights: Vec<Vec<f64>>,
    seed: u64,
}

impl TaskGenerator {
    pub fn new(spec: TaskSpec, seed: u64) -> Self {
        let mut rng = rng_stream(seed, 0x7A5C);
        let dim = spec.dim;
        let scale = (dim as f64).sqrt();
        let draw = |rng: &mut _| -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(rng)).map(|z: f64| z * 2.0 / scale).collect() };
        let own: Vec<Vec<f64>> = (0..spec.clusters).map(|_| draw(&mut rng)).collect();
        let shared = draw(&mut rng);
        let centres: Vec<Vec<f64>> = own
            .iter()
            .map(|o| {
                let v: Vec<f64> = shared.iter().zip(o).map(|(s, o)| s + spec.cluster_spread * o).collect();
                let norm = crate::numerics::norm2(&v).max(f64::MIN_POSITIVE);
                v.iter().map(|x| x * 2.0 / norm).collect()
            })
            .collect();
        let weights = (0..spec.tasks)
            .map(|k| {
                let c = &centres[k % spec.clusters];
                c.iter()
                    .map(|&cj| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        cj + spec.task_spread * 2.0 * z / scale
                    })
                    .collect()
            })
            .collect();
        TaskGenerator { spec, weights, seed }
    }

    pub fn cluster_of(&self, task: usize) -> usize {
        task % self.spec.clusters
    }

    pub fn sample(&self, n: usize, stream: u64) -> Result<Dataset> {
        let mut rng = rng_stream(self.seed, 0x2000 + stream);
        let (dim, k) = (self.spec.dim, self.spec.tasks);
        let mut x = Vec::with_capacity(n * dim);
        let mut y = Vec::with_capacity(n * k);
        for _ in 0..n {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            for w in &self.weights {
                let z: f64 = StandardNormal.sample(&mut rng);
                let logit = crate::numerics::dot(w, &row) + self.spec.label_noise * z;
                y.push(if logit > 0.0 { 1.0 } else { 0.0 });
            }
            x.extend(row);
        }
        Dataset::new(Mat::from_vec(n, dim, x)?, Labels::Targets(Mat::from_vec(n, k, y)?), Split::Unsplit)
    }
}

/// Sorted set difference helper used by the cleaning bookkeeping.
pub fn complement(n: usize, removed: &BTreeSet<usize>) -> Vec<usize> {
    (0..n).filter(|i| !removed.contains(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_images(path: &Path, n: u32, rows: u32, cols: u32, payload: usize) {
        let mut f = fs::File::create(path).unwrap();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            f.write_all(&v.to_be_bytes()).unwrap();
        }
        f.write_all(&vec![255u8; payload]).unwrap();
    }

    fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut f = fs::File::create(path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
    }

    #[test]
    fn idx_images_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        write_idx_images(&img, 10, 28, 28, 10 * 784);
        write_idx_labels(&lab, &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let ds = ingest_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.num_features(), 784);
        assert_eq!(ds.features[(3, 5)], 1.0);
        assert_eq!(ds.class_ids().unwrap()[7], 7);
    }

    #[test]
    fn idx_truncated_payload_reports_counts() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        write_idx_images(&img, 10, 28, 28, 1000);
        let err = read_idx_images(&img).unwrap_err().to_string();
        assert!(err.contains("7840") && err.contains("1000"), "{err}");
    }

    #[test]
    fn idx_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let lab = dir.path().join("lab.idx");
        write_idx_labels(&lab, &[1, 2]);
        assert!(read_idx_images(&lab).is_err());
    }

    #[test]
    fn csv_single_row_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "1,0.5,0.25\n").unwrap();
        let ds = ingest_csv(&p).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.class_ids().unwrap(), &[1]);
        assert_eq!(ds.features.row(0), &[0.5, 0.25]);

        fs::write(&p, "label,x,y\n0,1,2\n2,3,4\n").unwrap();
        let ds = ingest_csv(&p).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_outputs(), 3);
    }

    #[test]
    fn csv_ragged_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "0,1,2\n1,3\n").unwrap();
        assert!(ingest_csv(&p).unwrap_err().to_string().contains("ragged"));
    }

    fn ten_class(n: usize) -> Dataset {
        let spec = BlobSpec { classes: 10, dim: 3, separation: 2.0, noise: 1.0 };
        gaussian_blobs(&spec, n, 5, 0).unwrap()
    }

    #[test]
    fn corruption_counts_and_changes_labels() {
        let ds = ten_class(5000);
        let (bad, idx) = corrupt_labels(&ds, 0.5, 11).unwrap();
        assert_eq!(idx.len(), 2500);
        let a = ds.class_ids().unwrap();
        let b = bad.class_ids().unwrap();
        for &i in &idx {
            assert_ne!(a[i], b[i]);
        }
        let changed = a.iter().zip(b).filter(|(x, y)| x != y).count();
        assert_eq!(changed, 2500);
        let (again, idx2) = corrupt_labels(&ds, 0.5, 11).unwrap();
        assert_eq!(idx, idx2);
        assert_eq!(again, bad);
    }

    #[test]
    fn zero_corruption_is_identity() {
        let ds = ten_class(50);
        let (same, idx) = corrupt_labels(&ds, 0.0, 1).unwrap();
        assert!(idx.is_empty());
        assert_eq!(same, ds);
    }

    #[test]
    fn corruption_needs_two_classes() {
        let ds = Dataset::classes(Mat::zeros(3, 1), vec![0, 0, 0], 1, Split::Train).unwrap();
        assert!(corrupt_labels(&ds, 0.5, 1).is_err());
    }

    #[test]
    fn balanced_subset_counts() {
        let ds = ten_class(1000);
        let sub = balanced_subset(&ds, 200, 3).unwrap();
        let mut counts = [0usize; 10];
        for &c in sub.class_ids().unwrap() {
            counts[c] += 1;
        }
        assert!(counts.iter().all(|&c| c == 20));
    }
}
