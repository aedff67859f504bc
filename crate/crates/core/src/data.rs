// Copyright 2026 The sdplab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Labeled datasets: synthetic generators, CSV ingestion, splits and batching.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{seeded_normal, Matrix, Rng};

/// Inputs (samples × features) with dense class labels `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    /// Validates the label range and that every class is represented.
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ds = Self::from_parts(inputs, labels, num_classes)?;
        if let Some(c) = ds.class_counts().iter().position(|&n| n == 0) {
            return Err(Error::invalid(format!("class {c} has no samples")));
        }
        Ok(ds)
    }

    /// Like [`LabeledDataset::new`] but allows classes that are absent from
    /// this particular subset (splits of a larger dataset).
    pub fn from_parts(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("a dataset needs at least 2 classes"));
        }
        if labels.len() != inputs.rows() {
            return Err(Error::invalid(format!(
                "{} labels for {} samples",
                labels.len(),
                inputs.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Isotropic Gaussian clusters around seeded random centers.
///
/// Centers are `center_spread · N(0, I)`; samples are written class by class.
pub fn gen_gaussian_blobs(
    rng: &mut Rng,
    num_classes: usize,
    samples_per_class: usize,
    dim: usize,
    center_spread: f64,
    cluster_std: f64,
) -> Result<LabeledDataset> {
    if num_classes < 2 || samples_per_class < 1 || dim < 1 {
        return Err(Error::invalid(format!(
            "blobs need >= 2 classes, >= 1 sample per class and dim >= 1 (got {num_classes}, {samples_per_class}, {dim})"
        )));
    }
    if !(cluster_std >= 0.0) || !(center_spread >= 0.0) {
        return Err(Error::invalid("blob spreads must be non-negative"));
    }
    let centers = seeded_normal(rng, num_classes, dim, 0.0, center_spread)?;
    let n = num_classes * samples_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        for _ in 0..samples_per_class {
            data.extend(centers.row(c).iter().map(|&mu| mu + cluster_std * rng.normal()));
            labels.push(c);
        }
    }
    LabeledDataset::new(Matrix::from_vec(n, dim, data)?, labels, num_classes)
}

/// Noise-free point of spiral `class` (0 or 1) at parameter `t ∈ [0, 1]`.
pub fn spiral_point(class: usize, t: f64) -> [f64; 2] {
    let theta = PI / 2.0 + 3.0 * PI * t;
    let radius = theta / (3.5 * PI);
    let sign = if class == 0 { 1.0 } else { -1.0 };
    [sign * radius * theta.cos(), sign * radius * theta.sin()]
}

/// Two interleaved 2-D spirals, the second a point reflection of the first.
pub fn gen_two_spirals(rng: &mut Rng, samples_per_class: usize, noise_std: f64) -> Result<LabeledDataset> {
    if samples_per_class < 2 {
        return Err(Error::invalid("two spirals need at least 2 samples per class"));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::invalid("noise_std must be non-negative"));
    }
    let mut data = Vec::with_capacity(4 * samples_per_class);
    let mut labels = Vec::with_capacity(2 * samples_per_class);
    for class in 0..2 {
        for i in 0..samples_per_class {
            let t = i as f64 / (samples_per_class - 1) as f64;
            let [x, y] = spiral_point(class, t);
            data.push(x + noise_std * rng.normal());
            data.push(y + noise_std * rng.normal());
            labels.push(class);
        }
    }
    LabeledDataset::new(Matrix::from_vec(2 * samples_per_class, 2, data)?, labels, 2)
}

/// Reads a headered CSV; every column except `label_column` is a feature.
///
/// Labels that are exactly the integers `0..C` are kept as-is; anything else
/// is mapped to dense ids in order of first appearance.
pub fn load_csv(path: &Path, label_column: &str) -> Result<LabeledDataset> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::invalid(format!("label column '{label_column}' not in header")))?;
    let dim = headers.len() - 1;

    let mut data = Vec::new();
    let mut raw_labels = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        // header is line 1
        let line = row_no + 2;
        for (i, cell) in record.iter().enumerate() {
            if i == label_idx {
                raw_labels.push(cell.trim().to_string());
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| Error::NonNumericCell {
                line,
                column: headers[i].to_string(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumericCell {
                    line,
                    column: headers[i].to_string(),
                    value: cell.to_string(),
                });
            }
            data.push(v);
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }

    let (labels, num_classes) = densify_labels(&raw_labels);
    let n = raw_labels.len();
    LabeledDataset::new(Matrix::from_vec(n, dim, data)?, labels, num_classes)
}

fn densify_labels(raw: &[String]) -> (Vec<usize>, usize) {
    let ints: Option<Vec<usize>> = raw.iter().map(|s| s.parse::<usize>().ok()).collect();
    if let Some(ints) = ints {
        let max = ints.iter().copied().max().unwrap_or(0);
        let mut seen = vec![false; max + 1];
        for &i in &ints {
            seen[i] = true;
        }
        if seen.iter().all(|&s| s) {
            return (ints, max + 1);
        }
    }
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let labels = raw
        .iter()
        .map(|s| {
            let next = ids.len();
            *ids.entry(s.as_str()).or_insert(next)
        })
        .collect();
    (labels, ids.len())
}

/// Writes `x0..x{d-1},label` with shortest round-trip float formatting.
pub fn write_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut header: Vec<String> = (0..dataset.dim()).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    writeln!(out, "{}", header.join(","))?;
    for r in 0..dataset.len() {
        let mut line = String::new();
        for v in dataset.inputs.row(r) {
            line.push_str(&format!("{v},"));
        }
        line.push_str(&dataset.labels[r].to_string());
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_fraction, self.dev_fraction, self.test_fraction];
        if fr.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return Err(Error::invalid(format!("split fractions must lie in (0,1): {fr:?}")));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split fractions must sum to 1: {fr:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledDataset,
    pub dev: LabeledDataset,
    pub test: LabeledDataset,
}

/// Seeded shuffle, then contiguous train/dev/test partition.
pub fn split(dataset: &LabeledDataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let n = dataset.len();
    let n_train = (spec.train_fraction * n as f64).round() as usize;
    let n_dev = (spec.dev_fraction * n as f64).round() as usize;
    let n_test = n.saturating_sub(n_train + n_dev);
    if n_train == 0 || n_dev == 0 || n_test == 0 || n_train + n_dev > n {
        return Err(Error::invalid(format!(
            "split of {n} samples leaves an empty part (train {n_train}, dev {n_dev}, test {n_test})"
        )));
    }
    let perm = Rng::new(spec.seed).permutation(n);
    Ok(Splits {
        train: dataset.subset(&perm[..n_train]),
        dev: dataset.subset(&perm[n_train..n_train + n_dev]),
        test: dataset.subset(&perm[n_train + n_dev..]),
    })
}

/// One minibatch; `indices` point into the source dataset.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub indices: Vec<usize>,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Shuffled minibatches for one epoch. A trailing batch smaller than 2 is
/// dropped: batch standardization needs at least two rows.
pub fn minibatches(dataset: &LabeledDataset, batch_size: usize, rng: &mut Rng) -> Result<Vec<LabeledBatch>> {
    if batch_size < 2 {
        return Err(Error::invalid(format!("batch_size must be >= 2, got {batch_size}")));
    }
    let perm = rng.permutation(dataset.len());
    Ok(chunk_batches(dataset, &perm, batch_size))
}

/// Batches in dataset order, no shuffling.
pub fn sequential_batches(dataset: &LabeledDataset, batch_size: usize) -> Result<Vec<LabeledBatch>> {
    if batch_size < 2 {
        return Err(Error::invalid(format!("batch_size must be >= 2, got {batch_size}")));
    }
    let order: Vec<usize> = (0..dataset.len()).collect();
    Ok(chunk_batches(dataset, &order, batch_size))
}

fn chunk_batches(dataset: &LabeledDataset, order: &[usize], batch_size: usize) -> Vec<LabeledBatch> {
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| LabeledBatch {
            indices: c.to_vec(),
            inputs: dataset.inputs.select_rows(c),
            labels: c.iter().map(|&i| dataset.labels[i]).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_centroid_accuracy(train: &LabeledDataset, test: &LabeledDataset) -> f64 {
        let c = train.num_classes();
        let d = train.dim();
        let mut centroids = vec![vec![0.0; d]; c];
        let counts = train.class_counts();
        for r in 0..train.len() {
            for (acc, v) in centroids[train.labels()[r]].iter_mut().zip(train.inputs().row(r)) {
                *acc += v;
            }
        }
        for (cent, &n) in centroids.iter_mut().zip(&counts) {
            cent.iter_mut().for_each(|v| *v /= n as f64);
        }
        let correct = (0..test.len())
            .filter(|&r| {
                let x = test.inputs().row(r);
                let best = (0..c)
                    .min_by(|&a, &b| {
                        let da: f64 = x.iter().zip(&centroids[a]).map(|(p, q)| (p - q).powi(2)).sum();
                        let db: f64 = x.iter().zip(&centroids[b]).map(|(p, q)| (p - q).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == test.labels()[r]
            })
            .count();
        correct as f64 / test.len() as f64
    }

    fn one_nn_accuracy(train: &LabeledDataset, test: &LabeledDataset) -> f64 {
        let correct = (0..test.len())
            .filter(|&r| {
                let x = test.inputs().row(r);
                let nn = (0..train.len())
                    .min_by(|&a, &b| {
                        let da: f64 = x.iter().zip(train.inputs().row(a)).map(|(p, q)| (p - q).powi(2)).sum();
                        let db: f64 = x.iter().zip(train.inputs().row(b)).map(|(p, q)| (p - q).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                train.labels()[nn] == test.labels()[r]
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn blobs_with_zero_std_sit_on_centers() {
        let ds = gen_gaussian_blobs(&mut Rng::new(1), 3, 4, 2, 5.0, 0.0).unwrap();
        for c in 0..3 {
            let rows: Vec<&[f64]> = (0..ds.len()).filter(|&r| ds.labels()[r] == c).map(|r| ds.inputs().row(r)).collect();
            assert!(rows.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn blobs_counts() {
        let ds = gen_gaussian_blobs(&mut Rng::new(2), 4, 500, 16, 3.0, 1.0).unwrap();
        assert_eq!(ds.len(), 2000);
        assert_eq!(ds.class_counts(), vec![500; 4]);
        assert!(gen_gaussian_blobs(&mut Rng::new(2), 1, 5, 2, 1.0, 1.0).is_err());
        assert!(gen_gaussian_blobs(&mut Rng::new(2), 2, 5, 0, 1.0, 1.0).is_err());
    }

    #[test]
    fn well_separated_blobs_are_centroid_separable() {
        let ds = gen_gaussian_blobs(&mut Rng::new(3), 4, 200, 8, 20.0, 0.5).unwrap();
        let s = split(&ds, &SplitSpec { train_fraction: 0.6, dev_fraction: 0.2, test_fraction: 0.2, seed: 4 }).unwrap();
        assert_eq!(nearest_centroid_accuracy(&s.train, &s.test), 1.0);
    }

    #[test]
    fn noiseless_spirals_lie_on_curves() {
        let n = 50;
        let ds = gen_two_spirals(&mut Rng::new(5), n, 0.0).unwrap();
        assert_eq!(ds.class_counts(), vec![n, n]);
        for r in 0..ds.len() {
            let class = ds.labels()[r];
            let t = (r % n) as f64 / (n - 1) as f64;
            let p = spiral_point(class, t);
            assert_eq!(ds.inputs().row(r), &p[..]);
        }
    }

    #[test]
    fn noiseless_spirals_are_nn_separable() {
        let ds = gen_two_spirals(&mut Rng::new(6), 500, 0.0).unwrap();
        let s = split(&ds, &SplitSpec { train_fraction: 0.7, dev_fraction: 0.15, test_fraction: 0.15, seed: 9 }).unwrap();
        assert!(one_nn_accuracy(&s.train, &s.test) >= 0.99);
    }

    #[test]
    fn csv_handwritten_and_string_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "a,b,label\n1.5,2,a\n-3,4e-1,b\n0,0.25,a\n").unwrap();
        let ds = load_csv(&p, "label").unwrap();
        assert_eq!(ds.inputs().as_slice(), &[1.5, 2.0, -3.0, 0.4, 0.0, 0.25]);
        assert_eq!(ds.labels(), &[0, 1, 0]);
        assert_eq!(ds.num_classes(), 2);
    }

    #[test]
    fn csv_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let missing = load_csv(&dir.path().join("nope.csv"), "label").unwrap_err();
        assert!(matches!(missing, Error::MissingFile(_)));

        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(load_csv(&empty, "label").unwrap_err(), Error::EmptyFile(_)));

        let header_only = dir.path().join("h.csv");
        std::fs::write(&header_only, "x,label\n").unwrap();
        assert!(matches!(load_csv(&header_only, "label").unwrap_err(), Error::EmptyFile(_)));

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "x,label\n1,0\nfoo,1\n").unwrap();
        match load_csv(&bad, "label").unwrap_err() {
            Error::NonNumericCell { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "x");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = gen_gaussian_blobs(&mut Rng::new(8), 3, 20, 5, 2.0, 0.7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("blobs.csv");
        write_csv(&ds, &p).unwrap();
        let back = load_csv(&p, "label").unwrap();
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.inputs().as_slice().iter().zip(ds.inputs().as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn split_rules() {
        let ds = gen_gaussian_blobs(&mut Rng::new(10), 4, 500, 4, 3.0, 1.0).unwrap();
        let spec = SplitSpec { train_fraction: 0.6, dev_fraction: 0.2, test_fraction: 0.2, seed: 1 };
        let a = split(&ds, &spec).unwrap();
        let b = split(&ds, &spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.train.len() + a.dev.len() + a.test.len(), ds.len());

        let global = ds.class_counts();
        let train = a.train.class_counts();
        for (g, t) in global.iter().zip(&train) {
            let gp = *g as f64 / ds.len() as f64;
            let tp = *t as f64 / a.train.len() as f64;
            assert!((gp - tp).abs() < 0.05);
        }

        let eps = 1e-5;
        let degenerate = SplitSpec { train_fraction: 1.0 - 2.0 * eps, dev_fraction: eps, test_fraction: eps, seed: 1 };
        assert!(split(&ds, &degenerate).is_err());
        let bad_sum = SplitSpec { train_fraction: 0.5, dev_fraction: 0.2, test_fraction: 0.2, seed: 1 };
        assert!(split(&ds, &bad_sum).is_err());
    }

    #[test]
    fn minibatch_rules() {
        let ds = gen_gaussian_blobs(&mut Rng::new(11), 2, 5, 2, 1.0, 1.0).unwrap();
        let batches = minibatches(&ds, 5, &mut Rng::new(3)).unwrap();
        assert_eq!(batches.len(), 2);
        let again = minibatches(&ds, 5, &mut Rng::new(3)).unwrap();
        assert_eq!(
            batches.iter().map(|b| b.indices.clone()).collect::<Vec<_>>(),
            again.iter().map(|b| b.indices.clone()).collect::<Vec<_>>()
        );
        assert!(minibatches(&ds, 1, &mut Rng::new(3)).is_err());

        // 10 samples, batch 3 -> 3 full batches, tail of 1 dropped
        let b3 = minibatches(&ds, 3, &mut Rng::new(4)).unwrap();
        assert_eq!(b3.len(), 3);
        let mut seen: Vec<usize> = b3.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);

        // 11 samples, batch 3 -> tail of 2 kept; multiset equals all indices
        let ds11 = ds.subset(&(0..10).chain(std::iter::once(0)).collect::<Vec<_>>());
        let b = minibatches(&ds11, 3, &mut Rng::new(4)).unwrap();
        let mut all: Vec<usize> = b.iter().flat_map(|b| b.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        for batch in &b {
            assert!(batch.len() >= 2);
            assert!(batch.labels.iter().all(|&l| l < ds.num_classes()));
        }
    }
}
