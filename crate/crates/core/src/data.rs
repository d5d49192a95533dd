//! Labeled feature batches: a seeded two-level Gaussian-mixture generator and
//! a CSV loader.

use crate::rng::{self, Purpose};
use rand_distr::{Distribution, Normal};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("row {row}: label {label} out of range for {n_classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: i64,
        n_classes: usize,
    },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A batch of feature rows with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub n_features: usize,
    pub n_classes: usize,
    /// Row-major `[len × n_features]`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Copy out the rows at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> LabeledBatch {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledBatch {
            n_features: self.n_features,
            n_classes: self.n_classes,
            features,
            labels,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if let Some(pos) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Parse {
                row: pos / self.n_features,
                msg: "non-finite feature".into(),
            });
        }
        if let Some((row, &label)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= self.n_classes)
        {
            return Err(DataError::LabelOutOfRange {
                row,
                label: label as i64,
                n_classes: self.n_classes,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub n_features: usize,
    pub samples_per_class: usize,
    pub n_superclasses: usize,
    pub intra_spread: f64,
    pub inter_spread: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.n_classes == 0 || self.n_features == 0 || self.samples_per_class == 0 {
            return bad("n_classes, n_features and samples_per_class must be positive");
        }
        if self.n_superclasses == 0 || self.n_superclasses > self.n_classes {
            return bad("n_superclasses must lie in 1..=n_classes");
        }
        if !(self.intra_spread >= 0.0 && self.intra_spread.is_finite()) {
            return bad("intra_spread must be finite and non-negative");
        }
        if !(self.inter_spread >= 0.0 && self.inter_spread.is_finite()) {
            return bad("inter_spread must be finite and non-negative");
        }
        Ok(())
    }

    /// Superclass of each class: contiguous blocks of `C / S` classes, with
    /// the `C mod S` leftover classes dealt round-robin from superclass 0.
    pub fn superclass_map(&self) -> Vec<usize> {
        let per = self.n_classes / self.n_superclasses;
        let blocked = per * self.n_superclasses;
        (0..self.n_classes)
            .map(|c| {
                if c < blocked {
                    c / per
                } else {
                    (c - blocked) % self.n_superclasses
                }
            })
            .collect()
    }
}

/// Generated splits plus the (standardized) class centers they were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
    /// Row-major `[n_classes × n_features]`, in the same standardized space as the splits.
    pub class_centers: Vec<f64>,
    pub superclass_of: Vec<usize>,
}

/// Draw a dataset. Superclass centers come from `N(0, (4·inter)²)`, class
/// centers from `superclass + N(0, inter²)`, samples from `center + N(0, intra²)`.
/// Both splits are then z-scored with train-split statistics.
pub fn generate(spec: &DatasetSpec) -> Result<SyntheticDataset, DataError> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Purpose::Data);
    let d = spec.n_features;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let super_centers: Vec<f64> = (0..spec.n_superclasses * d)
        .map(|_| 4.0 * spec.inter_spread * std_normal.sample(&mut rng))
        .collect();
    let superclass_of = spec.superclass_map();
    let mut centers = Vec::with_capacity(spec.n_classes * d);
    for &s in &superclass_of {
        for k in 0..d {
            centers
                .push(super_centers[s * d + k] + spec.inter_spread * std_normal.sample(&mut rng));
        }
    }

    let draw_split = |rng: &mut rng::StreamRng| {
        let n = spec.n_classes * spec.samples_per_class;
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for c in 0..spec.n_classes {
            for _ in 0..spec.samples_per_class {
                for k in 0..d {
                    features.push(centers[c * d + k] + spec.intra_spread * std_normal.sample(rng));
                }
                labels.push(c);
            }
        }
        LabeledBatch {
            n_features: d,
            n_classes: spec.n_classes,
            features,
            labels,
        }
    };
    let mut train = draw_split(&mut rng);
    let mut test = draw_split(&mut rng);

    let scaler = Standardizer::fit(&train);
    scaler.apply(&mut train.features);
    scaler.apply(&mut test.features);
    scaler.apply(&mut centers);

    Ok(SyntheticDataset {
        train,
        test,
        class_centers: centers,
        superclass_of,
    })
}

/// Per-feature z-scoring fitted on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(batch: &LabeledBatch) -> Self {
        let d = batch.n_features;
        let n = batch.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for i in 0..batch.len() {
            for (m, v) in mean.iter_mut().zip(batch.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..batch.len() {
            for ((s, v), m) in var.iter_mut().zip(batch.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                // Constant features are centered but not rescaled.
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    /// Transform row-major data with `mean.len()` columns in place.
    pub fn apply(&self, data: &mut [f64]) {
        let d = self.mean.len();
        for row in data.chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Read `label,f1,…,fd` rows (after a header line) into a batch.
/// Row numbers in errors count data rows from 1.
pub fn load_csv(path: &Path, n_classes: usize) -> Result<LabeledBatch, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => DataError::Io {
                path: path.display().to_string(),
                source,
            },
            other => DataError::Parse {
                row: 0,
                msg: format!("{other:?}"),
            },
        })?;

    let mut n_features = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| DataError::Parse {
            row,
            msg: e.to_string(),
        })?;
        if record.len() < 2 {
            return Err(DataError::Parse {
                row,
                msg: "expected a label and at least one feature".into(),
            });
        }
        let d = record.len() - 1;
        match n_features {
            None => n_features = Some(d),
            Some(expected) if expected != d => {
                return Err(DataError::Parse {
                    row,
                    msg: format!("expected {expected} features, found {d}"),
                })
            }
            _ => {}
        }
        let label: i64 = record[0].parse().map_err(|_| DataError::Parse {
            row,
            msg: format!("bad label {:?}", &record[0]),
        })?;
        if label < 0 || label as usize >= n_classes {
            return Err(DataError::LabelOutOfRange {
                row,
                label,
                n_classes,
            });
        }
        labels.push(label as usize);
        for field in record.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| DataError::Parse {
                row,
                msg: format!("bad feature {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    row,
                    msg: format!("non-finite feature {field:?}"),
                });
            }
            features.push(v);
        }
    }
    let batch = LabeledBatch {
        n_features: n_features.unwrap_or(0),
        n_classes,
        features,
        labels,
    };
    batch.validate()?;
    Ok(batch)
}
