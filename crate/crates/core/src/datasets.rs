//! Synthetic data generation, label-noise injection, and CSV ingestion.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{fmt_f64, stream_rng};

const STREAM_DIRECTION: u64 = 0;
const STREAM_FEATURES: u64 = 1;
const STREAM_NOISE: u64 = 2;

/// One labeled example: a feature vector, a class index, and a stable id.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
    pub id: u64,
}

/// An immutable, ordered collection of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    num_classes: usize,
    feature_dim: usize,
    provenance: String,
}

/// Sidecar metadata written next to a dataset CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub d: usize,
    pub num_classes: usize,
    pub seed: Option<u64>,
    pub provenance: String,
}

impl Dataset {
    /// Validates every invariant: non-empty, uniform feature width, finite
    /// features, labels in range, unique ids.
    pub fn new(
        examples: Vec<Example>,
        num_classes: usize,
        feature_dim: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid_arg("dataset must be non-empty"));
        }
        if num_classes < 2 {
            return Err(Error::invalid_arg("num_classes must be at least 2"));
        }
        let mut seen = BTreeSet::new();
        for ex in &examples {
            if ex.features.len() != feature_dim {
                return Err(Error::DimensionMismatch {
                    context: format!("features of example {}", ex.id),
                    expected: feature_dim,
                    actual: ex.features.len(),
                });
            }
            if ex.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid_arg(format!(
                    "example {} has a non-finite feature",
                    ex.id
                )));
            }
            if ex.label >= num_classes {
                return Err(Error::invalid_arg(format!(
                    "example {} has label {} outside [0, {})",
                    ex.id, ex.label, num_classes
                )));
            }
            if !seen.insert(ex.id) {
                return Err(Error::invalid_arg(format!("duplicate example id {}", ex.id)));
            }
        }
        Ok(Self {
            examples,
            num_classes,
            feature_dim,
            provenance: provenance.into(),
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn ids(&self) -> Vec<u64> {
        self.examples.iter().map(|e| e.id).collect()
    }

    /// Selects examples by position, keeping their original ids.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut examples = Vec::with_capacity(indices.len());
        for &i in indices {
            let ex = self
                .examples
                .get(i)
                .ok_or_else(|| Error::invalid_arg(format!("subset index {i} out of range")))?;
            examples.push(ex.clone());
        }
        Dataset::new(
            examples,
            self.num_classes,
            self.feature_dim,
            format!("{} (subset of {})", self.provenance, self.len()),
        )
    }

    pub fn manifest(&self, seed: Option<u64>) -> DatasetManifest {
        DatasetManifest {
            n: self.len(),
            d: self.feature_dim,
            num_classes: self.num_classes,
            seed,
            provenance: self.provenance.clone(),
        }
    }
}

/// Generate a linearly separable two-class Gaussian dataset.
///
/// Features are drawn componentwise from a standard normal; the label is the
/// sign of the projection onto a fixed unit direction (drawn from the seed),
/// and each example is then shifted by `±margin` along that direction, so the
/// class gap along the separating direction is at least `2 * margin`.
pub fn gen_gaussian_two_class(n: usize, d: usize, margin: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid_arg("n must be at least 2"));
    }
    if d < 1 {
        return Err(Error::invalid_arg("d must be at least 1"));
    }
    if margin <= 0.0 || !margin.is_finite() {
        return Err(Error::invalid_arg("margin must be positive and finite"));
    }

    let mut dir_rng = stream_rng(seed, STREAM_DIRECTION);
    let mut direction: Vec<f64> = (0..d).map(|_| dir_rng.sample(StandardNormal)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        direction = vec![0.0; d];
        direction[0] = 1.0;
    } else {
        for v in &mut direction {
            *v /= norm;
        }
    }

    let mut feat_rng = stream_rng(seed, STREAM_FEATURES);
    let mut examples = Vec::with_capacity(n);
    for id in 0..n {
        let mut features: Vec<f64> = (0..d).map(|_| feat_rng.sample(StandardNormal)).collect();
        let projection: f64 = features.iter().zip(&direction).map(|(x, w)| x * w).sum();
        let label = usize::from(projection >= 0.0);
        let shift = if label == 1 { margin } else { -margin };
        for (x, w) in features.iter_mut().zip(&direction) {
            *x += shift * w;
        }
        examples.push(Example {
            features,
            label,
            id: id as u64,
        });
    }

    Dataset::new(
        examples,
        2,
        d,
        format!("gaussian-two-class(n={n}, d={d}, margin={margin}, seed={seed})"),
    )
}

/// Flip the labels of exactly `round(fraction * n)` examples, chosen uniformly,
/// each reassigned uniformly among the other classes. Features and ids are
/// untouched. Returns the new dataset and the set of flipped ids.
pub fn inject_label_noise(
    ds: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, BTreeSet<u64>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid_arg(format!(
            "fraction must be in [0, 1], got {fraction}"
        )));
    }
    let n = ds.len();
    let k = (fraction * n as f64).round() as usize;

    let mut rng = stream_rng(seed, STREAM_NOISE);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
    chosen.sort_unstable();

    let mut examples = ds.examples.clone();
    let mut flipped = BTreeSet::new();
    for &i in &chosen {
        let old = examples[i].label;
        let offset = rng.random_range(1..ds.num_classes);
        examples[i].label = (old + offset) % ds.num_classes;
        flipped.insert(examples[i].id);
    }

    let noisy = Dataset::new(
        examples,
        ds.num_classes,
        ds.feature_dim,
        format!("{} + label-noise(fraction={fraction}, seed={seed})", ds.provenance),
    )?;
    Ok((noisy, flipped))
}

/// Read a dataset from a delimited text file with a header row.
///
/// All columns other than `label_col` are parsed as features in header order;
/// ids are assigned 0..n-1 in row order.
pub fn load_csv(path: impl AsRef<Path>, label_col: &str, delimiter: u8) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .delimiter(delimiter)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse {
                row: 0,
                col: 0,
                message: format!("{other:?}"),
            },
        })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            col: 0,
            message: e.to_string(),
        })?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_col)
        .ok_or_else(|| Error::Parse {
            row: 0,
            col: 0,
            message: format!("label column `{label_col}` not found in header"),
        })?;
    let width = headers.len();
    let d = width - 1;
    if d == 0 {
        return Err(Error::Parse {
            row: 0,
            col: 0,
            message: "file has no feature columns".into(),
        });
    }

    let mut examples = Vec::new();
    let mut max_label = 0usize;
    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 1; // 1-based data row, header is row 0
        let record = record.map_err(|e| Error::Parse {
            row,
            col: 0,
            message: e.to_string(),
        })?;
        if record.len() != width {
            return Err(Error::InconsistentWidth {
                row,
                expected: width,
                actual: record.len(),
            });
        }
        let mut features = Vec::with_capacity(d);
        let mut label = 0usize;
        for (col, field) in record.iter().enumerate() {
            if col == label_idx {
                let raw: i64 = field.trim().parse().map_err(|_| Error::Parse {
                    row,
                    col,
                    message: format!("expected integer label, got `{field}`"),
                })?;
                if raw < 0 {
                    return Err(Error::Parse {
                        row,
                        col,
                        message: format!("label must be non-negative, got {raw}"),
                    });
                }
                label = raw as usize;
            } else {
                let value: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    row,
                    col,
                    message: format!("expected numeric feature, got `{field}`"),
                })?;
                features.push(value);
            }
        }
        max_label = max_label.max(label);
        examples.push(Example {
            features,
            label,
            id: row_idx as u64,
        });
    }

    let num_classes = (max_label + 1).max(2);
    Dataset::new(examples, num_classes, d, path.display().to_string())
}

/// Write a dataset as delimited text. Features become columns `f0..f{d-1}`;
/// the label column carries the given name. Numbers use 17 significant digits
/// so a read-back reproduces every double exactly. The file lands atomically.
pub fn write_csv(
    ds: &Dataset,
    path: impl AsRef<Path>,
    label_col: &str,
    delimiter: u8,
) -> Result<()> {
    let sep = (delimiter as char).to_string();
    let mut out = String::new();
    let header: Vec<String> = (0..ds.feature_dim)
        .map(|i| format!("f{i}"))
        .chain(std::iter::once(label_col.to_string()))
        .collect();
    out.push_str(&header.join(&sep));
    out.push('\n');
    for ex in &ds.examples {
        let mut fields: Vec<String> = ex.features.iter().map(|v| fmt_f64(*v)).collect();
        fields.push(ex.label.to_string());
        out.push_str(&fields.join(&sep));
        out.push('\n');
    }
    crate::store::atomic_write(path, out.as_bytes())
}
