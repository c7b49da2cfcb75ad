//! SubSample-and-Retrain: estimate true influence by training many models on
//! random subsamples and differencing conditional mean losses.
//!
//! The raw estimate for a pair `(x_s, x_t)` is
//! `mean loss(x_t) over trials containing x_s  -  mean over trials without it`,
//! so a helpful training point scores negative. Reports also carry the
//! negated `helpfulness` column, which ranks memorized and mislabeled
//! examples highest.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::models::{ModelSpec, ParamVector};
use crate::numeric::{fmt_f64, stream_rng, KahanSum};
use crate::store::atomic_write;
use crate::training::{train, OptimizerConfig};

const STREAM_MEMBERSHIP: u64 = 200;
const MAX_COVERAGE_ATTEMPTS: u64 = 100;

pub const BITMAP_MAGIC: &[u8; 8] = b"INFLBITS";

/// Configuration for a subsample-and-retrain run. The optimizer acts as a
/// template; trial `t` trains with seed `base_seed + t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SsrtConfig {
    pub trials: usize,
    pub fraction: f64,
    pub base_seed: u64,
    pub spec: ModelSpec,
    pub optimizer: OptimizerConfig,
}

impl SsrtConfig {
    pub fn validate(&self, n: usize) -> Result<usize> {
        if self.trials < 2 {
            return Err(Error::invalid_arg("need at least 2 trials"));
        }
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::invalid_arg("fraction must be in (0, 1)"));
        }
        let m = (self.fraction * n as f64).round() as usize;
        if m == 0 {
            return Err(Error::invalid_arg(
                "fraction rounds to an empty subsample, nothing to train on",
            ));
        }
        if m >= n {
            return Err(Error::invalid_arg(
                "fraction rounds to the full dataset, every trial must exclude someone",
            ));
        }
        self.optimizer.validate()?;
        Ok(m)
    }
}

/// Outcome of one retraining trial.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    /// Which training examples (by position) were in the subsample.
    pub membership: Vec<bool>,
    /// Final checkpoint; `None` when training diverged.
    pub final_params: Option<ParamVector>,
    /// Final-model loss on every target; empty when training diverged.
    pub target_losses: Vec<f64>,
}

impl TrialOutcome {
    pub fn succeeded(&self) -> bool {
        self.final_params.is_some()
    }
}

/// All trials of one run plus the id bookkeeping needed for estimates.
#[derive(Debug, Clone)]
pub struct SsrtTrials {
    pub outcomes: Vec<TrialOutcome>,
    pub train_ids: Vec<u64>,
    pub target_ids: Vec<u64>,
    pub fraction: f64,
    pub base_seed: u64,
}

impl SsrtTrials {
    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| !o.succeeded()).count()
    }

    fn train_index(&self, id: u64) -> Result<usize> {
        self.train_ids
            .iter()
            .position(|&x| x == id)
            .ok_or_else(|| Error::invalid_arg(format!("train id {id} not covered by trials")))
    }

    fn target_index(&self, id: u64) -> Result<usize> {
        self.target_ids
            .iter()
            .position(|&x| x == id)
            .ok_or_else(|| Error::invalid_arg(format!("target id {id} not covered by trials")))
    }
}

/// Every subsample of `m` of `n` positions, in lexicographic order. Feeds
/// exhaustive-enumeration runs on tiny instances.
pub fn enumerate_memberships(n: usize, m: usize) -> Vec<Vec<bool>> {
    assert!(m <= n, "cannot choose {m} of {n}");
    let mut out = Vec::new();
    let mut combo: Vec<usize> = (0..m).collect();
    loop {
        let mut row = vec![false; n];
        for &i in &combo {
            row[i] = true;
        }
        out.push(row);
        // Advance to the next combination.
        let mut i = m;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if combo[i] != i + n - m {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        combo[i] += 1;
        for j in i + 1..m {
            combo[j] = combo[j - 1] + 1;
        }
    }
}

fn sample_memberships(n: usize, m: usize, trials: usize, base_seed: u64, attempt: u64) -> Vec<Vec<bool>> {
    (0..trials)
        .map(|t| {
            let seed = base_seed
                .wrapping_add(attempt.wrapping_mul(trials as u64))
                .wrapping_add(t as u64);
            let mut rng = stream_rng(seed, STREAM_MEMBERSHIP);
            let picked = rand::seq::index::sample(&mut rng, n, m);
            let mut row = vec![false; n];
            for i in picked {
                row[i] = true;
            }
            row
        })
        .collect()
}

fn coverage_ok(memberships: &[Vec<bool>], n: usize) -> bool {
    (0..n).all(|i| {
        let included = memberships.iter().any(|row| row[i]);
        let excluded = memberships.iter().any(|row| !row[i]);
        included && excluded
    })
}

/// Train one model per membership row and record final losses on all targets.
/// Diverged trials are kept in place, marked failed, and never retried.
pub fn run_with_memberships(
    ds: &Dataset,
    targets: &Dataset,
    memberships: Vec<Vec<bool>>,
    spec: &ModelSpec,
    optimizer: &OptimizerConfig,
    base_seed: u64,
) -> Result<SsrtTrials> {
    let n = ds.len();
    for (t, row) in memberships.iter().enumerate() {
        if row.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "membership row {t} has {} entries, dataset has {n}",
                row.len()
            )));
        }
        if !row.iter().any(|&b| b) {
            return Err(Error::invalid_arg(format!("membership row {t} is empty")));
        }
    }

    let outcomes: Vec<TrialOutcome> = memberships
        .into_par_iter()
        .enumerate()
        .map(|(t, membership)| -> Result<TrialOutcome> {
            let indices: Vec<usize> = membership
                .iter()
                .enumerate()
                .filter_map(|(i, &b)| b.then_some(i))
                .collect();
            let sub = ds.subset(&indices)?;
            let mut opt = optimizer.clone();
            opt.seed = base_seed.wrapping_add(t as u64);
            match train(&sub, spec, &opt) {
                Ok(traj) => {
                    let last = traj.checkpoints.last().unwrap();
                    let target_losses = targets
                        .examples()
                        .iter()
                        .map(|ex| spec.loss(last, ex))
                        .collect::<Result<Vec<f64>>>()?;
                    Ok(TrialOutcome {
                        membership,
                        final_params: Some(last.clone()),
                        target_losses,
                    })
                }
                Err(Error::Divergence { .. }) => Ok(TrialOutcome {
                    membership,
                    final_params: None,
                    target_losses: Vec::new(),
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SsrtTrials {
        outcomes,
        train_ids: ds.ids(),
        target_ids: targets.ids(),
        fraction: 0.0,
        base_seed,
    })
}

/// Sample `cfg.trials` uniform subsamples of size `round(fraction * n)`,
/// resampling the whole batch deterministically until every example is both
/// included and excluded at least once, then train and evaluate each trial.
pub fn run_trials(ds: &Dataset, targets: &Dataset, cfg: &SsrtConfig) -> Result<SsrtTrials> {
    let n = ds.len();
    let m = cfg.validate(n)?;

    let mut memberships = None;
    for attempt in 0..MAX_COVERAGE_ATTEMPTS {
        let candidate = sample_memberships(n, m, cfg.trials, cfg.base_seed, attempt);
        if coverage_ok(&candidate, n) {
            memberships = Some(candidate);
            break;
        }
    }
    let memberships = memberships.ok_or_else(|| {
        Error::InsufficientTrials(format!(
            "could not cover all {n} examples with {} trials of size {m}",
            cfg.trials
        ))
    })?;

    let mut trials =
        run_with_memberships(ds, targets, memberships, &cfg.spec, &cfg.optimizer, cfg.base_seed)?;
    trials.fraction = cfg.fraction;
    Ok(trials)
}

/// The conditional-mean-difference estimate for one (train, target) id pair.
/// Negative means the training point helped the target.
pub fn ssrt_influence(trials: &SsrtTrials, train_id: u64, target_id: u64) -> Result<f64> {
    let s = trials.train_index(train_id)?;
    let tau = trials.target_index(target_id)?;

    let mut with_sum = KahanSum::new();
    let mut with_count = 0usize;
    let mut without_sum = KahanSum::new();
    let mut without_count = 0usize;
    for outcome in trials.outcomes.iter().filter(|o| o.succeeded()) {
        if outcome.membership[s] {
            with_sum.add(outcome.target_losses[tau]);
            with_count += 1;
        } else {
            without_sum.add(outcome.target_losses[tau]);
            without_count += 1;
        }
    }
    if with_count == 0 {
        return Err(Error::InsufficientTrials(format!(
            "train id {train_id} is never included in a successful trial"
        )));
    }
    if without_count == 0 {
        return Err(Error::InsufficientTrials(format!(
            "train id {train_id} is never excluded from a successful trial"
        )));
    }
    Ok(with_sum.total() / with_count as f64 - without_sum.total() / without_count as f64)
}

/// One row of an SSRT estimate: the raw conditional difference and its
/// negation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SsrtEntry {
    pub train_id: u64,
    pub target_id: u64,
    pub influence: f64,
    pub helpfulness: f64,
}

/// Estimates for a set of pairs plus run metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SsrtEstimate {
    pub entries: Vec<SsrtEntry>,
    pub trials: usize,
    pub fraction: f64,
    pub base_seed: u64,
    pub failures: usize,
}

impl SsrtEstimate {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("train_id,target_id,influence,helpfulness\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.train_id,
                e.target_id,
                fmt_f64(e.influence),
                fmt_f64(e.helpfulness)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        atomic_write(path, self.to_csv_string().as_bytes())
    }

    /// JSON manifest with the run parameters (no scores).
    pub fn manifest_json(&self) -> serde_json::Value {
        serde_json::json!({
            "trials": self.trials,
            "fraction": self.fraction,
            "base_seed": self.base_seed,
            "failures": self.failures,
        })
    }

    /// Diagonal (self-influence) entries only.
    pub fn self_entries(&self) -> Vec<&SsrtEntry> {
        self.entries
            .iter()
            .filter(|e| e.train_id == e.target_id)
            .collect()
    }
}

pub fn parse_estimate_csv(text: &str) -> Result<Vec<SsrtEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                row: i,
                col: 0,
                message: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse = |col: usize| -> Result<f64> {
            let value: f64 = fields[col].parse().map_err(|_| Error::Parse {
                row: i,
                col,
                message: format!("bad number `{}`", fields[col]),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    row: i,
                    col,
                    message: "estimate must be finite".into(),
                });
            }
            Ok(value)
        };
        entries.push(SsrtEntry {
            train_id: fields[0].parse().map_err(|_| Error::Parse {
                row: i,
                col: 0,
                message: "bad id".into(),
            })?,
            target_id: fields[1].parse().map_err(|_| Error::Parse {
                row: i,
                col: 1,
                message: "bad id".into(),
            })?,
            influence: parse(2)?,
            helpfulness: parse(3)?,
        });
    }
    Ok(entries)
}

/// Estimate a list of pairs.
pub fn estimate_pairs(trials: &SsrtTrials, pairs: &[(u64, u64)]) -> Result<SsrtEstimate> {
    let entries = pairs
        .iter()
        .map(|&(s, t)| {
            let influence = ssrt_influence(trials, s, t)?;
            Ok(SsrtEntry {
                train_id: s,
                target_id: t,
                influence,
                helpfulness: -influence,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SsrtEstimate {
        entries,
        trials: trials.outcomes.len(),
        fraction: trials.fraction,
        base_seed: trials.base_seed,
        failures: trials.failures(),
    })
}

/// Self-influence estimate for every train id that is also a target.
pub fn estimate_self(trials: &SsrtTrials) -> Result<SsrtEstimate> {
    let pairs: Vec<(u64, u64)> = trials
        .train_ids
        .iter()
        .filter(|id| trials.target_ids.contains(id))
        .map(|&id| (id, id))
        .collect();
    estimate_pairs(trials, &pairs)
}

/// Cross estimate: every train id against every target id.
pub fn estimate_cross(trials: &SsrtTrials, target_ids: &[u64]) -> Result<SsrtEstimate> {
    let mut pairs = Vec::with_capacity(trials.train_ids.len() * target_ids.len());
    for &s in &trials.train_ids {
        for &t in target_ids {
            pairs.push((s, t));
        }
    }
    estimate_pairs(trials, &pairs)
}

/// Retrain on explicit subsets (for linear-datamodel scoring) and return the
/// per-subset final losses on the targets. Every subset trains with the
/// recipe's own seed, so a subset equal to the full dataset reproduces a
/// plain training run.
pub fn retrain_on_subsets(
    ds: &Dataset,
    subsets: &[Vec<usize>],
    spec: &ModelSpec,
    optimizer: &OptimizerConfig,
    targets: &Dataset,
) -> Result<Vec<Vec<f64>>> {
    if subsets.is_empty() {
        return Err(Error::invalid_arg("no subsets given"));
    }
    for (k, subset) in subsets.iter().enumerate() {
        if subset.is_empty() {
            return Err(Error::invalid_arg(format!("subset {k} is empty")));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &i in subset {
            if !seen.insert(i) {
                return Err(Error::invalid_arg(format!(
                    "subset {k} contains duplicate index {i}"
                )));
            }
        }
    }
    subsets
        .par_iter()
        .map(|subset| -> Result<Vec<f64>> {
            let sub = ds.subset(subset)?;
            let traj = train(&sub, spec, optimizer)?;
            let last = traj.checkpoints.last().unwrap();
            targets
                .examples()
                .iter()
                .map(|ex| spec.loss(last, ex))
                .collect()
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct BitmapHeader {
    version: u32,
    trials: usize,
    n: usize,
    fraction: f64,
    base_seed: u64,
    failures: usize,
    train_ids: Vec<u64>,
}

/// Persist the trial membership bitmap: rows packed LSB-first into
/// `ceil(n / 8)` bytes each, inside the shared container format.
pub fn save_membership_bitmap(trials: &SsrtTrials, path: impl AsRef<Path>) -> Result<()> {
    let n = trials.train_ids.len();
    let row_bytes = n.div_ceil(8);
    let mut payload = vec![0u8; trials.outcomes.len() * row_bytes];
    for (t, outcome) in trials.outcomes.iter().enumerate() {
        for (i, &bit) in outcome.membership.iter().enumerate() {
            if bit {
                payload[t * row_bytes + i / 8] |= 1 << (i % 8);
            }
        }
    }
    let header = BitmapHeader {
        version: crate::store::FORMAT_VERSION,
        trials: trials.outcomes.len(),
        n,
        fraction: trials.fraction,
        base_seed: trials.base_seed,
        failures: trials.failures(),
        train_ids: trials.train_ids.clone(),
    };
    crate::store::write_raw_container(
        path.as_ref(),
        BITMAP_MAGIC,
        &serde_json::to_vec(&header)?,
        &payload,
    )
}

/// Load a membership bitmap back into rows of booleans.
pub fn load_membership_bitmap(path: impl AsRef<Path>) -> Result<(Vec<Vec<bool>>, Vec<u64>)> {
    let (header_bytes, payload) = crate::store::read_raw_container(path.as_ref(), BITMAP_MAGIC)?;
    let header: BitmapHeader = serde_json::from_slice(&header_bytes)?;
    if header.version != crate::store::FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            supported: crate::store::FORMAT_VERSION,
        });
    }
    let row_bytes = header.n.div_ceil(8);
    if payload.len() != header.trials * row_bytes {
        return Err(Error::ShapeMismatch("bitmap payload size".into()));
    }
    let rows = (0..header.trials)
        .map(|t| {
            (0..header.n)
                .map(|i| payload[t * row_bytes + i / 8] & (1 << (i % 8)) != 0)
                .collect()
        })
        .collect();
    Ok((rows, header.train_ids))
}
