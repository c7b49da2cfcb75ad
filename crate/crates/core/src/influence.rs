//! Influence scores from checkpoint trajectories.
//!
//! The zeroth-order estimators need only per-checkpoint losses and checkpoint
//! geometry: a finite-difference directional gradient per checkpoint pair,
//! averaged over a neighbor set, then dotted between a training and a target
//! example and summed over checkpoints. The Gram-backed path computes the
//! same value without touching parameter vectors. TracIn is the first-order
//! baseline built on exact gradients.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datasets::{Dataset, Example};
use crate::error::{Error, Result};
use crate::evaluation::spearman_slices;
use crate::models::{ParamMask, ParamVector};
use crate::numeric::{dist2 as euclid2, dot, fmt_f64, KahanSum};
use crate::store::{atomic_write, clamp_dist2, GramCache, NeighborSets};
use crate::training::{LossMatrix, Trajectory};

/// Finite-difference directional gradient for one checkpoint pair:
/// `(l_j - l_i) * (theta_j - theta_i) / ||theta_j - theta_i||^2`.
///
/// This is the least-squares minimizer of `(dl - g . dtheta)^2`, so by
/// construction `g . (theta_j - theta_i) = l_j - l_i`.
pub fn fd_gradient(
    theta_i: &[f64],
    theta_j: &[f64],
    loss_i: f64,
    loss_j: f64,
) -> Result<ParamVector> {
    if theta_i.len() != theta_j.len() {
        return Err(Error::DimensionMismatch {
            context: "fd_gradient checkpoints".into(),
            expected: theta_i.len(),
            actual: theta_j.len(),
        });
    }
    let d2 = clamp_dist2(euclid2(theta_i, theta_j));
    if d2 == 0.0 {
        return Err(Error::DegeneratePair);
    }
    let scale = (loss_j - loss_i) / d2;
    let values = theta_i
        .iter()
        .zip(theta_j)
        .map(|(a, b)| scale * (b - a))
        .collect();
    ParamVector::new(values)
}

/// The averaged finite-difference gradient at one checkpoint, with the
/// neighbor indices that actually contributed.
#[derive(Debug, Clone)]
pub struct FdGradient {
    pub vector: ParamVector,
    pub checkpoint: usize,
    /// Neighbors remaining after degenerate (zero-distance) pairs were
    /// excluded. Empty means the vector is zero.
    pub neighbors: Vec<usize>,
}

/// Average `fd_gradient(theta_i, theta_j, ...)` over the neighbor set.
/// Zero-distance neighbors are silently excluded; if none remain the result
/// is the zero vector.
pub fn robust_fd_gradient(
    i: usize,
    neighbor_set: &[usize],
    traj: &Trajectory,
    losses: &[f64],
) -> Result<FdGradient> {
    let t_len = traj.checkpoints.len();
    if losses.len() != t_len {
        return Err(Error::ShapeMismatch(format!(
            "loss row has {} entries, trajectory has {t_len} checkpoints",
            losses.len()
        )));
    }
    if i >= t_len || neighbor_set.iter().any(|&j| j >= t_len) {
        return Err(Error::invalid_arg("checkpoint index out of range"));
    }

    let theta_i = &traj.checkpoints[i];
    let effective: Vec<usize> = neighbor_set
        .iter()
        .copied()
        .filter(|&j| j != i && clamp_dist2(euclid2(theta_i, &traj.checkpoints[j])) > 0.0)
        .collect();

    let mut values = vec![0.0; traj.dim()];
    let m = effective.len() as f64;
    for &j in &effective {
        let theta_j = &traj.checkpoints[j];
        let d2 = clamp_dist2(euclid2(theta_i, theta_j));
        let coef = ((losses[j] - losses[i]) / d2) / m;
        for (v, (a, b)) in values.iter_mut().zip(theta_i.iter().zip(theta_j.iter())) {
            *v += coef * (b - a);
        }
    }
    Ok(FdGradient {
        vector: ParamVector::new(values)?,
        checkpoint: i,
        neighbors: effective,
    })
}

/// Zeroth-order influence of a training example on a target example:
/// the sum over checkpoints of the inner product of their averaged
/// finite-difference gradients. Checkpoints whose neighbor set is empty
/// (after degenerate exclusion) contribute zero.
pub fn zinf(
    traj: &Trajectory,
    loss_s: &[f64],
    loss_t: &[f64],
    neighbors: &NeighborSets,
) -> Result<f64> {
    let t_len = traj.checkpoints.len();
    check_rows(t_len, loss_s, loss_t, neighbors.len())?;
    let dim = traj.dim();
    let mut g_s = vec![0.0; dim];
    let mut g_t = vec![0.0; dim];
    let mut total = KahanSum::new();
    for i in 0..t_len {
        accumulate_pair_gradients(traj, i, neighbors.set(i), loss_s, loss_t, &mut g_s, &mut g_t);
        total.add(dot(&g_s, &g_t));
    }
    Ok(total.total())
}

/// Norm-form self-influence: identical to `zinf(traj, loss_s, loss_s, ..)`
/// and implemented as exactly that call.
pub fn zsinf_norm(traj: &Trajectory, loss_s: &[f64], neighbors: &NeighborSets) -> Result<f64> {
    zinf(traj, loss_s, loss_s, neighbors)
}

fn check_rows(t_len: usize, loss_s: &[f64], loss_t: &[f64], sets: usize) -> Result<()> {
    if loss_s.len() != t_len || loss_t.len() != t_len {
        return Err(Error::ShapeMismatch(format!(
            "loss rows of length {}/{} do not match {t_len} checkpoints",
            loss_s.len(),
            loss_t.len()
        )));
    }
    if sets != t_len {
        return Err(Error::CacheMismatch(format!(
            "neighbor sets cover {sets} checkpoints, trajectory has {t_len}"
        )));
    }
    Ok(())
}

/// Fill `g_s`/`g_t` with the averaged finite-difference gradients of one
/// checkpoint for both loss rows, sharing displacement work.
fn accumulate_pair_gradients(
    traj: &Trajectory,
    i: usize,
    neighbor_set: &[usize],
    loss_s: &[f64],
    loss_t: &[f64],
    g_s: &mut [f64],
    g_t: &mut [f64],
) {
    g_s.fill(0.0);
    g_t.fill(0.0);
    let theta_i = &traj.checkpoints[i];
    let effective: Vec<(usize, f64)> = neighbor_set
        .iter()
        .filter(|&&j| j != i)
        .map(|&j| (j, clamp_dist2(euclid2(theta_i, &traj.checkpoints[j]))))
        .filter(|&(_, d2)| d2 > 0.0)
        .collect();
    if effective.is_empty() {
        return;
    }
    let m = effective.len() as f64;
    for &(j, d2) in &effective {
        let theta_j = &traj.checkpoints[j];
        let coef_s = ((loss_s[j] - loss_s[i]) / d2) / m;
        let coef_t = ((loss_t[j] - loss_t[i]) / d2) / m;
        for (c, (a, b)) in theta_i.iter().zip(theta_j.iter()).enumerate() {
            let delta = b - a;
            g_s[c] += coef_s * delta;
            g_t[c] += coef_t * delta;
        }
    }
}

/// Same value as [`zinf`] computed from the Gram cache alone, expanding the
/// per-checkpoint inner product over neighbor pairs:
/// `(1/|M_i|^2) * sum_{j,k} r_ij(s) r_ik(t) <theta_j - theta_i, theta_k - theta_i>
///  / (dist2[i][j] * dist2[i][k])`.
pub fn zinf_via_gram(
    gram: &GramCache,
    loss_s: &[f64],
    loss_t: &[f64],
    neighbors: &NeighborSets,
) -> Result<f64> {
    let size = gram.size();
    if loss_s.len() != size || loss_t.len() != size {
        return Err(Error::CacheMismatch(format!(
            "loss rows of length {}/{} do not match gram of size {size}",
            loss_s.len(),
            loss_t.len()
        )));
    }
    if neighbors.len() != size {
        return Err(Error::CacheMismatch(format!(
            "neighbor sets cover {} checkpoints, gram has {size}",
            neighbors.len()
        )));
    }

    let mut total = KahanSum::new();
    let mut effective: Vec<usize> = Vec::new();
    for i in 0..size {
        effective.clear();
        effective.extend(
            neighbors
                .set(i)
                .iter()
                .copied()
                .filter(|&j| j != i && gram.dist2(i, j) > 0.0),
        );
        if effective.is_empty() {
            continue;
        }
        let m2 = (effective.len() as f64) * (effective.len() as f64);
        for &j in &effective {
            let r_sj = loss_s[j] - loss_s[i];
            let dj = gram.dist2(i, j);
            for &k in &effective {
                let r_tk = loss_t[k] - loss_t[i];
                let dk = gram.dist2(i, k);
                total.add(r_sj * r_tk * gram.displaced_inner(i, j, k) / (dj * dk) / m2);
            }
        }
    }
    Ok(total.total())
}

/// Variance-based self-influence: the population variance of the example's
/// loss across checkpoints. Touches no parameter vectors.
pub fn zsinf_variance(loss_s: &[f64]) -> Result<f64> {
    if loss_s.len() < 2 {
        return Err(Error::invalid_arg(
            "variance self-influence needs at least 2 checkpoints",
        ));
    }
    let n = loss_s.len() as f64;
    let mut sum = KahanSum::new();
    for &v in loss_s {
        sum.add(v);
    }
    let mean = sum.total() / n;
    let mut sq = KahanSum::new();
    for &v in loss_s {
        let d = v - mean;
        sq.add(d * d);
    }
    Ok(sq.total() / n)
}

/// Checkpoint weighting for TracIn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TracinWeighting {
    /// Every checkpoint weighs 1 (the constant step size is dropped).
    #[default]
    Uniform,
    /// Weigh each checkpoint by the learning rate used to leave it.
    LearningRate,
}

/// Inner TracIn sum over pre-computed per-checkpoint gradient pairs.
pub fn tracin_from_gradients(
    grads_s: &[ParamVector],
    grads_t: &[ParamVector],
    weights: &[f64],
) -> Result<f64> {
    if grads_s.len() != grads_t.len() || grads_s.len() != weights.len() {
        return Err(Error::ShapeMismatch(
            "tracin gradient/weight lists must have equal length".into(),
        ));
    }
    let mut total = KahanSum::new();
    for ((gs, gt), w) in grads_s.iter().zip(grads_t).zip(weights) {
        total.add(w * dot(gs, gt));
    }
    Ok(total.total())
}

/// First-order influence: the weighted sum over checkpoints `0..T-1` of the
/// inner product of exact loss gradients, both restricted to `mask`.
pub fn tracin(
    traj: &Trajectory,
    train_ex: &Example,
    test_ex: &Example,
    mask: &ParamMask,
    weighting: TracinWeighting,
) -> Result<f64> {
    let t = traj.t_max();
    let dim = traj.dim();
    let mut g_s = vec![0.0; dim];
    let mut g_t = vec![0.0; dim];
    let mut total = KahanSum::new();
    for i in 0..t {
        let params = &traj.checkpoints[i];
        traj.spec.grad_into(params, train_ex, mask, &mut g_s)?;
        traj.spec.grad_into(params, test_ex, mask, &mut g_t)?;
        let w = match weighting {
            TracinWeighting::Uniform => 1.0,
            TracinWeighting::LearningRate => traj.learning_rates[i],
        };
        total.add(w * dot(&g_s, &g_t));
    }
    Ok(total.total())
}

/// Agreement between actual per-example loss differences across one
/// checkpoint step and their first-order prediction `grad . dtheta`.
#[derive(Debug, Clone, Serialize)]
pub struct PairValidity {
    /// Step from checkpoint `from` to `from + 1`.
    pub from: usize,
    /// Rank correlation over examples; `None` when the pair is degenerate
    /// (identical checkpoints or constant sides).
    pub spearman: Option<f64>,
    /// Mean absolute first-order residual over examples.
    pub mean_abs_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidityReport {
    pub pairs: Vec<PairValidity>,
    /// Mean Spearman over non-degenerate pairs.
    pub mean_spearman: Option<f64>,
}

/// For every consecutive checkpoint pair, rank-correlate actual loss
/// differences with their first-order predictions over all examples.
pub fn first_order_validity(
    traj: &Trajectory,
    ds: &Dataset,
    mask: &ParamMask,
) -> Result<ValidityReport> {
    let t = traj.t_max();
    if t < 1 {
        return Err(Error::NeedsTwoCheckpoints(traj.checkpoints.len()));
    }

    let pairs: Vec<PairValidity> = (0..t)
        .into_par_iter()
        .map(|i| -> Result<PairValidity> {
            let theta_i = &traj.checkpoints[i];
            let theta_next = &traj.checkpoints[i + 1];
            let delta: Vec<f64> = theta_next
                .iter()
                .zip(theta_i.iter())
                .map(|(b, a)| b - a)
                .collect();
            if delta.iter().all(|&v| v == 0.0) {
                return Ok(PairValidity {
                    from: i,
                    spearman: None,
                    mean_abs_residual: 0.0,
                });
            }
            let mut grad = vec![0.0; traj.dim()];
            let mut actual = Vec::with_capacity(ds.len());
            let mut predicted = Vec::with_capacity(ds.len());
            let mut residual = KahanSum::new();
            for ex in ds.examples() {
                let a = traj.spec.loss(theta_next, ex)? - traj.spec.loss(theta_i, ex)?;
                traj.spec.grad_into(theta_i, ex, mask, &mut grad)?;
                let p = dot(&grad, &delta);
                residual.add((a - p).abs());
                actual.push(a);
                predicted.push(p);
            }
            let rho = spearman_slices(&actual, &predicted).ok();
            Ok(PairValidity {
                from: i,
                spearman: rho,
                mean_abs_residual: residual.total() / ds.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let valid: Vec<f64> = pairs.iter().filter_map(|p| p.spearman).collect();
    let mean_spearman = if valid.is_empty() {
        None
    } else {
        Some(valid.iter().sum::<f64>() / valid.len() as f64)
    };
    Ok(ValidityReport { pairs, mean_spearman })
}

/// Scoring method identifiers, shared with reports and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Zinf,
    ZinfGram,
    ZsinfVar,
    ZsinfNorm,
    Tracin,
    Ssrt,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Zinf => "zinf",
            Method::ZinfGram => "zinf-gram",
            Method::ZsinfVar => "zsinf-var",
            Method::ZsinfNorm => "zsinf-norm",
            Method::Tracin => "tracin",
            Method::Ssrt => "ssrt",
        }
    }

    /// Methods that only ever score an example against itself.
    pub fn self_only(&self) -> bool {
        matches!(self, Method::ZsinfVar | Method::ZsinfNorm)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zinf" => Ok(Method::Zinf),
            "zinf-gram" => Ok(Method::ZinfGram),
            "zsinf-var" | "zsinf-variance" => Ok(Method::ZsinfVar),
            "zsinf-norm" => Ok(Method::ZsinfNorm),
            "tracin" => Ok(Method::Tracin),
            "ssrt" => Ok(Method::Ssrt),
            other => Err(Error::invalid_arg(format!("unknown method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One scored pair. `test_id` is `None` for self-influence entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub train_id: u64,
    pub test_id: Option<u64>,
    pub score: f64,
}

/// Scores for one method over a batch of id pairs, with the configuration
/// snapshot and coarse wall-clock split.
#[derive(Debug, Clone, Serialize)]
pub struct InfluenceReport {
    pub method: Method,
    pub scores: Vec<ScoreEntry>,
    pub config: serde_json::Value,
    pub offline_seconds: f64,
    pub online_seconds: f64,
}

impl InfluenceReport {
    /// CSV form: `train_id,score` for self-influence, otherwise
    /// `train_id,test_id,score`. Scores carry 17 significant digits.
    pub fn to_csv_string(&self) -> String {
        let self_only = self.scores.iter().all(|s| s.test_id.is_none());
        let mut out = String::new();
        if self_only {
            out.push_str("train_id,score\n");
            for s in &self.scores {
                out.push_str(&format!("{},{}\n", s.train_id, fmt_f64(s.score)));
            }
        } else {
            out.push_str("train_id,test_id,score\n");
            for s in &self.scores {
                let test = s.test_id.map_or(s.train_id, |t| t);
                out.push_str(&format!("{},{},{}\n", s.train_id, test, fmt_f64(s.score)));
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        atomic_write(path, self.to_csv_string().as_bytes())
    }

    pub fn write_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        atomic_write(path, &serde_json::to_vec_pretty(self)?)
    }

    /// Scores keyed by id pair, for metric code.
    pub fn score_map(&self) -> HashMap<(u64, Option<u64>), f64> {
        self.scores
            .iter()
            .map(|s| ((s.train_id, s.test_id), s.score))
            .collect()
    }
}

/// Borrowed views of everything a scoring method may need.
///
/// For the zeroth-order methods the trajectory must already be restricted to
/// the masked coordinates (see [`Trajectory::masked`]) so that direct and
/// gram-backed paths agree; TracIn takes the full trajectory plus `mask`.
#[derive(Clone, Copy, Default)]
pub struct ScoringAssets<'a> {
    pub trajectory: Option<&'a Trajectory>,
    pub train_losses: Option<&'a LossMatrix>,
    /// Defaults to `train_losses` when absent.
    pub test_losses: Option<&'a LossMatrix>,
    pub gram: Option<&'a GramCache>,
    pub neighbors: Option<&'a NeighborSets>,
    pub train_data: Option<&'a Dataset>,
    pub test_data: Option<&'a Dataset>,
    pub mask: Option<&'a ParamMask>,
    pub weighting: Option<TracinWeighting>,
}

fn missing(what: &str, remediation: &str) -> Error {
    Error::MissingAsset {
        what: what.into(),
        remediation: remediation.into(),
    }
}

/// Score a batch of id pairs with one method.
///
/// With empty `test_ids` the diagonal is scored (self-influence; entries get
/// `test_id = None`), otherwise the full train x test cross product. Results
/// are written to preassigned slots, so output is identical for any worker
/// count.
pub fn batch_score(
    method: Method,
    assets: &ScoringAssets<'_>,
    train_ids: &[u64],
    test_ids: &[u64],
) -> Result<InfluenceReport> {
    if train_ids.is_empty() {
        return Err(Error::invalid_arg("no train ids requested"));
    }
    if method.self_only() && !test_ids.is_empty() {
        return Err(Error::invalid_arg(format!(
            "{method} is self-influence only; drop the test ids"
        )));
    }
    let started = Instant::now();
    let diagonal = test_ids.is_empty();

    let scores: Vec<ScoreEntry> = match method {
        Method::Ssrt => {
            return Err(Error::invalid_arg(
                "ssrt scores come from the ssrt module, not batch_score",
            ))
        }
        Method::ZsinfVar => {
            let losses = assets.train_losses.ok_or_else(|| missing("loss matrix", "train"))?;
            let columns = resolve_columns(losses, train_ids)?;
            train_ids
                .par_iter()
                .zip(&columns)
                .map(|(&id, col)| {
                    Ok(ScoreEntry {
                        train_id: id,
                        test_id: None,
                        score: zsinf_variance(col)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        Method::ZsinfNorm => {
            let traj = assets.trajectory.ok_or_else(|| missing("trajectory", "train"))?;
            let losses = assets.train_losses.ok_or_else(|| missing("loss matrix", "train"))?;
            let neighbors = assets
                .neighbors
                .ok_or_else(|| missing("neighbor sets", "precompute"))?;
            let columns = resolve_columns(losses, train_ids)?;
            train_ids
                .par_iter()
                .zip(&columns)
                .map(|(&id, col)| {
                    Ok(ScoreEntry {
                        train_id: id,
                        test_id: None,
                        score: zsinf_norm(traj, col, neighbors)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        Method::Zinf | Method::ZinfGram => {
            let neighbors = assets
                .neighbors
                .ok_or_else(|| missing("neighbor sets", "precompute"))?;
            let train_losses = assets.train_losses.ok_or_else(|| missing("loss matrix", "train"))?;
            let test_losses = assets.test_losses.unwrap_or(train_losses);
            let train_cols = resolve_columns(train_losses, train_ids)?;
            let pairs = enumerate_pairs(train_ids, test_ids);
            let test_cols = if diagonal {
                Vec::new()
            } else {
                resolve_columns(test_losses, test_ids)?
            };
            let score_pair = |s: usize, t: usize| -> Result<f64> {
                let col_s = &train_cols[s];
                let col_t = if diagonal { &train_cols[s] } else { &test_cols[t] };
                match method {
                    Method::Zinf => {
                        let traj =
                            assets.trajectory.ok_or_else(|| missing("trajectory", "train"))?;
                        zinf(traj, col_s, col_t, neighbors)
                    }
                    Method::ZinfGram => {
                        let gram = assets.gram.ok_or_else(|| missing("gram cache", "precompute"))?;
                        zinf_via_gram(gram, col_s, col_t, neighbors)
                    }
                    _ => unreachable!(),
                }
            };
            pairs
                .par_iter()
                .map(|&(s, t)| {
                    Ok(ScoreEntry {
                        train_id: train_ids[s],
                        test_id: if diagonal { None } else { Some(test_ids[t]) },
                        score: score_pair(s, t)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        Method::Tracin => {
            let traj = assets.trajectory.ok_or_else(|| missing("trajectory", "train"))?;
            let train_data = assets.train_data.ok_or_else(|| missing("train dataset", "gen-data"))?;
            let test_data = assets.test_data.unwrap_or(train_data);
            let mask = assets.mask.ok_or_else(|| missing("parameter mask", "influence --mask"))?;
            let weighting = assets.weighting.unwrap_or_default();
            let train_exs = resolve_examples(train_data, train_ids)?;
            let test_exs = if diagonal {
                Vec::new()
            } else {
                resolve_examples(test_data, test_ids)?
            };
            let pairs = enumerate_pairs(train_ids, test_ids);
            pairs
                .par_iter()
                .map(|&(s, t)| {
                    let ex_s = train_exs[s];
                    let ex_t = if diagonal { train_exs[s] } else { test_exs[t] };
                    Ok(ScoreEntry {
                        train_id: train_ids[s],
                        test_id: if diagonal { None } else { Some(test_ids[t]) },
                        score: tracin(traj, ex_s, ex_t, mask, weighting)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    let config = json!({
        "method": method.name(),
        "n_train": train_ids.len(),
        "n_test": test_ids.len(),
        "diagonal": diagonal,
        "neighbor_rule": assets.neighbors.map(|n| n.rule()),
        "mask": assets.mask,
        "weighting": assets.weighting,
    });
    Ok(InfluenceReport {
        method,
        scores,
        config,
        offline_seconds: 0.0,
        online_seconds: started.elapsed().as_secs_f64(),
    })
}

fn enumerate_pairs(train_ids: &[u64], test_ids: &[u64]) -> Vec<(usize, usize)> {
    if test_ids.is_empty() {
        (0..train_ids.len()).map(|s| (s, s)).collect()
    } else {
        let mut pairs = Vec::with_capacity(train_ids.len() * test_ids.len());
        for s in 0..train_ids.len() {
            for t in 0..test_ids.len() {
                pairs.push((s, t));
            }
        }
        pairs
    }
}

fn resolve_columns(losses: &LossMatrix, ids: &[u64]) -> Result<Vec<Vec<f64>>> {
    ids.iter()
        .map(|&id| {
            let col = losses
                .column_of_id(id)
                .ok_or_else(|| Error::invalid_arg(format!("id {id} not in loss matrix")))?;
            Ok(losses.column(col))
        })
        .collect()
}

fn resolve_examples<'a>(ds: &'a Dataset, ids: &[u64]) -> Result<Vec<&'a Example>> {
    let by_id: HashMap<u64, &Example> = ds.examples().iter().map(|e| (e.id, e)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| Error::invalid_arg(format!("id {id} not in dataset")))
        })
        .collect()
}
