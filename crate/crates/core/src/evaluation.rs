//! Method comparison: Spearman rank correlation, top-k overlap, linear
//! datamodel scoring, and the experiment orchestrator that compares the
//! influence estimators against the subsample-and-retrain reference.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datasets::{gen_gaussian_two_class, inject_label_noise, load_csv, Dataset};
use crate::error::{Error, Result};
use crate::influence::{batch_score, InfluenceReport, Method, ScoringAssets, TracinWeighting};
use crate::models::{MaskSelector, ModelSpec, ParamMask};
use crate::numeric::KahanSum;
use crate::ssrt::{estimate_self, parse_estimate_csv, run_trials, SsrtConfig, SsrtEntry};
use crate::store::{
    atomic_write, gram_precompute, load_gram, load_loss_matrix, load_trajectory, neighbor_sets,
    GramCache, NeighborRule, NeighborSets,
};
use crate::training::{compute_loss_matrix, train, LossMatrix, OptimizerConfig, Trajectory};

/// Two score vectors over the same aligned id list.
#[derive(Debug, Clone)]
pub struct RankSeries {
    pub ids: Vec<u64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl RankSeries {
    pub fn new(ids: Vec<u64>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if ids.len() != a.len() || ids.len() != b.len() {
            return Err(Error::ShapeMismatch(
                "rank series ids and scores must have equal length".into(),
            ));
        }
        if ids.len() < 2 {
            return Err(Error::invalid_arg("rank series needs at least 2 entries"));
        }
        Ok(Self { ids, a, b })
    }
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
/// Tie-group means are computed as `(first + last) / 2`, which is exact in
/// floating point.
pub fn average_ranks(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_arg("scores must be finite to rank"));
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let rank = ((start + 1) + (end + 1)) as f64 / 2.0;
        for &i in &order[start..=end] {
            ranks[i] = rank;
        }
        start = end + 1;
    }
    Ok(ranks)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den_a = 0.0;
    let mut den_b = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        num += dx * dy;
        den_a += dx * dx;
        den_b += dy * dy;
    }
    num / (den_a * den_b).sqrt()
}

/// Spearman rank correlation with average-rank tie handling.
pub fn spearman(series: &RankSeries) -> Result<f64> {
    spearman_slices(&series.a, &series.b)
}

pub fn spearman_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch("spearman inputs differ in length".into()));
    }
    if a.len() < 2 {
        return Err(Error::invalid_arg("spearman needs at least 2 points"));
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(a) || constant(b) {
        return Err(Error::DegenerateInput(
            "spearman is undefined for a constant score vector".into(),
        ));
    }
    let ra = average_ranks(a)?;
    let rb = average_ranks(b)?;
    Ok(pearson(&ra, &rb))
}

/// Overlap percentage of the top-k sets at each requested k.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OverlapCurve {
    pub points: Vec<(usize, f64)>,
}

/// Ids ordered by descending score, ties broken by ascending id.
pub fn rank_ids_descending(scores: &[(u64, f64)]) -> Vec<u64> {
    let mut order: Vec<(u64, f64)> = scores.to_vec();
    order.sort_by(|(ia, sa), (ib, sb)| {
        sb.partial_cmp(sa).expect("scores are finite").then(ia.cmp(ib))
    });
    order.into_iter().map(|(id, _)| id).collect()
}

/// Percentage of shared ids among the k highest-scored examples of two score
/// sets, for each k. Both sets must cover exactly the same ids.
pub fn topk_overlap(a: &[(u64, f64)], b: &[(u64, f64)], ks: &[usize]) -> Result<OverlapCurve> {
    let ids_a: BTreeSet<u64> = a.iter().map(|(id, _)| *id).collect();
    let ids_b: BTreeSet<u64> = b.iter().map(|(id, _)| *id).collect();
    if ids_a.len() != a.len() || ids_b.len() != b.len() {
        return Err(Error::IdMismatch("duplicate ids in a score set".into()));
    }
    if ids_a != ids_b {
        return Err(Error::IdMismatch(format!(
            "score sets cover different ids ({} vs {} entries)",
            ids_a.len(),
            ids_b.len()
        )));
    }
    let n = a.len();
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.iter().any(|&k| k == 0 || k > n) {
        return Err(Error::invalid_arg(format!("every k must be in [1, {n}]")));
    }

    let ranked_a = rank_ids_descending(a);
    let ranked_b = rank_ids_descending(b);
    let points = ks
        .into_iter()
        .map(|k| {
            let top_a: BTreeSet<u64> = ranked_a[..k].iter().copied().collect();
            let common = ranked_b[..k].iter().filter(|id| top_a.contains(id)).count();
            (k, 100.0 * common as f64 / k as f64)
        })
        .collect();
    Ok(OverlapCurve { points })
}

/// Linear datamodel score: Spearman correlation, across subsets, between the
/// summed predicted scores of each subset and the actual retrained loss,
/// averaged over targets.
pub fn lds(
    predicted: &[(u64, f64)],
    subsets: &[Vec<u64>],
    retrained_losses: &[Vec<f64>],
) -> Result<f64> {
    if subsets.len() < 2 {
        return Err(Error::invalid_arg("lds needs at least 2 subsets"));
    }
    if subsets.len() != retrained_losses.len() {
        return Err(Error::ShapeMismatch(
            "one retrained loss row per subset required".into(),
        ));
    }
    let targets = retrained_losses[0].len();
    if targets == 0 || retrained_losses.iter().any(|r| r.len() != targets) {
        return Err(Error::ShapeMismatch("ragged retrained loss rows".into()));
    }
    let by_id: BTreeMap<u64, f64> = predicted.iter().copied().collect();
    let group_sums: Vec<f64> = subsets
        .iter()
        .map(|subset| {
            let mut sum = KahanSum::new();
            for id in subset {
                let s = by_id
                    .get(id)
                    .ok_or_else(|| Error::invalid_arg(format!("no predicted score for id {id}")))?;
                sum.add(*s);
            }
            Ok(sum.total())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total = 0.0;
    for target in 0..targets {
        let actual: Vec<f64> = retrained_losses.iter().map(|r| r[target]).collect();
        total += spearman_slices(&group_sums, &actual)?;
    }
    Ok(total / targets as f64)
}

// ---------------------------------------------------------------------------
// Experiment orchestration
// ---------------------------------------------------------------------------

/// Everything needed to produce the assets from scratch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRecipe {
    pub n: usize,
    pub d: usize,
    pub margin: f64,
    pub data_seed: u64,
    /// Fraction of labels to flip before training (0 disables).
    pub flip_fraction: f64,
    pub flip_seed: u64,
    pub spec: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub ssrt_trials: usize,
    pub ssrt_fraction: f64,
    pub ssrt_seed: u64,
}

/// Pre-built artifact locations. Only the assets the chosen methods need are
/// ever read.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AssetPaths {
    pub data: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
    pub loss_matrix: Option<PathBuf>,
    pub gram: Option<PathBuf>,
    pub ssrt_scores: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum PlanSource {
    Recipe(ExperimentRecipe),
    Assets(AssetPaths),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub methods: Vec<Method>,
    pub neighbor_rule: NeighborRule,
    pub mask: MaskSelector,
    pub k_grid: Vec<usize>,
    pub epochs_window: Option<(usize, usize)>,
    pub source: PlanSource,
}

pub const DEFAULT_K_GRID: [usize; 6] = [1, 5, 10, 25, 50, 100];

/// Metrics for one method against the SSRT reference.
#[derive(Debug, Clone, Serialize)]
pub struct MethodEvaluation {
    pub method: Method,
    pub spearman_vs_ssrt: f64,
    pub overlap: OverlapCurve,
    pub offline_seconds: f64,
    pub online_seconds: f64,
    /// Share of flipped ids ranked in the method's top decile; present only
    /// when the recipe injected label noise.
    pub flipped_in_top_decile_pct: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub created_unix_seconds: u64,
    /// Which SSRT column the rankings used.
    pub ssrt_orientation: &'static str,
    pub config: serde_json::Value,
    pub methods: Vec<MethodEvaluation>,
    pub ssrt_offline_seconds: f64,
    pub ssrt_failures: usize,
    pub ssrt_flipped_in_top_decile_pct: Option<f64>,
}

struct PreparedAssets {
    dataset: Option<Dataset>,
    trajectory: Option<Trajectory>,
    masked_trajectory: Option<Trajectory>,
    losses: Option<LossMatrix>,
    gram: Option<GramCache>,
    neighbors: Option<NeighborSets>,
    mask: Option<ParamMask>,
    ssrt_self: Vec<SsrtEntry>,
    ssrt_failures: usize,
    flipped: Option<BTreeSet<u64>>,
    train_seconds: f64,
    loss_seconds: f64,
    gram_seconds: f64,
    ssrt_seconds: f64,
}

fn needs_loss(m: Method) -> bool {
    matches!(m, Method::Zinf | Method::ZinfGram | Method::ZsinfVar | Method::ZsinfNorm)
}

fn needs_gram(m: Method) -> bool {
    matches!(m, Method::Zinf | Method::ZinfGram | Method::ZsinfNorm)
}

fn needs_trajectory(m: Method) -> bool {
    matches!(m, Method::Zinf | Method::ZsinfNorm | Method::Tracin)
}

fn needs_dataset(m: Method) -> bool {
    matches!(m, Method::Tracin)
}

fn offline_seconds_for(m: Method, a: &PreparedAssets) -> f64 {
    let mut s = a.train_seconds;
    if needs_loss(m) {
        s += a.loss_seconds;
    }
    if needs_gram(m) {
        s += a.gram_seconds;
    }
    s
}

fn missing(what: &str, remediation: &str) -> Error {
    Error::MissingAsset {
        what: what.into(),
        remediation: remediation.into(),
    }
}

fn existing(path: &Option<PathBuf>, what: &str, remediation: &str) -> Result<PathBuf> {
    match path {
        Some(p) if p.exists() => Ok(p.clone()),
        _ => Err(missing(what, remediation)),
    }
}

fn prepare_recipe(plan: &ExperimentPlan, recipe: &ExperimentRecipe) -> Result<PreparedAssets> {
    let clean = gen_gaussian_two_class(recipe.n, recipe.d, recipe.margin, recipe.data_seed)?;
    let (dataset, flipped) = if recipe.flip_fraction > 0.0 {
        let (noisy, flipped) = inject_label_noise(&clean, recipe.flip_fraction, recipe.flip_seed)?;
        (noisy, Some(flipped))
    } else {
        (clean, None)
    };

    let t0 = Instant::now();
    let mut trajectory = train(&dataset, &recipe.spec, &recipe.optimizer)?;
    let train_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut losses = compute_loss_matrix(&trajectory, &dataset)?;
    let loss_seconds = t1.elapsed().as_secs_f64();

    if let Some((a, b)) = plan.epochs_window {
        trajectory = trajectory.window(a, b)?;
        losses = losses.window(a, b)?;
    }

    let mask = ParamMask::resolve(plan.mask, &recipe.spec)?;
    let any_gram = plan.methods.iter().any(|&m| needs_gram(m));
    let (masked_trajectory, gram, neighbors, gram_seconds) = if any_gram {
        let t2 = Instant::now();
        let masked = trajectory.masked(&mask)?;
        let gram = gram_precompute(&trajectory, &mask)?;
        let neighbors = neighbor_sets(&gram, plan.neighbor_rule)?;
        (Some(masked), Some(gram), Some(neighbors), t2.elapsed().as_secs_f64())
    } else {
        (None, None, None, 0.0)
    };

    let t3 = Instant::now();
    let ssrt_cfg = SsrtConfig {
        trials: recipe.ssrt_trials,
        fraction: recipe.ssrt_fraction,
        base_seed: recipe.ssrt_seed,
        spec: recipe.spec.clone(),
        optimizer: recipe.optimizer.clone(),
    };
    let trials = run_trials(&dataset, &dataset, &ssrt_cfg)?;
    let estimate = estimate_self(&trials)?;
    let ssrt_seconds = t3.elapsed().as_secs_f64();

    Ok(PreparedAssets {
        dataset: Some(dataset),
        trajectory: Some(trajectory),
        masked_trajectory,
        losses: Some(losses),
        gram,
        neighbors,
        mask: Some(mask),
        ssrt_self: estimate.entries,
        ssrt_failures: estimate.failures,
        flipped,
        train_seconds,
        loss_seconds,
        gram_seconds,
        ssrt_seconds,
    })
}

fn prepare_assets(plan: &ExperimentPlan, paths: &AssetPaths) -> Result<PreparedAssets> {
    let methods = &plan.methods;
    let any = |f: fn(Method) -> bool| methods.iter().any(|&m| f(m));

    let dataset = if any(needs_dataset) {
        let p = existing(&paths.data, "dataset csv", "gen-data")?;
        Some(load_csv(&p, "label", b',')?)
    } else {
        None
    };
    let mut trajectory = if any(needs_trajectory) {
        let p = existing(&paths.trajectory, "trajectory file", "train")?;
        Some(load_trajectory(&p)?)
    } else {
        None
    };
    let mut losses = if any(needs_loss) {
        let p = existing(&paths.loss_matrix, "loss matrix file", "train")?;
        Some(load_loss_matrix(&p)?)
    } else {
        None
    };
    let mut gram = if any(needs_gram) {
        let p = existing(&paths.gram, "gram cache file", "precompute")?;
        Some(load_gram(&p)?)
    } else {
        None
    };

    if let Some((a, b)) = plan.epochs_window {
        if let Some(t) = trajectory.take() {
            trajectory = Some(t.window(a, b)?);
        }
        if let Some(l) = losses.take() {
            losses = Some(l.window(a, b)?);
        }
        if let Some(g) = gram.take() {
            gram = Some(g.window(a, b)?);
        }
    }

    let mask = match (&trajectory, &gram) {
        (Some(t), _) => Some(ParamMask::resolve(plan.mask, &t.spec)?),
        (None, Some(g)) => Some(*g.mask()),
        (None, None) => None,
    };
    let masked_trajectory = match (&trajectory, &mask) {
        (Some(t), Some(m)) if methods.iter().any(|&x| matches!(x, Method::Zinf | Method::ZsinfNorm)) => {
            Some(t.masked(m)?)
        }
        _ => None,
    };
    let neighbors = match &gram {
        Some(g) => Some(neighbor_sets(g, plan.neighbor_rule)?),
        None => None,
    };

    let ssrt_path = existing(&paths.ssrt_scores, "ssrt score csv", "ssrt")?;
    let entries = parse_estimate_csv(&std::fs::read_to_string(&ssrt_path)?)?;
    let ssrt_self: Vec<SsrtEntry> = entries
        .into_iter()
        .filter(|e| e.train_id == e.target_id)
        .collect();

    Ok(PreparedAssets {
        dataset,
        trajectory,
        masked_trajectory,
        losses,
        gram,
        neighbors,
        mask,
        ssrt_self,
        ssrt_failures: 0,
        flipped: None,
        train_seconds: 0.0,
        loss_seconds: 0.0,
        gram_seconds: 0.0,
        ssrt_seconds: 0.0,
    })
}

/// Share of `flagged` ids found in the top decile of the scores.
fn top_decile_recovery(scores: &[(u64, f64)], flagged: &BTreeSet<u64>) -> Option<f64> {
    if flagged.is_empty() {
        return None;
    }
    let k = (scores.len() / 10).max(1);
    let ranked = rank_ids_descending(scores);
    let top: BTreeSet<u64> = ranked[..k].iter().copied().collect();
    let hit = flagged.iter().filter(|id| top.contains(id)).count();
    Some(100.0 * hit as f64 / flagged.len() as f64)
}

/// Run every planned method over the ids covered by the SSRT reference,
/// compare rankings, and write the report directory:
/// `report.json`, `scores_<method>.csv`, `overlap_<method>.csv`,
/// `timings.csv`, `scores_ssrt.csv`.
pub fn run_experiment(plan: &ExperimentPlan, out_dir: impl AsRef<Path>) -> Result<ExperimentReport> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;

    let mut methods: Vec<Method> = plan.methods.clone();
    methods.sort_by_key(|m| m.name());
    methods.dedup();
    if methods.is_empty() {
        return Err(Error::invalid_arg("plan lists no methods"));
    }
    if methods.contains(&Method::Ssrt) {
        return Err(Error::invalid_arg(
            "ssrt is the reference, not a planned method",
        ));
    }

    let assets = match &plan.source {
        PlanSource::Recipe(recipe) => prepare_recipe(plan, recipe)?,
        PlanSource::Assets(paths) => prepare_assets(plan, paths)?,
    };

    let mut train_ids: Vec<u64> = assets.ssrt_self.iter().map(|e| e.train_id).collect();
    train_ids.sort_unstable();
    if train_ids.len() < 2 {
        return Err(Error::invalid_arg("ssrt reference covers fewer than 2 ids"));
    }
    let ssrt_by_id: BTreeMap<u64, f64> = assets
        .ssrt_self
        .iter()
        .map(|e| (e.train_id, e.helpfulness))
        .collect();
    let ssrt_scores: Vec<(u64, f64)> = train_ids.iter().map(|id| (*id, ssrt_by_id[id])).collect();

    let k_grid: Vec<usize> = plan
        .k_grid
        .iter()
        .copied()
        .filter(|&k| k >= 1 && k <= train_ids.len())
        .collect();

    let scoring = ScoringAssets {
        trajectory: None, // set per method below
        train_losses: assets.losses.as_ref(),
        test_losses: None,
        gram: assets.gram.as_ref(),
        neighbors: assets.neighbors.as_ref(),
        train_data: assets.dataset.as_ref(),
        test_data: None,
        mask: assets.mask.as_ref(),
        weighting: Some(TracinWeighting::Uniform),
    };

    let mut evaluations = Vec::with_capacity(methods.len());
    let mut reports: Vec<(Method, InfluenceReport)> = Vec::with_capacity(methods.len());
    for &method in &methods {
        let per_method = ScoringAssets {
            trajectory: match method {
                Method::Zinf | Method::ZsinfNorm => assets.masked_trajectory.as_ref(),
                _ => assets.trajectory.as_ref(),
            },
            ..scoring
        };
        let mut report = batch_score(method, &per_method, &train_ids, &[])?;
        report.offline_seconds = offline_seconds_for(method, &assets);

        let scores: Vec<(u64, f64)> = report.scores.iter().map(|s| (s.train_id, s.score)).collect();
        let series = RankSeries::new(
            train_ids.clone(),
            scores.iter().map(|(_, s)| *s).collect(),
            ssrt_scores.iter().map(|(_, s)| *s).collect(),
        )?;
        let rho = spearman(&series)?;
        let overlap = topk_overlap(&scores, &ssrt_scores, &k_grid)?;
        let flipped_pct = assets
            .flipped
            .as_ref()
            .and_then(|f| top_decile_recovery(&scores, f));

        evaluations.push(MethodEvaluation {
            method,
            spearman_vs_ssrt: rho,
            overlap,
            offline_seconds: report.offline_seconds,
            online_seconds: report.online_seconds,
            flipped_in_top_decile_pct: flipped_pct,
        });
        reports.push((method, report));
    }

    let ssrt_flipped_pct = assets
        .flipped
        .as_ref()
        .and_then(|f| top_decile_recovery(&ssrt_scores, f));

    let report = ExperimentReport {
        created_unix_seconds: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        ssrt_orientation: "helpfulness",
        config: json!({
            "plan": plan,
            "n_ids": train_ids.len(),
            "k_grid": k_grid,
            "topk_tie_break": "ascending-id",
        }),
        methods: evaluations,
        ssrt_offline_seconds: assets.ssrt_seconds,
        ssrt_failures: assets.ssrt_failures,
        ssrt_flipped_in_top_decile_pct: ssrt_flipped_pct,
    };

    // Score CSVs, one per method, plus the reference.
    for (method, inf_report) in &reports {
        inf_report.write_csv(out_dir.join(format!("scores_{}.csv", method.name())))?;
    }
    let mut ssrt_csv = String::from("train_id,score\n");
    for (id, s) in &ssrt_scores {
        ssrt_csv.push_str(&format!("{},{}\n", id, crate::numeric::fmt_f64(*s)));
    }
    atomic_write(out_dir.join("scores_ssrt.csv"), ssrt_csv.as_bytes())?;

    for eval in &report.methods {
        let mut text = String::from("k,overlap_pct\n");
        for (k, pct) in &eval.overlap.points {
            text.push_str(&format!("{k},{pct}\n"));
        }
        atomic_write(
            out_dir.join(format!("overlap_{}.csv", eval.method.name())),
            text.as_bytes(),
        )?;
    }

    let mut timings = String::from("method,offline_s,online_s\n");
    for eval in &report.methods {
        timings.push_str(&format!(
            "{},{:.6},{:.6}\n",
            eval.method.name(),
            eval.offline_seconds,
            eval.online_seconds
        ));
    }
    timings.push_str(&format!("ssrt,{:.6},0.000000\n", assets.ssrt_seconds));
    atomic_write(out_dir.join("timings.csv"), timings.as_bytes())?;

    atomic_write(out_dir.join("report.json"), &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}
