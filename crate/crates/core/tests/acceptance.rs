//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured runtime. Run with `cargo test --test acceptance -- --nocapture`
//! to see the lines.

use std::time::{Duration, Instant};

use rand::Rng;

use influence_lab::datasets::gen_gaussian_two_class;
use influence_lab::evaluation::{
    run_experiment, spearman_slices, topk_overlap, ExperimentPlan, ExperimentRecipe, PlanSource,
};
use influence_lab::influence::{
    batch_score, fd_gradient, first_order_validity, robust_fd_gradient, zinf, zinf_via_gram,
    zsinf_norm, Method, ScoringAssets, TracinWeighting,
};
use influence_lab::models::{MaskSelector, ModelSpec, ParamMask, ParamVector};
use influence_lab::numeric::{dist2, dot, stream_rng};
use influence_lab::ssrt::{enumerate_memberships, run_with_memberships, ssrt_influence};
use influence_lab::store::{gram_precompute, neighbor_sets, NeighborRule};
use influence_lab::training::{compute_loss_matrix, train, OptimizerConfig, Trajectory};

fn report(criterion: u32, elapsed: Duration, summary: &str) {
    println!(
        "criterion {criterion:02} PASS ({:.2}s): {summary}",
        elapsed.as_secs_f64()
    );
}

fn check_runtime(criterion: u32, elapsed: Duration, budget: Duration) {
    assert!(
        elapsed <= budget,
        "criterion {criterion} exceeded its runtime budget: {:.2}s > {:.2}s",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
}

fn random_trajectory(t: usize, dim: usize, seed: u64) -> Trajectory {
    let mut rng = stream_rng(seed, 0);
    let checkpoints: Vec<ParamVector> = (0..=t)
        .map(|_| {
            ParamVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        })
        .collect();
    Trajectory {
        checkpoints,
        spec: ModelSpec::linear_logistic(dim.max(2) - 1).unwrap(),
        optimizer: OptimizerConfig::sgd(0.1, 1, t.max(1), 0),
        learning_rates: vec![0.1; t.max(1)],
    }
}

fn random_row(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, 1);
    (0..len).map(|_| rng.random_range(0.0..3.0)).collect()
}

/// Criterion 1: over 1,000 random checkpoint pairs with d in 1..=256, the
/// finite-difference gradient reproduces the observed loss difference along
/// the observed displacement to 1e-12 relative. Runtime < 1 s.
#[test]
fn criterion_01_closed_form_consistency() {
    let start = Instant::now();
    let mut rng = stream_rng(1001, 0);
    let mut checked = 0;
    while checked < 1000 {
        let d = rng.random_range(1..=256);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let la: f64 = rng.random_range(0.0..6.0);
        let lb: f64 = rng.random_range(0.0..6.0);
        if dist2(&a, &b) == 0.0 {
            continue;
        }
        let g = fd_gradient(&a, &b, la, lb).unwrap();
        let delta: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x - y).collect();
        let predicted = dot(&g, &delta);
        let diff = lb - la;
        assert!(
            (predicted - diff).abs() <= 1e-12 * (1.0 + diff.abs()),
            "instance {checked}: {predicted} vs {diff}"
        );
        checked += 1;
    }
    let elapsed = start.elapsed();
    check_runtime(1, elapsed, Duration::from_secs(1));
    report(1, elapsed, "fd gradient reproduces 1000 loss differences to 1e-12 relative");
}

/// Criterion 2: over 200 random trajectories (T <= 10, d <= 200) and random
/// loss rows, the gram-backed score matches the direct score to
/// 1e-9 * (1 + |zinf|). Runtime < 10 s.
#[test]
fn criterion_02_gram_path_equivalence() {
    let start = Instant::now();
    let mut rng = stream_rng(2002, 0);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let t = rng.random_range(2..=10);
        let dim = rng.random_range(2..=200);
        let k = rng.random_range(1..=t);
        let traj = random_trajectory(t, dim, 9000 + case);
        let mask = ParamMask::resolve(MaskSelector::All, &traj.spec).unwrap();
        let gram = gram_precompute(&traj, &mask).unwrap();
        let neighbors = neighbor_sets(&gram, NeighborRule::KNearest(k)).unwrap();
        let loss_s = random_row(t + 1, 9500 + case);
        let loss_t = random_row(t + 1, 9700 + case);
        let direct = zinf(&traj, &loss_s, &loss_t, &neighbors).unwrap();
        let via_gram = zinf_via_gram(&gram, &loss_s, &loss_t, &neighbors).unwrap();
        let err = (via_gram - direct).abs() / (1.0 + direct.abs());
        worst = worst.max(err);
        assert!(err <= 1e-9, "case {case}: relative error {err}");
    }
    let elapsed = start.elapsed();
    check_runtime(2, elapsed, Duration::from_secs(10));
    report(2, elapsed, &format!("gram path matches direct path on 200 trajectories (worst rel err {worst:.2e})"));
}

/// Criterion 3: over 500 random instances, the per-checkpoint Cauchy-Schwarz
/// bound and the full variance-bound chain hold with at most 1e-10 absolute
/// slack. Runtime < 5 s.
#[test]
fn criterion_03_cauchy_schwarz_and_variance_chain() {
    let start = Instant::now();
    let mut rng = stream_rng(3003, 0);
    for case in 0..500u64 {
        let t = rng.random_range(2..=8);
        let dim = rng.random_range(2..=40);
        let traj = random_trajectory(t, dim, 30_000 + case);
        let losses = random_row(t + 1, 31_000 + case);
        let mask = ParamMask::resolve(MaskSelector::All, &traj.spec).unwrap();
        let gram = gram_precompute(&traj, &mask).unwrap();

        // Per-checkpoint bound with full neighbor sets.
        for i in 0..=t {
            let others: Vec<usize> = (0..=t).filter(|&j| j != i).collect();
            let g = robust_fd_gradient(i, &others, &traj, &losses).unwrap();
            let lhs: f64 = g.vector.iter().map(|v| v * v).sum();
            let m = g.neighbors.len() as f64;
            let mut r2 = 0.0;
            let mut inv = 0.0;
            for &j in &g.neighbors {
                r2 += (losses[j] - losses[i]) * (losses[j] - losses[i]);
                inv += 1.0 / gram.dist2(i, j);
            }
            assert!(
                lhs <= r2 * inv / (m * m) + 1e-10,
                "case {case}, checkpoint {i}: bound violated"
            );
        }

        // Chain: total self-influence <= c * sum of squared loss spreads.
        let full = neighbor_sets(&gram, NeighborRule::KNearest(t)).unwrap();
        let zs = zsinf_norm(&traj, &losses, &full).unwrap();
        let c = (0..=t)
            .map(|i| {
                (0..=t)
                    .filter(|&j| j != i)
                    .map(|j| 1.0 / gram.dist2(i, j))
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let mut spread = 0.0;
        for i in 0..=t {
            for j in 0..=t {
                if i != j {
                    spread += (losses[i] - losses[j]) * (losses[i] - losses[j]);
                }
            }
        }
        assert!(zs <= c * spread + 1e-10, "case {case}: chain violated");
    }
    let elapsed = start.elapsed();
    check_runtime(3, elapsed, Duration::from_secs(5));
    report(3, elapsed, "Cauchy-Schwarz bound and variance chain hold on 500 instances");
}

/// Criterion 4: norm-form self-influence is bitwise identical to the pair
/// score of an example with itself, on 100 random instances.
#[test]
fn criterion_04_self_influence_identity() {
    let start = Instant::now();
    let mut rng = stream_rng(4004, 0);
    for case in 0..100u64 {
        let t = rng.random_range(2..=9);
        let dim = rng.random_range(2..=50);
        let k = rng.random_range(1..=t);
        let traj = random_trajectory(t, dim, 40_000 + case);
        let mask = ParamMask::resolve(MaskSelector::All, &traj.spec).unwrap();
        let gram = gram_precompute(&traj, &mask).unwrap();
        let neighbors = neighbor_sets(&gram, NeighborRule::KNearest(k)).unwrap();
        let row = random_row(t + 1, 41_000 + case);
        let a = zsinf_norm(&traj, &row, &neighbors).unwrap();
        let b = zinf(&traj, &row, &row, &neighbors).unwrap();
        assert_eq!(a.to_bits(), b.to_bits(), "case {case}");
    }
    let elapsed = start.elapsed();
    report(4, elapsed, "zsinf-norm is bitwise zinf(x, x) on 100 instances");
}

/// Criterion 5: on an 8-example convex logistic problem trained by
/// deterministic full-batch gradient descent, the trial estimator over all
/// C(8,6) = 28 enumerated subsamples equals a from-scratch brute-force
/// assembly of the conditional mean difference to 1e-10. Runtime < 30 s.
#[test]
fn criterion_05_ssrt_exhaustive_oracle() {
    let start = Instant::now();
    // Non-separable two-class data so full-batch GD genuinely converges.
    let points: Vec<(Vec<f64>, usize)> = vec![
        (vec![1.2, 0.4], 1),
        (vec![0.8, -0.3], 1),
        (vec![1.6, 0.9], 1),
        (vec![0.6, 0.1], 0), // overlaps the positive side
        (vec![-1.0, 0.5], 0),
        (vec![-1.4, -0.2], 0),
        (vec![-0.7, 0.8], 0),
        (vec![-1.1, -0.9], 0),
    ];
    let examples: Vec<influence_lab::datasets::Example> = points
        .into_iter()
        .enumerate()
        .map(|(id, (features, label))| influence_lab::datasets::Example {
            features,
            label,
            id: id as u64,
        })
        .collect();
    let ds = influence_lab::datasets::Dataset::new(examples, 2, 2, "criterion-5").unwrap();
    let spec = ModelSpec::linear_logistic(2).unwrap();
    let opt = OptimizerConfig::sgd(0.5, 8, 400, 55);

    let memberships = enumerate_memberships(8, 6);
    assert_eq!(memberships.len(), 28);
    let trials = run_with_memberships(&ds, &ds, memberships.clone(), &spec, &opt, 7).unwrap();
    assert_eq!(trials.failures(), 0);

    let mut worst: f64 = 0.0;
    for s in 0..8usize {
        for t in 0..8usize {
            let got = ssrt_influence(&trials, s as u64, t as u64).unwrap();
            // Brute force: retrain per subset and average with plain loops.
            let mut with = Vec::new();
            let mut without = Vec::new();
            for (k, row) in memberships.iter().enumerate() {
                let indices: Vec<usize> = row
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &b)| b.then_some(i))
                    .collect();
                let sub = ds.subset(&indices).unwrap();
                let mut o = opt.clone();
                o.seed = 7 + k as u64;
                let traj = train(&sub, &spec, &o).unwrap();
                let loss = spec
                    .loss(traj.checkpoints.last().unwrap(), &ds.examples()[t])
                    .unwrap();
                if row[s] {
                    with.push(loss);
                } else {
                    without.push(loss);
                }
            }
            let want = with.iter().sum::<f64>() / with.len() as f64
                - without.iter().sum::<f64>() / without.len() as f64;
            let err = (got - want).abs();
            worst = worst.max(err);
            assert!(err <= 1e-10, "pair ({s},{t}): {got} vs {want}");
        }
    }
    let elapsed = start.elapsed();
    check_runtime(5, elapsed, Duration::from_secs(30));
    report(5, elapsed, &format!("28-subsample enumeration matches brute force on all 64 pairs (worst abs err {worst:.2e})"));
}

/// Criterion 6: first-order validity at desk scale. A linear-logistic model
/// (d = 100, n = 2000, eta = 1e-3) reaches mean per-pair Spearman >= 0.9; an
/// MLP [100, 64, 32, 2] trained on the same data scores strictly lower.
/// Runtime < 3 min.
#[test]
fn criterion_06_first_order_validity_ordering() {
    let start = Instant::now();
    let ds = gen_gaussian_two_class(2000, 100, 0.5, 41).unwrap();

    let linear_spec = ModelSpec::linear_logistic(100).unwrap();
    let opt = OptimizerConfig::sgd(1e-3, 32, 8, 42);
    let linear_traj = train(&ds, &linear_spec, &opt).unwrap();
    let linear_mask = ParamMask::resolve(MaskSelector::All, &linear_spec).unwrap();
    let linear = first_order_validity(&linear_traj, &ds, &linear_mask)
        .unwrap()
        .mean_spearman
        .unwrap();

    let mlp_spec = ModelSpec::mlp(vec![100, 64, 32, 2]).unwrap();
    let mlp_traj = train(&ds, &mlp_spec, &opt).unwrap();
    let mlp_mask = ParamMask::resolve(MaskSelector::All, &mlp_spec).unwrap();
    let mlp = first_order_validity(&mlp_traj, &ds, &mlp_mask)
        .unwrap()
        .mean_spearman
        .unwrap();

    assert!(linear >= 0.9, "linear mean spearman {linear} < 0.9");
    assert!(
        mlp < linear,
        "mlp validity {mlp} not strictly below linear {linear}"
    );
    let elapsed = start.elapsed();
    check_runtime(6, elapsed, Duration::from_secs(180));
    report(6, elapsed, &format!("first-order validity: linear {linear:.4} >= 0.9 > mlp {mlp:.4}"));
}

/// Criterion 7: mislabeled-detection analogue. Synthetic data (n = 2000,
/// d = 100) with 5% flipped labels, 30-epoch training, SSRT with 100 trials
/// at 0.7 fraction: Spearman(zsinf-variance, SSRT helpfulness) >= 0.5 and at
/// least 80% of flipped ids land in the top decile by zsinf-variance.
/// Runtime < 10 min.
#[test]
fn criterion_07_mislabeled_detection() {
    let start = Instant::now();
    let recipe = ExperimentRecipe {
        n: 2000,
        d: 100,
        margin: 0.5,
        data_seed: 1,
        flip_fraction: 0.05,
        flip_seed: 2,
        spec: ModelSpec::linear_logistic(100).unwrap(),
        optimizer: OptimizerConfig::sgd(0.01, 50, 30, 3),
        ssrt_trials: 100,
        ssrt_fraction: 0.7,
        ssrt_seed: 4,
    };
    let plan = ExperimentPlan {
        methods: vec![Method::ZsinfVar],
        neighbor_rule: NeighborRule::KNearest(4),
        mask: MaskSelector::All,
        k_grid: vec![1, 5, 10, 25, 50, 100],
        epochs_window: Some((10, 30)),
        source: PlanSource::Recipe(recipe),
    };
    let dir = tempfile::tempdir().unwrap();
    let result = run_experiment(&plan, dir.path().join("report")).unwrap();

    let eval = &result.methods[0];
    let rho = eval.spearman_vs_ssrt;
    let flipped = eval.flipped_in_top_decile_pct.unwrap();
    assert!(rho >= 0.5, "spearman {rho} < 0.5");
    assert!(flipped >= 80.0, "only {flipped}% of flipped ids in the top decile");
    let elapsed = start.elapsed();
    check_runtime(7, elapsed, Duration::from_secs(600));
    report(7, elapsed, &format!("mislabel detection: spearman {rho:.3}, {flipped:.0}% flipped ids in top decile"));
}

/// Criterion 8: on one full-batch GD step, halving the step size shrinks the
/// mean absolute first-order residual by at least 3.5x. Runtime < 10 s.
#[test]
fn criterion_08_tracin_step_size_scaling() {
    let start = Instant::now();
    let ds = gen_gaussian_two_class(256, 20, 0.5, 81).unwrap();
    let spec = ModelSpec::linear_logistic(20).unwrap();
    let mask = ParamMask::resolve(MaskSelector::All, &spec).unwrap();
    let residual_at = |eta: f64| {
        let opt = OptimizerConfig::sgd(eta, ds.len(), 1, 82);
        let traj = train(&ds, &spec, &opt).unwrap();
        first_order_validity(&traj, &ds, &mask).unwrap().pairs[0].mean_abs_residual
    };
    let big = residual_at(2e-4);
    let small = residual_at(1e-4);
    let ratio = big / small;
    assert!(ratio >= 3.5, "residual ratio {ratio} < 3.5");
    let elapsed = start.elapsed();
    check_runtime(8, elapsed, Duration::from_secs(10));
    report(8, elapsed, &format!("halving eta shrinks the first-order residual {ratio:.2}x"));
}

/// Criterion 9: spearman and top-k overlap match independent brute-force
/// implementations exactly on 1,000 random vectors (length <= 50, with ties).
#[test]
fn criterion_09_metric_oracles() {
    let start = Instant::now();

    fn oracle_ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let less = v.iter().filter(|&&y| y < x).count();
                let eq = v.iter().filter(|&&y| y == x).count();
                (2 * less + eq + 1) as f64 / 2.0
            })
            .collect()
    }
    fn oracle_spearman(a: &[f64], b: &[f64]) -> f64 {
        let ra = oracle_ranks(a);
        let rb = oracle_ranks(b);
        let n = ra.len() as f64;
        let ma = ra.iter().sum::<f64>() / n;
        let mb = rb.iter().sum::<f64>() / n;
        let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
        for (x, y) in ra.iter().zip(&rb) {
            let dx = x - ma;
            let dy = y - mb;
            num += dx * dy;
            da += dx * dx;
            db += dy * dy;
        }
        num / (da * db).sqrt()
    }

    let mut rng = stream_rng(9009, 0);
    let mut tied_vectors = 0;
    for case in 0..1000 {
        let n = rng.random_range(2..=50);
        let quantized = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if rng.random::<bool>() {
                        (rng.random_range(0..6) as f64) / 2.0
                    } else {
                        rng.random_range(-3.0..3.0)
                    }
                })
                .collect()
        };
        let a = quantized(&mut rng);
        let b = quantized(&mut rng);
        let has_ties = |v: &[f64]| {
            let mut s = v.to_vec();
            s.sort_by(|x, y| x.partial_cmp(y).unwrap());
            s.windows(2).any(|w| w[0] == w[1])
        };
        if has_ties(&a) || has_ties(&b) {
            tied_vectors += 1;
        }
        let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
        if !constant(&a) && !constant(&b) {
            let got = spearman_slices(&a, &b).unwrap();
            let want = oracle_spearman(&a, &b);
            assert_eq!(got.to_bits(), want.to_bits(), "spearman case {case}");
        }

        // Top-k overlap against an exhaustive intersection oracle.
        let ids_a: Vec<(u64, f64)> = a.iter().enumerate().map(|(i, &v)| (i as u64, v)).collect();
        let ids_b: Vec<(u64, f64)> = b.iter().enumerate().map(|(i, &v)| (i as u64, v)).collect();
        let k = rng.random_range(1..=n);
        let got = topk_overlap(&ids_a, &ids_b, &[k]).unwrap().points[0].1;
        let top = |v: &[(u64, f64)]| {
            let mut s = v.to_vec();
            s.sort_by(|(ia, sa), (ib, sb)| sb.partial_cmp(sa).unwrap().then(ia.cmp(ib)));
            s[..k].iter().map(|(id, _)| *id).collect::<Vec<u64>>()
        };
        let ta = top(&ids_a);
        let tb = top(&ids_b);
        let common = ta.iter().filter(|x| tb.contains(x)).count();
        let want = 100.0 * common as f64 / k as f64;
        assert_eq!(got.to_bits(), want.to_bits(), "overlap case {case}");
    }
    assert!(tied_vectors > 500, "tie generator too weak: {tied_vectors}");
    let elapsed = start.elapsed();
    report(9, elapsed, &format!("metrics match brute-force oracles exactly on 1000 vectors ({tied_vectors} with ties)"));
}

/// Criterion 10: the full pipeline run twice with identical seeds produces
/// byte-identical score CSVs regardless of worker count.
#[test]
fn criterion_10_pipeline_determinism() {
    let start = Instant::now();
    let recipe = ExperimentRecipe {
        n: 300,
        d: 40,
        margin: 0.5,
        data_seed: 5,
        flip_fraction: 0.05,
        flip_seed: 6,
        spec: ModelSpec::linear_logistic(40).unwrap(),
        optimizer: OptimizerConfig::sgd(0.01, 25, 12, 7),
        ssrt_trials: 24,
        ssrt_fraction: 0.7,
        ssrt_seed: 8,
    };
    let plan = ExperimentPlan {
        methods: vec![Method::Zinf, Method::ZinfGram, Method::ZsinfVar, Method::ZsinfNorm, Method::Tracin],
        neighbor_rule: NeighborRule::KNearest(4),
        mask: MaskSelector::All,
        k_grid: vec![1, 5, 10, 25],
        epochs_window: None,
        source: PlanSource::Recipe(recipe),
    };

    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("w1");
    let out2 = dir.path().join("w8");
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_experiment(&plan, &out1).unwrap());
    rayon::ThreadPoolBuilder::new()
        .num_threads(8)
        .build()
        .unwrap()
        .install(|| run_experiment(&plan, &out2).unwrap());

    let mut compared = 0;
    for name in [
        "scores_zinf.csv",
        "scores_zinf-gram.csv",
        "scores_zsinf-var.csv",
        "scores_zsinf-norm.csv",
        "scores_tracin.csv",
        "scores_ssrt.csv",
    ] {
        let a = std::fs::read(out1.join(name)).unwrap();
        let b = std::fs::read(out2.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between 1 and 8 workers");
        compared += 1;
    }
    let elapsed = start.elapsed();
    report(10, elapsed, &format!("{compared} score CSVs byte-identical across 1 vs 8 workers"));
}

/// Criterion 11: with n_train = 1000, n_test = 50, T = 20, d = 2000, online
/// gram-backed scoring of all pairs is at least 5x faster than the direct
/// path, and variance self-influence over all train ids is at least 50x
/// faster than TracIn over the same ids.
#[test]
fn criterion_11_performance_split() {
    let total = Instant::now();
    let train_ds = gen_gaussian_two_class(1000, 2000, 0.5, 91).unwrap();
    let test_ds = gen_gaussian_two_class(50, 2000, 0.5, 92).unwrap();
    let spec = ModelSpec::linear_logistic(2000).unwrap();
    let opt = OptimizerConfig::sgd(0.002, 100, 20, 93);
    let traj = train(&train_ds, &spec, &opt).unwrap();
    assert_eq!(traj.t_max(), 20);

    let train_losses = compute_loss_matrix(&traj, &train_ds).unwrap();
    let test_losses = compute_loss_matrix(&traj, &test_ds).unwrap();
    let mask = ParamMask::resolve(MaskSelector::All, &spec).unwrap();
    let gram = gram_precompute(&traj, &mask).unwrap();
    let neighbors = neighbor_sets(&gram, NeighborRule::KNearest(4)).unwrap();
    let train_ids = train_ds.ids();
    let test_ids = test_ds.ids();

    let base = ScoringAssets {
        trajectory: Some(&traj),
        train_losses: Some(&train_losses),
        test_losses: Some(&test_losses),
        gram: Some(&gram),
        neighbors: Some(&neighbors),
        train_data: Some(&train_ds),
        test_data: Some(&test_ds),
        mask: Some(&mask),
        weighting: Some(TracinWeighting::Uniform),
    };

    let gram_report = batch_score(Method::ZinfGram, &base, &train_ids, &test_ids).unwrap();
    let direct_report = batch_score(Method::Zinf, &base, &train_ids, &test_ids).unwrap();
    for (a, b) in gram_report.scores.iter().zip(&direct_report.scores) {
        assert!(
            (a.score - b.score).abs() <= 1e-9 * (1.0 + b.score.abs()),
            "gram and direct scores disagree at ({}, {:?})",
            a.train_id,
            a.test_id
        );
    }
    let pair_speedup = direct_report.online_seconds / gram_report.online_seconds;
    assert!(
        pair_speedup >= 5.0,
        "gram path only {pair_speedup:.1}x faster than direct ({:.3}s vs {:.3}s)",
        gram_report.online_seconds,
        direct_report.online_seconds
    );

    let var_report = batch_score(Method::ZsinfVar, &base, &train_ids, &[]).unwrap();
    let tracin_report = batch_score(Method::Tracin, &base, &train_ids, &[]).unwrap();
    let self_speedup = tracin_report.online_seconds / var_report.online_seconds;
    assert!(
        self_speedup >= 50.0,
        "variance path only {self_speedup:.1}x faster than tracin ({:.4}s vs {:.4}s)",
        var_report.online_seconds,
        tracin_report.online_seconds
    );

    let elapsed = total.elapsed();
    report(
        11,
        elapsed,
        &format!(
            "gram {pair_speedup:.0}x faster than direct over 50k pairs; variance {self_speedup:.0}x faster than tracin over 1000 ids"
        ),
    );
}
