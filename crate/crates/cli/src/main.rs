//! Command-line pipeline: data generation, training, precompute, influence
//! scoring, subsample-and-retrain, and evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/compute error.

mod manifest;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use influence_lab::datasets::{gen_gaussian_two_class, inject_label_noise, load_csv, write_csv, Dataset};
use influence_lab::evaluation::{
    run_experiment, spearman_slices, topk_overlap, ExperimentPlan, ExperimentRecipe, PlanSource,
    DEFAULT_K_GRID,
};
use influence_lab::influence::{
    batch_score, first_order_validity, Method, ScoringAssets, TracinWeighting,
};
use influence_lab::models::{MaskSelector, ModelSpec, ParamMask};
use influence_lab::ssrt::{
    estimate_pairs, estimate_self, run_trials, save_membership_bitmap, SsrtConfig, SsrtEntry,
};
use influence_lab::store::{
    atomic_write, gram_precompute, load_gram, load_loss_matrix, load_trajectory, neighbor_sets,
    save_gram, save_loss_matrix, save_trajectory, GramCache, NeighborRule,
};
use influence_lab::training::{
    compute_loss_matrix, train, LossMatrix, OptimizerConfig, OptimizerKind, Trajectory,
};
use influence_lab::{Error, Result};
use manifest::{config_hash, RunManifest};

const WORKERS_ENV: &str = "INFLUENCE_LAB_WORKERS";

#[derive(Parser)]
#[command(
    name = "influence-lab",
    version,
    about = "Training-data influence from checkpoint trajectories: zeroth-order scores, TracIn, and a subsample-and-retrain reference"
)]
struct Cli {
    /// Worker threads for parallel sections (default: $INFLUENCE_LAB_WORKERS,
    /// then all cores). Outputs do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Manifest tying pipeline artifacts together; later stages resolve
    /// earlier outputs from it instead of repeating paths.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a linearly separable two-class Gaussian dataset as CSV.
    GenData(GenDataArgs),
    /// Train a classifier, writing one checkpoint per epoch plus the
    /// per-example loss matrix.
    Train(TrainArgs),
    /// Precompute the checkpoint Gram cache (pairwise inner products and
    /// squared distances over the masked coordinates).
    Precompute(PrecomputeArgs),
    /// Score training examples with one influence method.
    Influence(InfluenceArgs),
    /// Subsample-and-retrain reference estimates.
    Ssrt(SsrtArgs),
    /// Compare a score file against the SSRT reference.
    Evaluate(EvaluateArgs),
    /// First-order validity: rank-correlate actual loss differences against
    /// gradient predictions for each checkpoint step.
    Validity(ValidityArgs),
    /// Run the full desk-scale experiment and write a report directory.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct CsvArgs {
    /// Name of the label column.
    #[arg(long, default_value = "label")]
    label_col: String,
    /// Field delimiter.
    #[arg(long, default_value = ",", value_parser = parse_delimiter)]
    delimiter: u8,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Architecture: `linear` (binary logistic) or `mlp`.
    #[arg(long, default_value = "linear")]
    model: String,
    /// Layer widths for `--model mlp`, including input and output,
    /// e.g. `100,64,32,2`.
    #[arg(long, value_parser = parse_usize_list)]
    layers: Option<UsizeList>,
}

impl ModelArgs {
    fn build(&self, feature_dim: usize) -> Result<ModelSpec> {
        match self.model.as_str() {
            "linear" => ModelSpec::linear_logistic(feature_dim),
            "mlp" => {
                let layers = self
                    .layers
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("--model mlp needs --layers".into()))?;
                ModelSpec::mlp(layers.0.clone())
            }
            other => Err(Error::InvalidArgument(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Args, Clone)]
struct OptimizerArgs {
    /// `sgd` or `adam`.
    #[arg(long, default_value = "sgd")]
    optimizer: OptimizerKind,
    /// Learning rate. Batch updates apply the summed per-example gradient.
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Decoupled weight decay (Adam only).
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Seed controlling initialization and shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl OptimizerArgs {
    fn build(&self) -> OptimizerConfig {
        let mut cfg = match self.optimizer {
            OptimizerKind::Sgd => OptimizerConfig::sgd(self.lr, self.batch_size, self.epochs, self.seed),
            OptimizerKind::Adam => {
                OptimizerConfig::adam(self.lr, self.batch_size, self.epochs, self.seed)
            }
        };
        cfg.weight_decay = self.weight_decay;
        cfg
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    d: usize,
    #[arg(long, default_value_t = 0.5)]
    margin: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path; a `<out>.manifest.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Fraction of labels to flip after generation (0 disables).
    #[arg(long, default_value_t = 0.0)]
    flip_fraction: f64,
    #[arg(long, default_value_t = 1)]
    flip_seed: u64,
    /// Where to record the flipped ids (default `<out>.flipped.json`).
    #[arg(long)]
    flipped_out: Option<PathBuf>,
    #[command(flatten)]
    csv: CsvArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Training data CSV (falls back to the manifest's `data` entry).
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    csv: CsvArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    /// Directory for `trajectory.bin` and `loss_matrix.bin`.
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PrecomputeArgs {
    /// Trajectory file (falls back to the manifest).
    #[arg(long)]
    traj: Option<PathBuf>,
    /// Parameter subset: `all` or `last-layer`.
    #[arg(long, default_value = "all")]
    mask: MaskSelector,
    /// Output path (default: `gram.bin` next to the trajectory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InfluenceArgs {
    /// One of zinf | zinf-gram | zsinf-var | zsinf-norm | tracin.
    #[arg(long)]
    method: Method,
    #[arg(long)]
    traj: Option<PathBuf>,
    #[arg(long)]
    loss_matrix: Option<PathBuf>,
    #[arg(long)]
    gram: Option<PathBuf>,
    /// Neighbor rule: `k=<int>` or `tau=<float>`.
    #[arg(long, default_value = "k=4")]
    neighbors: NeighborRule,
    #[arg(long, default_value = "all")]
    mask: MaskSelector,
    /// Restrict to checkpoint indices `a..b` (inclusive).
    #[arg(long, value_parser = parse_window)]
    epochs_window: Option<(usize, usize)>,
    /// Training data CSV (tracin only).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Test data CSV for train-test scoring (tracin).
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Loss matrix of the test set for train-test scoring (zinf, zinf-gram).
    #[arg(long)]
    test_loss_matrix: Option<PathBuf>,
    /// Comma-separated train ids (default: every id, self-influence).
    #[arg(long, value_parser = parse_id_list)]
    train_ids: Option<IdList>,
    /// Comma-separated test ids; presence switches to train-test scoring.
    #[arg(long, value_parser = parse_id_list)]
    test_ids: Option<IdList>,
    /// TracIn checkpoint weighting: `uniform` or `learning-rate`.
    #[arg(long, default_value = "uniform")]
    weighting: String,
    /// Output CSV (default `scores_<method>.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the full report (scores + config snapshot) as JSON.
    #[arg(long)]
    json_out: Option<PathBuf>,
    #[command(flatten)]
    csv: CsvArgs,
}

#[derive(Args)]
struct SsrtArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    csv: CsvArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0.7)]
    fraction: f64,
    /// Base seed; trial t trains with `seed + t`. Defaults to `--seed`.
    #[arg(long)]
    ssrt_seed: Option<u64>,
    /// Which targets to estimate: `train` (self-influence diagonal),
    /// `test` (train x test pairs), or `both`.
    #[arg(long, default_value = "train")]
    targets: String,
    /// Test data CSV, required for `--targets test|both`.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long, default_value = "ssrt")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Self-influence score CSV (`train_id,score`).
    #[arg(long)]
    scores: PathBuf,
    /// SSRT estimate CSV.
    #[arg(long)]
    ssrt: PathBuf,
    /// Which SSRT column to rank by: `helpfulness` (default) or `raw`.
    #[arg(long, default_value = "helpfulness")]
    orientation: String,
    /// Comma-separated k grid for top-k overlap.
    #[arg(long, value_parser = parse_usize_list)]
    ks: Option<UsizeList>,
    #[arg(long, default_value = "evaluation.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ValidityArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    traj: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    mask: MaskSelector,
    #[arg(long, default_value = "validity.json")]
    out: PathBuf,
    #[command(flatten)]
    csv: CsvArgs,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    d: usize,
    #[arg(long, default_value_t = 0.5)]
    margin: f64,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 0.05)]
    flip_fraction: f64,
    #[arg(long, default_value_t = 1)]
    flip_seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0.7)]
    fraction: f64,
    #[arg(long, default_value_t = 9000)]
    ssrt_seed: u64,
    /// Comma-separated methods to compare against SSRT.
    #[arg(long, default_value = "zinf-gram,zsinf-var,zsinf-norm,tracin")]
    methods: String,
    #[arg(long, default_value = "k=4")]
    neighbors: NeighborRule,
    #[arg(long, default_value = "all")]
    mask: MaskSelector,
    /// Comma-separated k grid for overlap curves.
    #[arg(long, value_parser = parse_usize_list)]
    k_grid: Option<UsizeList>,
    #[arg(long, value_parser = parse_window)]
    epochs_window: Option<(usize, usize)>,
    #[arg(long, default_value = "report")]
    out_dir: PathBuf,
}

#[derive(Clone, Debug)]
struct IdList(Vec<u64>);

#[derive(Clone, Debug)]
struct UsizeList(Vec<usize>);

fn parse_id_list(s: &str) -> std::result::Result<IdList, String> {
    s.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|_| format!("bad id `{p}`")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(IdList)
}

fn parse_usize_list(s: &str) -> std::result::Result<UsizeList, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad integer `{p}`")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(UsizeList)
}

fn parse_window(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected `a..b`, got `{s}`"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad index `{a}`"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad index `{b}`"))?;
    if a >= b {
        return Err(format!("window start {a} must be below end {b}"));
    }
    Ok((a, b))
}

fn parse_delimiter(s: &str) -> std::result::Result<u8, String> {
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii() => Ok(c as u8),
        _ => Err(format!("delimiter must be one ascii character, got `{s}`")),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    std::process::exit(0);
                }
                _ => {
                    eprint!("{e}");
                    std::process::exit(1);
                }
            }
        }
    };

    let workers = cli.workers.or_else(|| {
        std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = workers.filter(|&n| n > 0) {
        // Ignore failure: a pool may already exist in-process (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    let stage = match &cli.command {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Precompute(_) => "precompute",
        Command::Influence(_) => "influence",
        Command::Ssrt(_) => "ssrt",
        Command::Evaluate(_) => "evaluate",
        Command::Validity(_) => "validity",
        Command::Report(_) => "report",
    };
    if let Err(err) = run(cli) {
        eprintln!("error in `{stage}`: {err}");
        std::process::exit(2);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut manifest = match &cli.manifest {
        Some(path) => Some(RunManifest::load_or_default(path)?),
        None => None,
    };

    match cli.command {
        Command::GenData(args) => cmd_gen_data(args, manifest.as_mut()),
        Command::Train(args) => cmd_train(args, manifest.as_mut()),
        Command::Precompute(args) => cmd_precompute(args, manifest.as_mut()),
        Command::Influence(args) => cmd_influence(args, manifest.as_mut()),
        Command::Ssrt(args) => cmd_ssrt(args, manifest.as_mut()),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Validity(args) => cmd_validity(args, manifest.as_mut()),
        Command::Report(args) => cmd_report(args),
    }?;

    if let (Some(m), Some(path)) = (manifest, &cli.manifest) {
        m.save(path)?;
    }
    Ok(())
}

fn resolve_input(
    flag: &Option<PathBuf>,
    manifest: Option<&RunManifest>,
    kind: &str,
    remediation: &str,
) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.clone());
    }
    if let Some(m) = manifest {
        if let Some(p) = m.resolve(kind) {
            return Ok(p);
        }
    }
    Err(Error::MissingAsset {
        what: kind.to_string(),
        remediation: remediation.to_string(),
    })
}

fn record(
    manifest: Option<&mut RunManifest>,
    kind: &str,
    path: &Path,
    hash: Option<String>,
) -> Result<()> {
    if let Some(m) = manifest {
        m.record(kind, path, hash)?;
    }
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs, mut manifest: Option<&mut RunManifest>) -> Result<()> {
    let clean = gen_gaussian_two_class(args.n, args.d, args.margin, args.seed)?;
    let (ds, flipped) = if args.flip_fraction > 0.0 {
        let (noisy, flipped) = inject_label_noise(&clean, args.flip_fraction, args.flip_seed)?;
        (noisy, Some(flipped))
    } else {
        (clean, None)
    };

    write_csv(&ds, &args.out, &args.csv.label_col, args.csv.delimiter)?;
    let sidecar = args.out.with_extension("manifest.json");
    atomic_write(&sidecar, &serde_json::to_vec_pretty(&ds.manifest(Some(args.seed)))?)?;
    record(manifest.as_deref_mut(), "data", &args.out, None)?;

    if let Some(flipped) = flipped {
        let path = args
            .flipped_out
            .clone()
            .unwrap_or_else(|| args.out.with_extension("flipped.json"));
        let ids: Vec<u64> = flipped.into_iter().collect();
        atomic_write(&path, &serde_json::to_vec_pretty(&json!({ "flipped_ids": ids }))?)?;
        record(manifest, "flipped", &path, None)?;
        println!("wrote {} ({} flipped ids in {})", args.out.display(), ids.len(), path.display());
    } else {
        println!("wrote {}", args.out.display());
    }
    Ok(())
}

fn cmd_train(args: TrainArgs, mut manifest: Option<&mut RunManifest>) -> Result<()> {
    let data_path = resolve_input(&args.data, manifest.as_deref(), "data", "gen-data")?;
    let ds = load_csv(&data_path, &args.csv.label_col, args.csv.delimiter)?;
    let spec = args.model.build(ds.feature_dim())?;
    let opt = args.optimizer.build();

    let traj = train(&ds, &spec, &opt)?;
    let losses = compute_loss_matrix(&traj, &ds)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let traj_path = args.out_dir.join("trajectory.bin");
    let loss_path = args.out_dir.join("loss_matrix.bin");
    save_trajectory(&traj, &traj_path)?;
    save_loss_matrix(&losses, &loss_path)?;

    let hash = config_hash(&json!({ "spec": spec, "optimizer": opt }));
    record(manifest.as_deref_mut(), "trajectory", &traj_path, Some(hash.clone()))?;
    record(manifest, "loss_matrix", &loss_path, Some(hash))?;

    let final_loss = losses.row(losses.rows() - 1).iter().sum::<f64>() / ds.len() as f64;
    println!(
        "trained {} epochs on {} examples; final mean loss {final_loss:.6}",
        opt.epochs,
        ds.len()
    );
    println!("wrote {} and {}", traj_path.display(), loss_path.display());
    Ok(())
}

fn cmd_precompute(args: PrecomputeArgs, manifest: Option<&mut RunManifest>) -> Result<()> {
    let traj_path = resolve_input(&args.traj, manifest.as_deref(), "trajectory", "train")?;
    let traj = load_trajectory(&traj_path)?;
    let mask = ParamMask::resolve(args.mask, &traj.spec)?;
    let gram = gram_precompute(&traj, &mask)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| traj_path.with_file_name("gram.bin"));
    save_gram(&gram, &out)?;
    record(manifest, "gram", &out, None)?;
    println!(
        "gram cache over {} checkpoints ({} masked coords) -> {}",
        gram.size(),
        mask.len(),
        out.display()
    );
    Ok(())
}

struct LoadedAssets {
    trajectory: Option<Trajectory>,
    masked_trajectory: Option<Trajectory>,
    losses: Option<LossMatrix>,
    test_losses: Option<LossMatrix>,
    gram: Option<GramCache>,
    dataset: Option<Dataset>,
    test_dataset: Option<Dataset>,
    mask: Option<ParamMask>,
}

fn cmd_influence(args: InfluenceArgs, manifest: Option<&mut RunManifest>) -> Result<()> {
    let method = args.method;
    let weighting = match args.weighting.as_str() {
        "uniform" => TracinWeighting::Uniform,
        "learning-rate" | "lr" => TracinWeighting::LearningRate,
        other => {
            return Err(Error::InvalidArgument(format!("unknown weighting `{other}`")));
        }
    };

    let needs_traj = matches!(method, Method::Zinf | Method::ZsinfNorm | Method::Tracin);
    let needs_loss = matches!(
        method,
        Method::Zinf | Method::ZinfGram | Method::ZsinfVar | Method::ZsinfNorm
    );
    let needs_gram = matches!(method, Method::ZinfGram);
    let needs_neighbors = matches!(method, Method::Zinf | Method::ZinfGram | Method::ZsinfNorm);
    let needs_data = matches!(method, Method::Tracin);

    let mut assets = LoadedAssets {
        trajectory: None,
        masked_trajectory: None,
        losses: None,
        test_losses: None,
        gram: None,
        dataset: None,
        test_dataset: None,
        mask: None,
    };

    if needs_traj {
        let path = resolve_input(&args.traj, manifest.as_deref(), "trajectory", "train")?;
        assets.trajectory = Some(load_trajectory(&path)?);
    }
    if needs_loss {
        let path = resolve_input(&args.loss_matrix, manifest.as_deref(), "loss_matrix", "train")?;
        assets.losses = Some(load_loss_matrix(&path)?);
        if let Some(test_path) = &args.test_loss_matrix {
            assets.test_losses = Some(load_loss_matrix(test_path)?);
        }
    }
    if needs_gram || (needs_neighbors && args.gram.is_some()) {
        let path = resolve_input(&args.gram, manifest.as_deref(), "gram", "precompute")?;
        assets.gram = Some(load_gram(&path)?);
    }
    if needs_data {
        let path = resolve_input(&args.data, manifest.as_deref(), "data", "gen-data")?;
        assets.dataset = Some(load_csv(&path, &args.csv.label_col, args.csv.delimiter)?);
        if let Some(test_path) = &args.test_data {
            assets.test_dataset = Some(load_csv(test_path, &args.csv.label_col, args.csv.delimiter)?);
        }
    }

    if let Some((a, b)) = args.epochs_window {
        if let Some(t) = assets.trajectory.take() {
            assets.trajectory = Some(t.window(a, b)?);
        }
        if let Some(l) = assets.losses.take() {
            assets.losses = Some(l.window(a, b)?);
        }
        if let Some(l) = assets.test_losses.take() {
            assets.test_losses = Some(l.window(a, b)?);
        }
        if let Some(g) = assets.gram.take() {
            assets.gram = Some(g.window(a, b)?);
        }
    }

    if let Some(traj) = &assets.trajectory {
        let mask = ParamMask::resolve(args.mask, &traj.spec)?;
        if matches!(method, Method::Zinf | Method::ZsinfNorm) {
            assets.masked_trajectory = Some(traj.masked(&mask)?);
        }
        assets.mask = Some(mask);
    }
    if let Some(gram) = &assets.gram {
        if gram.mask().selector != args.mask {
            return Err(Error::CacheMismatch(format!(
                "gram cache was precomputed with mask {:?}, requested {:?}; re-run precompute",
                gram.mask().selector,
                args.mask
            )));
        }
        if assets.mask.is_none() {
            assets.mask = Some(*gram.mask());
        }
    }

    // Neighbor sets come from the gram cache; the direct path computes one
    // on the fly from the (masked) trajectory when no cache was supplied.
    let neighbors = if needs_neighbors {
        let gram_ref = match (&assets.gram, &assets.trajectory) {
            (Some(g), _) => g.clone(),
            (None, Some(t)) => {
                let mask = assets.mask.expect("trajectory implies a resolved mask");
                gram_precompute(t, &mask)?
            }
            (None, None) => {
                return Err(Error::MissingAsset {
                    what: "gram cache or trajectory".into(),
                    remediation: "precompute".into(),
                })
            }
        };
        Some(neighbor_sets(&gram_ref, args.neighbors)?)
    } else {
        None
    };
    if let Some(n) = &neighbors {
        if n.has_empty() {
            eprintln!(
                "warning: {} checkpoint(s) have empty neighbor sets under {:?}; their terms are zero",
                n.empty_count(),
                n.rule()
            );
        }
    }

    let train_ids: Vec<u64> = match &args.train_ids {
        Some(list) => list.0.clone(),
        None => match (&assets.losses, &assets.dataset) {
            (Some(l), _) => l.example_ids().to_vec(),
            (None, Some(d)) => d.ids(),
            _ => return Err(Error::InvalidArgument("no ids available; pass --train-ids".into())),
        },
    };
    let test_ids: Vec<u64> = args.test_ids.as_ref().map(|l| l.0.clone()).unwrap_or_default();

    let scoring = ScoringAssets {
        trajectory: match method {
            Method::Zinf | Method::ZsinfNorm => assets.masked_trajectory.as_ref(),
            _ => assets.trajectory.as_ref(),
        },
        train_losses: assets.losses.as_ref(),
        test_losses: assets.test_losses.as_ref(),
        gram: assets.gram.as_ref(),
        neighbors: neighbors.as_ref(),
        train_data: assets.dataset.as_ref(),
        test_data: assets.test_dataset.as_ref(),
        mask: assets.mask.as_ref(),
        weighting: Some(weighting),
    };
    let report = batch_score(method, &scoring, &train_ids, &test_ids)?;

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("scores_{}.csv", method.name())));
    report.write_csv(&out)?;
    if let Some(json_path) = &args.json_out {
        report.write_json(json_path)?;
    }
    record(
        manifest,
        &format!("scores_{}", method.name()),
        &out,
        Some(config_hash(&report.config)),
    )?;
    println!(
        "{} scored {} pair(s) in {:.3}s -> {}",
        method,
        report.scores.len(),
        report.online_seconds,
        out.display()
    );
    Ok(())
}

fn cmd_ssrt(args: SsrtArgs, mut manifest: Option<&mut RunManifest>) -> Result<()> {
    let data_path = resolve_input(&args.data, manifest.as_deref(), "data", "gen-data")?;
    let ds = load_csv(&data_path, &args.csv.label_col, args.csv.delimiter)?;
    let spec = args.model.build(ds.feature_dim())?;
    let optimizer = args.optimizer.build();

    let want_self = matches!(args.targets.as_str(), "train" | "both");
    let want_test = matches!(args.targets.as_str(), "test" | "both");
    if !want_self && !want_test {
        return Err(Error::InvalidArgument(format!(
            "--targets must be train|test|both, got `{}`",
            args.targets
        )));
    }

    // Targets = train examples plus (id-offset) test examples, so one
    // retraining pass serves both estimates.
    let test_ds = if want_test {
        let path = args.test_data.clone().ok_or_else(|| Error::MissingAsset {
            what: "test data csv".into(),
            remediation: "gen-data (pass --test-data)".into(),
        })?;
        Some(load_csv(&path, &args.csv.label_col, args.csv.delimiter)?)
    } else {
        None
    };
    let offset = ds.ids().iter().max().copied().unwrap_or(0) + 1;
    let targets = match &test_ds {
        None => ds.clone(),
        Some(test) => {
            let mut examples = ds.examples().to_vec();
            for ex in test.examples() {
                let mut ex = ex.clone();
                ex.id += offset;
                examples.push(ex);
            }
            Dataset::new(
                examples,
                ds.num_classes(),
                ds.feature_dim(),
                format!("{} + test targets", ds.provenance()),
            )?
        }
    };

    let cfg = SsrtConfig {
        trials: args.trials,
        fraction: args.fraction,
        base_seed: args.ssrt_seed.unwrap_or(args.optimizer.seed),
        spec: spec.clone(),
        optimizer,
    };
    let trials = run_trials(&ds, &targets, &cfg)?;
    if trials.failures() > 0 {
        eprintln!("warning: {} of {} trials diverged and were dropped", trials.failures(), args.trials);
    }

    std::fs::create_dir_all(&args.out_dir)?;
    let bitmap_path = args.out_dir.join("membership.bin");
    save_membership_bitmap(&trials, &bitmap_path)?;
    record(manifest.as_deref_mut(), "membership", &bitmap_path, None)?;

    if want_self {
        let estimate = estimate_self(&trials)?;
        let csv_path = args.out_dir.join("ssrt.csv");
        estimate.write_csv(&csv_path)?;
        atomic_write(
            args.out_dir.join("ssrt_manifest.json"),
            &serde_json::to_vec_pretty(&estimate.manifest_json())?,
        )?;
        record(manifest.as_deref_mut(), "ssrt", &csv_path, None)?;
        println!("self-influence estimates for {} ids -> {}", estimate.entries.len(), csv_path.display());
    }
    if let Some(test) = &test_ds {
        let pairs: Vec<(u64, u64)> = ds
            .ids()
            .into_iter()
            .flat_map(|s| test.ids().into_iter().map(move |t| (s, t + offset)))
            .collect();
        let mut estimate = estimate_pairs(&trials, &pairs)?;
        for entry in &mut estimate.entries {
            entry.target_id -= offset;
        }
        let csv_path = args.out_dir.join("ssrt_test.csv");
        estimate.write_csv(&csv_path)?;
        record(manifest, "ssrt_test", &csv_path, None)?;
        println!(
            "train-test estimates for {} pairs -> {}",
            estimate.entries.len(),
            csv_path.display()
        );
    }
    Ok(())
}

fn parse_self_scores_csv(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "train_id,score" {
                return Err(Error::Parse {
                    row: 0,
                    col: 0,
                    message: format!("expected `train_id,score` header in {}", path.display()),
                });
            }
            continue;
        }
        let (id, score) = line.split_once(',').ok_or_else(|| Error::Parse {
            row: i,
            col: 0,
            message: "expected two fields".into(),
        })?;
        let score: f64 = score.parse().map_err(|_| Error::Parse {
            row: i,
            col: 1,
            message: format!("bad score `{score}`"),
        })?;
        if !score.is_finite() {
            return Err(Error::Parse {
                row: i,
                col: 1,
                message: "score must be finite".into(),
            });
        }
        out.push((
            id.parse().map_err(|_| Error::Parse {
                row: i,
                col: 0,
                message: format!("bad id `{id}`"),
            })?,
            score,
        ));
    }
    Ok(out)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let scores = parse_self_scores_csv(&args.scores)?;
    let entries = influence_lab::ssrt::parse_estimate_csv(&std::fs::read_to_string(&args.ssrt)?)?;
    let pick = |e: &SsrtEntry| match args.orientation.as_str() {
        "helpfulness" => Ok(e.helpfulness),
        "raw" => Ok(e.influence),
        other => Err(Error::InvalidArgument(format!("unknown orientation `{other}`"))),
    };
    let mut ssrt_scores = Vec::new();
    for e in entries.iter().filter(|e| e.train_id == e.target_id) {
        ssrt_scores.push((e.train_id, pick(e)?));
    }

    let by_id: std::collections::BTreeMap<u64, f64> = ssrt_scores.iter().copied().collect();
    let mut aligned_a = Vec::new();
    let mut aligned_b = Vec::new();
    let mut shared = Vec::new();
    for (id, s) in &scores {
        if let Some(r) = by_id.get(id) {
            aligned_a.push(*s);
            aligned_b.push(*r);
            shared.push((*id, *s));
        }
    }
    if shared.len() < 2 {
        return Err(Error::IdMismatch(
            "score file and ssrt reference share fewer than 2 ids".into(),
        ));
    }
    let rho = spearman_slices(&aligned_a, &aligned_b)?;

    let shared_ids: BTreeSet<u64> = shared.iter().map(|(id, _)| *id).collect();
    let ssrt_shared: Vec<(u64, f64)> = ssrt_scores
        .iter()
        .filter(|(id, _)| shared_ids.contains(id))
        .copied()
        .collect();
    let ks: Vec<usize> = args
        .ks
        .as_ref()
        .map(|l| l.0.clone())
        .unwrap_or_else(|| DEFAULT_K_GRID.to_vec())
        .into_iter()
        .filter(|&k| k >= 1 && k <= shared.len())
        .collect();
    let overlap = topk_overlap(&shared, &ssrt_shared, &ks)?;

    let result = json!({
        "spearman": rho,
        "orientation": args.orientation,
        "n_ids": shared.len(),
        "overlap": overlap.points,
    });
    atomic_write(&args.out, &serde_json::to_vec_pretty(&result)?)?;
    println!("spearman vs ssrt ({}): {rho:.4} over {} ids -> {}", args.orientation, shared.len(), args.out.display());
    Ok(())
}

fn cmd_validity(args: ValidityArgs, manifest: Option<&mut RunManifest>) -> Result<()> {
    let data_path = resolve_input(&args.data, manifest.as_deref(), "data", "gen-data")?;
    let traj_path = resolve_input(&args.traj, manifest.as_deref(), "trajectory", "train")?;
    let ds = load_csv(&data_path, &args.csv.label_col, args.csv.delimiter)?;
    let traj = load_trajectory(&traj_path)?;
    let mask = ParamMask::resolve(args.mask, &traj.spec)?;
    let report = first_order_validity(&traj, &ds, &mask)?;
    atomic_write(&args.out, &serde_json::to_vec_pretty(&report)?)?;
    match report.mean_spearman {
        Some(m) => println!(
            "first-order validity over {} checkpoint pairs: mean spearman {m:.4} -> {}",
            report.pairs.len(),
            args.out.display()
        ),
        None => println!("every checkpoint pair was degenerate; see {}", args.out.display()),
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let methods = args
        .methods
        .split(',')
        .map(|m| m.trim().parse::<Method>())
        .collect::<Result<Vec<_>>>()?;
    let spec = match args.model.model.as_str() {
        // The report recipe knows d upfront, so the spec can be built here.
        "linear" => ModelSpec::linear_logistic(args.d)?,
        _ => args.model.build(args.d)?,
    };
    let recipe = ExperimentRecipe {
        n: args.n,
        d: args.d,
        margin: args.margin,
        data_seed: args.data_seed,
        flip_fraction: args.flip_fraction,
        flip_seed: args.flip_seed,
        spec,
        optimizer: args.optimizer.build(),
        ssrt_trials: args.trials,
        ssrt_fraction: args.fraction,
        ssrt_seed: args.ssrt_seed,
    };
    let plan = ExperimentPlan {
        methods,
        neighbor_rule: args.neighbors,
        mask: args.mask,
        k_grid: args
            .k_grid
            .as_ref()
            .map(|l| l.0.clone())
            .unwrap_or_else(|| DEFAULT_K_GRID.to_vec()),
        epochs_window: args.epochs_window,
        source: PlanSource::Recipe(recipe),
    };
    let report = run_experiment(&plan, &args.out_dir)?;

    println!("report -> {}", args.out_dir.display());
    println!("ssrt orientation: {} ({} failures)", report.ssrt_orientation, report.ssrt_failures);
    if let Some(pct) = report.ssrt_flipped_in_top_decile_pct {
        println!("ssrt flipped-in-top-decile: {pct:.1}%");
    }
    for m in &report.methods {
        let flipped = m
            .flipped_in_top_decile_pct
            .map(|p| format!(", flipped@10% {p:.1}%"))
            .unwrap_or_default();
        println!(
            "{:>11}  spearman {:+.4}  offline {:.2}s  online {:.3}s{}",
            m.method.name(),
            m.spearman_vs_ssrt,
            m.offline_seconds,
            m.online_seconds,
            flipped
        );
    }
    Ok(())
}
