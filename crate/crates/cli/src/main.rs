//! `xmcl` — harness around the retrieval crates: generate the synthetic
//! benchmark, train task sequences, build and query versioned embedding
//! indexes, evaluate recall, run the preset experiment grid, and report
//! per-task drift.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use xmcl_core::data::{Dataset, FeatureFile, RelevanceSidecar, SyntheticSpec, TaskData};
use xmcl_core::engine::{
    run_decoupled, run_sequence, EvalPlan, RecallCell, Regularizer, RunRecord, TrainConfig,
    TrainMode,
};
use xmcl_core::grid::{run_experiment, write_results, ExperimentGrid};
use xmcl_core::index::{
    diagnose_drift, recall_at_k, IndexPolicy, IndexStore, QueryDirection, QueryResult, QueryScope,
};
use xmcl_core::loss::{Mining, NegativeBudget};
use xmcl_core::model::{Modality, ModelSnapshot, SharingMode, TwoBranchModel};
use xmcl_core::reg::{save_importance, RegScope};
use xmcl_core::snapshot::{load_model_snapshot, save_model_snapshot};

#[derive(Parser)]
#[command(name = "xmcl", version, about = "Continual cross-modal retrieval harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-task image/text benchmark
    Gen(GenArgs),
    /// Train a two-branch model over a task sequence
    Train(TrainArgs),
    /// Build an embedding index from a finished run's snapshots
    Index(IndexArgs),
    /// Run a single query against a saved index
    Query(QueryArgs),
    /// Evaluate recall over a saved index
    Eval(EvalArgs),
    /// Run the preset experiment grid and emit a results table
    Grid(GridArgs),
    /// Per-task drift diagnostics for a saved run and index
    Diagnose(DiagnoseArgs),
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(args) => run_gen(args),
        Command::Train(args) => run_train(args),
        Command::Index(args) => run_index(args),
        Command::Query(args) => run_query(args),
        Command::Eval(args) => run_eval(args),
        Command::Grid(args) => run_grid(args),
        Command::Diagnose(args) => run_diagnose(args),
    }
}

// ---------------------------------------------------------------------------
// Shared argument groups

/// Feature files plus the optional relevance sidecar that together define the
/// task sequence.
#[derive(Args)]
struct DataArgs {
    /// Image feature file
    #[arg(long)]
    images: PathBuf,

    /// Text feature file
    #[arg(long)]
    texts: PathBuf,

    /// Relevance/split sidecar; omit for id-equality relevance with fresh
    /// 80/10/10 splits
    #[arg(long)]
    relevance: Option<PathBuf>,

    /// Shuffle seed for the splits drawn when no sidecar is given
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let images = FeatureFile::load(&self.images)
            .with_context(|| format!("reading {}", self.images.display()))?;
        let texts = FeatureFile::load(&self.texts)
            .with_context(|| format!("reading {}", self.texts.display()))?;
        let sidecar = match &self.relevance {
            Some(path) => Some(
                RelevanceSidecar::load(path)
                    .with_context(|| format!("reading {}", path.display()))?,
            ),
            None => None,
        };
        Ok(Dataset::from_feature_files(
            &images,
            &texts,
            sidecar.as_ref(),
            self.split_seed,
        )?)
    }
}

/// Training configuration: an optional TOML file supplies the base, the flags
/// override individual fields, and anything untouched keeps the built-in
/// default.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML training config; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,

    /// Training mode: continual, joint-with-ctnp, joint-no-ctnp
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,

    /// Anti-forgetting regularizer: ft, ewc, mas
    #[arg(long, value_parser = parse_regularizer)]
    regularizer: Option<Regularizer>,

    /// Weight of the anti-forgetting penalty
    #[arg(long)]
    lambda3: Option<f64>,

    /// Branch the penalty constrains: both, image, text
    #[arg(long, value_parser = parse_reg_scope)]
    reg_scope: Option<RegScope>,

    /// Branch coupling: no-sharing, share-top
    #[arg(long, value_parser = parse_sharing)]
    sharing: Option<SharingMode>,

    /// Hidden layer width
    #[arg(long)]
    hidden_dim: Option<usize>,

    /// Embedding dimension
    #[arg(long)]
    embed_dim: Option<usize>,

    /// Training epochs per task
    #[arg(long)]
    epochs: Option<usize>,

    /// Positive pairs per batch
    #[arg(long)]
    batch_size: Option<usize>,

    /// Adam learning rate
    #[arg(long)]
    learning_rate: Option<f64>,

    /// Dropout keep probability
    #[arg(long)]
    dropout_keep: Option<f64>,

    /// Triplet hinge margin
    #[arg(long)]
    margin: Option<f64>,

    /// Weight of the image-anchored ranking term
    #[arg(long)]
    lambda1: Option<f64>,

    /// Weight of the text-anchored ranking term
    #[arg(long)]
    lambda2: Option<f64>,

    /// Negatives per positive pair and direction: a count, or `all`
    #[arg(long, value_parser = parse_negatives)]
    negatives: Option<NegativeBudget>,

    /// Negative selection: random, hardest-in-batch
    #[arg(long, value_parser = parse_mining)]
    mining: Option<Mining>,

    /// Run seed
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.regularizer {
            cfg.regularizer = v;
        }
        if let Some(v) = self.lambda3 {
            cfg.reg.lambda3 = v;
        }
        if let Some(v) = self.reg_scope {
            cfg.reg.scope = v;
        }
        if let Some(v) = self.sharing {
            cfg.sharing = v;
        }
        if let Some(v) = self.hidden_dim {
            cfg.hidden_dim = v;
        }
        if let Some(v) = self.embed_dim {
            cfg.embed_dim = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.dropout_keep {
            cfg.dropout_keep = v;
        }
        if let Some(v) = self.margin {
            cfg.loss.margin = v;
        }
        if let Some(v) = self.lambda1 {
            cfg.loss.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.loss.lambda2 = v;
        }
        if let Some(v) = self.negatives {
            cfg.loss.negatives_per_positive = v;
        }
        if let Some(v) = self.mining {
            cfg.loss.mining = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy)]
enum Format {
    Text,
    Json,
}

fn parse_format(s: &str) -> Result<Format, String> {
    match s {
        "text" => Ok(Format::Text),
        "json" => Ok(Format::Json),
        _ => Err(format!("unknown format `{s}` (text, json)")),
    }
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "continual" => Ok(TrainMode::Continual),
        "joint-with-ctnp" => Ok(TrainMode::JointWithCtnp),
        "joint-no-ctnp" => Ok(TrainMode::JointNoCtnp),
        _ => Err(format!(
            "unknown mode `{s}` (continual, joint-with-ctnp, joint-no-ctnp)"
        )),
    }
}

fn parse_regularizer(s: &str) -> Result<Regularizer, String> {
    match s {
        "ft" => Ok(Regularizer::Ft),
        "ewc" => Ok(Regularizer::Ewc),
        "mas" => Ok(Regularizer::Mas),
        _ => Err(format!("unknown regularizer `{s}` (ft, ewc, mas)")),
    }
}

fn parse_reg_scope(s: &str) -> Result<RegScope, String> {
    match s {
        "both" => Ok(RegScope::BothBranches),
        "image" => Ok(RegScope::ImageOnly),
        "text" => Ok(RegScope::TextOnly),
        _ => Err(format!("unknown penalty scope `{s}` (both, image, text)")),
    }
}

fn parse_sharing(s: &str) -> Result<SharingMode, String> {
    match s {
        "no-sharing" => Ok(SharingMode::NoSharing),
        "share-top" => Ok(SharingMode::ShareTop),
        _ => Err(format!("unknown sharing mode `{s}` (no-sharing, share-top)")),
    }
}

fn parse_mining(s: &str) -> Result<Mining, String> {
    match s {
        "random" => Ok(Mining::Random),
        "hardest-in-batch" => Ok(Mining::HardestInBatch),
        _ => Err(format!(
            "unknown mining policy `{s}` (random, hardest-in-batch)"
        )),
    }
}

fn parse_negatives(s: &str) -> Result<NegativeBudget, String> {
    if s == "all" {
        return Ok(NegativeBudget::All);
    }
    s.parse::<usize>()
        .map(NegativeBudget::Count)
        .map_err(|_| format!("negatives must be a count or `all`, got `{s}`"))
}

fn parse_policy(s: &str) -> Result<IndexPolicy, String> {
    match s {
        "reindex" => Ok(IndexPolicy::Reindex),
        "no-reindex" => Ok(IndexPolicy::NoReindex),
        _ => Err(format!("unknown index policy `{s}` (reindex, no-reindex)")),
    }
}

fn parse_direction(s: &str) -> Result<QueryDirection, String> {
    match s {
        "im2txt" => Ok(QueryDirection::Im2Txt),
        "txt2im" => Ok(QueryDirection::Txt2Im),
        _ => Err(format!("unknown direction `{s}` (im2txt, txt2im)")),
    }
}

// ---------------------------------------------------------------------------
// gen

#[derive(Args)]
struct GenArgs {
    /// Directory receiving images.xmft, texts.xmft, relevance.json,
    /// generator.json
    #[arg(long)]
    out_dir: PathBuf,

    /// Image feature dimension
    #[arg(long)]
    image_dim: Option<usize>,

    /// Text feature dimension
    #[arg(long)]
    text_dim: Option<usize>,

    /// Latent dimension of the category centers
    #[arg(long)]
    latent_dim: Option<usize>,

    /// Number of tasks in the sequence
    #[arg(long)]
    tasks: Option<u16>,

    /// Categories per task
    #[arg(long)]
    categories_per_task: Option<usize>,

    /// Image/text pairs per category
    #[arg(long)]
    pairs_per_category: Option<usize>,

    /// Latent noise scale per item
    #[arg(long)]
    noise_std: Option<f64>,

    /// Radius of the sphere the category centers are drawn on
    #[arg(long)]
    separation: Option<f64>,

    /// Generator seed
    #[arg(long)]
    seed: Option<u64>,
}

fn run_gen(args: GenArgs) -> Result<()> {
    let mut spec = SyntheticSpec::default();
    if let Some(v) = args.image_dim {
        spec.image_dim = v;
    }
    if let Some(v) = args.text_dim {
        spec.text_dim = v;
    }
    if let Some(v) = args.latent_dim {
        spec.latent_dim = v;
    }
    if let Some(v) = args.tasks {
        spec.num_tasks = v;
    }
    if let Some(v) = args.categories_per_task {
        spec.categories_per_task = v;
    }
    if let Some(v) = args.pairs_per_category {
        spec.pairs_per_category = v;
    }
    if let Some(v) = args.noise_std {
        spec.noise_std = v;
    }
    if let Some(v) = args.separation {
        spec.separation = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }

    let data = Dataset::generate(&spec)?;
    fs::create_dir_all(&args.out_dir)?;
    let (images, texts) = data.to_feature_files()?;
    images.save(&args.out_dir.join("images.xmft"))?;
    texts.save(&args.out_dir.join("texts.xmft"))?;
    data.sidecar().save(&args.out_dir.join("relevance.json"))?;
    fs::write(
        args.out_dir.join("generator.json"),
        serde_json::to_string_pretty(&spec)? + "\n",
    )?;

    let items: usize = data.tasks.iter().map(|t| t.image_features.len()).sum();
    println!(
        "wrote {} tasks, {} items per modality to {}",
        data.tasks.len(),
        items,
        args.out_dir.display()
    );
    println!("content hash {}", data.content_hash()?);
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,

    #[command(flatten)]
    config: ConfigArgs,

    /// Recall cutoff evaluated after each stage; repeatable (default 1, 5, 10)
    #[arg(long = "k")]
    ks: Vec<usize>,

    /// Index policy maintained during the run; repeatable (default both)
    #[arg(long = "policy", value_parser = parse_policy)]
    policies: Vec<IndexPolicy>,

    /// Train one model per direction, the penalty scoped to the query branch:
    /// the image-regularized model answers image queries, the
    /// text-regularized one text queries
    #[arg(long)]
    decoupled: bool,

    /// Directory receiving config.toml, summary.json, model and importance
    /// snapshots (decoupled runs write image/ and text/ subdirectories)
    #[arg(long)]
    out_dir: PathBuf,
}

fn run_train(args: TrainArgs) -> Result<()> {
    let dataset = args.data.load()?;
    let cfg = args.config.resolve()?;
    let mut plan = EvalPlan::default();
    if !args.ks.is_empty() {
        plan.ks = args.ks.clone();
    }
    if !args.policies.is_empty() {
        plan.policies = args.policies.clone();
    }

    fs::create_dir_all(&args.out_dir)?;
    fs::write(args.out_dir.join("config.toml"), toml::to_string_pretty(&cfg)?)?;

    if args.decoupled {
        let record = run_decoupled(&dataset.tasks, &cfg, &plan)?;
        write_run(&args.out_dir.join("image"), &record.image_run)?;
        write_run(&args.out_dir.join("text"), &record.text_run)?;
        print_run("image-regularized", &record.image_run);
        print_run("text-regularized", &record.text_run);
    } else {
        let record = run_sequence(&dataset.tasks, &cfg, &plan)?;
        write_run(&args.out_dir, &record)?;
        print_run("run", &record);
    }
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

/// Persists one run: per-stage model snapshots, per-task importance maps, and
/// the summary (configuration, loss and validation curves, the epoch each
/// task's kept checkpoint came from, triplet audit, per-stage recall).
fn write_run(dir: &Path, record: &RunRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    for snap in &record.snapshots {
        save_model_snapshot(&dir.join(format!("model-task{}.xmcl", snap.task_index)), snap)?;
    }
    for map in &record.importances {
        save_importance(&dir.join(format!("importance-task{}.xmcl", map.task_index)), map)?;
    }
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&record.summary())? + "\n",
    )?;
    Ok(())
}

fn print_run(label: &str, record: &RunRecord) {
    for (i, best) in record.best_epochs.iter().enumerate() {
        println!(
            "{label}: stage {} kept epoch {}/{} (val recall {:.4})",
            i + 1,
            best + 1,
            record.val_recall_curves[i].len(),
            record.val_recall_curves[i][*best],
        );
    }
    let Some(stage) = record.stage_evals.last() else {
        return;
    };
    let Some(kmax) = stage.cells.iter().map(|c| c.k).max() else {
        return;
    };
    for policy in [IndexPolicy::Reindex, IndexPolicy::NoReindex] {
        for direction in [QueryDirection::Im2Txt, QueryDirection::Txt2Im] {
            let known: Vec<f64> = stage
                .cells
                .iter()
                .filter(|c| {
                    c.policy == policy
                        && c.direction == direction
                        && c.k == kmax
                        && c.known_scope
                        && c.task.is_some()
                })
                .map(|c| c.recall)
                .collect();
            let unknown = stage.cells.iter().find(|c| {
                c.policy == policy && c.direction == direction && c.k == kmax && c.task.is_none()
            });
            let (Some(unknown), false) = (unknown, known.is_empty()) else {
                continue;
            };
            println!(
                "{label}: final [{} {}] known-avg R@{kmax} {:.4}, unknown R@{kmax} {:.4}",
                policy.name(),
                direction.name(),
                known.iter().sum::<f64>() / known.len() as f64,
                unknown.recall,
            );
        }
    }
}

// ---------------------------------------------------------------------------
// index

#[derive(Args)]
struct IndexArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Run directory holding model-task*.xmcl snapshots
    #[arg(long)]
    run_dir: PathBuf,

    /// reindex or no-reindex
    #[arg(long, value_parser = parse_policy)]
    policy: IndexPolicy,

    /// Output index file
    #[arg(long)]
    out: PathBuf,
}

fn run_index(args: IndexArgs) -> Result<()> {
    let dataset = args.data.load()?;
    let snapshots = load_run_snapshots(&args.run_dir)?;
    let mut store = IndexStore::new(args.policy);
    for task in &dataset.tasks {
        let snap = snapshot_for_task(&snapshots, task.task_id)?;
        let model = TwoBranchModel::restore(snap)?;
        store.index_task(&model, task)?;
    }
    store.save(&args.out)?;
    println!(
        "indexed {} entries over {} tasks ({}) -> {}",
        store.len(),
        store.indexed_tasks().len(),
        args.policy.name(),
        args.out.display()
    );
    Ok(())
}

fn load_run_snapshots(dir: &Path) -> Result<Vec<ModelSnapshot>> {
    let mut snaps = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("model-task") && name.ends_with(".xmcl") {
            snaps.push(
                load_model_snapshot(&path)
                    .with_context(|| format!("reading {}", path.display()))?,
            );
        }
    }
    if snaps.is_empty() {
        bail!("no model-task*.xmcl snapshots in {}", dir.display());
    }
    snaps.sort_by_key(|s| s.task_index);
    Ok(snaps)
}

/// The snapshot that indexes a task: its own stage's model when the run
/// trained per task, or the single final model of a joint run.
fn snapshot_for_task(snaps: &[ModelSnapshot], task_id: u16) -> Result<&ModelSnapshot> {
    if let Some(snap) = snaps.iter().find(|s| s.task_index == task_id as u32) {
        return Ok(snap);
    }
    if snaps.len() == 1 {
        return Ok(&snaps[0]);
    }
    bail!("no snapshot for task {task_id} in the run directory");
}

// ---------------------------------------------------------------------------
// query

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Saved index file
    #[arg(long)]
    index: PathBuf,

    /// Model snapshot that embeds the query
    #[arg(long)]
    model: PathBuf,

    /// Item id whose features form the query
    #[arg(long)]
    id: u64,

    /// im2txt or txt2im
    #[arg(long, value_parser = parse_direction)]
    direction: QueryDirection,

    /// Restrict candidates to this task; omit to search all indexed tasks
    #[arg(long)]
    task: Option<u16>,

    /// Ranking length
    #[arg(long, default_value_t = 10)]
    k: usize,

    /// text or json
    #[arg(long, default_value = "text", value_parser = parse_format)]
    format: Format,
}

#[derive(Serialize)]
struct RankingOut {
    query_id: u64,
    direction: &'static str,
    scope: String,
    ranking: Vec<RankedHit>,
}

#[derive(Serialize)]
struct RankedHit {
    rank: usize,
    item_id: u64,
    distance: f64,
}

fn run_query(args: QueryArgs) -> Result<()> {
    let dataset = args.data.load()?;
    let store = IndexStore::load(&args.index)?;
    let snap = load_model_snapshot(&args.model)?;
    let model = TwoBranchModel::restore(&snap)?;
    let feats = query_features(&dataset, args.direction, args.id)?;
    let scope = match args.task {
        Some(t) => QueryScope::KnownTask(t),
        None => QueryScope::Unknown,
    };
    let result = store.query(&model, args.id, feats, args.direction, scope, args.k)?;
    match args.format {
        Format::Json => {
            let out = RankingOut {
                query_id: result.query_id,
                direction: args.direction.name(),
                scope: match args.task {
                    Some(t) => format!("task-{t}"),
                    None => "unknown".into(),
                },
                ranking: result
                    .ranking
                    .iter()
                    .enumerate()
                    .map(|(i, &(item_id, distance))| RankedHit { rank: i + 1, item_id, distance })
                    .collect(),
            };
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Format::Text => {
            for (i, (id, dist)) in result.ranking.iter().enumerate() {
                println!("{:>4}  {:>8}  {:.6}", i + 1, id, dist);
            }
        }
    }
    Ok(())
}

fn query_features(dataset: &Dataset, direction: QueryDirection, id: u64) -> Result<&Vec<f64>> {
    for task in &dataset.tasks {
        let source = match direction.source() {
            Modality::Image => &task.image_features,
            Modality::Text => &task.text_features,
        };
        if let Some(feats) = source.get(&id) {
            return Ok(feats);
        }
    }
    bail!(
        "item {id} has no {} features in the dataset",
        direction.source().name()
    );
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Saved index file
    #[arg(long)]
    index: PathBuf,

    /// Model snapshot that embeds the queries
    #[arg(long)]
    model: PathBuf,

    /// Recall cutoff; repeatable (default 1, 5, 10)
    #[arg(long = "k")]
    ks: Vec<usize>,

    /// text or json
    #[arg(long, default_value = "text", value_parser = parse_format)]
    format: Format,
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let dataset = args.data.load()?;
    let store = IndexStore::load(&args.index)?;
    let snap = load_model_snapshot(&args.model)?;
    let model = TwoBranchModel::restore(&snap)?;
    let ks = if args.ks.is_empty() { vec![1, 5, 10] } else { args.ks.clone() };
    let cells = evaluate_store(&model, &store, &dataset, &ks)?;
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&cells)?),
        Format::Text => {
            println!(
                "{:<8} {:<8} {:<6} {:>4} {:>8} {:>8}",
                "dir", "scope", "task", "k", "recall", "queries"
            );
            for c in &cells {
                println!(
                    "{:<8} {:<8} {:<6} {:>4} {:>8.4} {:>8}",
                    c.direction.name(),
                    if c.known_scope { "known" } else { "unknown" },
                    c.task.map_or_else(|| "all".into(), |t| t.to_string()),
                    c.k,
                    c.recall,
                    c.included,
                );
            }
        }
    }
    Ok(())
}

/// Test-query recall over every indexed task: per task under known-task and
/// unknown-task scoping, plus the pooled unknown-task row (task column `all`).
fn evaluate_store(
    model: &TwoBranchModel,
    store: &IndexStore,
    dataset: &Dataset,
    ks: &[usize],
) -> Result<Vec<RecallCell>> {
    let tasks: Vec<&TaskData> = dataset
        .tasks
        .iter()
        .filter(|t| store.indexed_tasks().contains(&t.task_id))
        .collect();
    if tasks.is_empty() {
        bail!("the index covers none of the dataset's tasks");
    }
    let kmax = *ks.iter().max().context("at least one cutoff required")?;
    let mut all_sims = Vec::with_capacity(tasks.len());
    for task in &tasks {
        all_sims.push(task.eval_sim()?);
    }

    let mut cells = Vec::new();
    for direction in [QueryDirection::Im2Txt, QueryDirection::Txt2Im] {
        let mut pooled: Vec<QueryResult> = Vec::new();
        for (ti, task) in tasks.iter().enumerate() {
            let sims = std::slice::from_ref(&all_sims[ti]);
            let mut known = Vec::with_capacity(task.test_ids.len());
            let mut unknown = Vec::with_capacity(task.test_ids.len());
            for &q in &task.test_ids {
                let source = match direction.source() {
                    Modality::Image => &task.image_features,
                    Modality::Text => &task.text_features,
                };
                let feats = source
                    .get(&q)
                    .with_context(|| format!("missing features for test item {q}"))?;
                known.push(store.query(
                    model,
                    q,
                    feats,
                    direction,
                    QueryScope::KnownTask(task.task_id),
                    kmax,
                )?);
                unknown.push(store.query(model, q, feats, direction, QueryScope::Unknown, kmax)?);
            }
            for &k in ks {
                let report = recall_at_k(&known, sims, k)?;
                cells.push(RecallCell {
                    policy: store.policy(),
                    direction,
                    k,
                    task: Some(task.task_id),
                    known_scope: true,
                    recall: report.recall,
                    included: report.included,
                    excluded: report.excluded.len(),
                });
                let report = recall_at_k(&unknown, sims, k)?;
                cells.push(RecallCell {
                    policy: store.policy(),
                    direction,
                    k,
                    task: Some(task.task_id),
                    known_scope: false,
                    recall: report.recall,
                    included: report.included,
                    excluded: report.excluded.len(),
                });
            }
            pooled.extend(unknown);
        }
        for &k in ks {
            let report = recall_at_k(&pooled, &all_sims, k)?;
            cells.push(RecallCell {
                policy: store.policy(),
                direction,
                k,
                task: None,
                known_scope: false,
                recall: report.recall,
                included: report.included,
                excluded: report.excluded.len(),
            });
        }
    }
    Ok(cells)
}

// ---------------------------------------------------------------------------
// grid

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    data: DataArgs,

    #[command(flatten)]
    config: ConfigArgs,

    /// Recall cutoff; repeatable (default 1, 5, 10)
    #[arg(long = "k")]
    ks: Vec<usize>,

    /// Repetitions per cell; repetition r runs with seed base+r
    #[arg(long, default_value_t = 5)]
    reps: usize,

    /// Worker threads (0 = one per core)
    #[arg(long, default_value_t = 0)]
    workers: usize,

    /// Directory receiving grid.json, results.csv, results.json
    #[arg(long)]
    out_dir: PathBuf,
}

fn run_grid(args: GridArgs) -> Result<()> {
    let dataset = args.data.load()?;
    let base = args.config.resolve()?;
    let ks = if args.ks.is_empty() { vec![1, 5, 10] } else { args.ks.clone() };
    let grid = ExperimentGrid::full(base, ks, args.reps);

    fs::create_dir_all(&args.out_dir)?;
    fs::write(
        args.out_dir.join("grid.json"),
        serde_json::to_string_pretty(&grid)? + "\n",
    )?;

    let table = run_experiment(&grid, &dataset, args.workers)?;
    let (csv, json) = write_results(&table, &args.out_dir)?;

    let mut failed = 0usize;
    for cell in &table.cells {
        match &cell.error {
            Some(err) => {
                failed += 1;
                eprintln!("cell {}: FAILED: {err}", cell.cell.label());
            }
            None => println!("cell {}: ok ({} rows)", cell.cell.label(), cell.rows.len()),
        }
    }
    println!("config hash {}", table.config_hash);
    println!("data hash   {}", table.data_hash);
    println!("wrote {} and {}", csv.display(), json.display());
    if failed > 0 {
        bail!("{failed} of {} grid cells failed", table.cells.len());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// diagnose

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Run directory holding model-task*.xmcl snapshots
    #[arg(long)]
    run_dir: PathBuf,

    /// Saved index file
    #[arg(long)]
    index: PathBuf,

    /// text or json
    #[arg(long, default_value = "text", value_parser = parse_format)]
    format: Format,
}

fn run_diagnose(args: DiagnoseArgs) -> Result<()> {
    let dataset = args.data.load()?;
    let snapshots = load_run_snapshots(&args.run_dir)?;
    let store = IndexStore::load(&args.index)?;
    let report = diagnose_drift(&snapshots, &dataset.tasks, &store)?;
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        Format::Text => {
            println!("current model: task {}", report.current_task);
            println!(
                "{:<6} {:>11} {:>11} {:>11} {:>11} {:>9}",
                "task", "img-drift", "txt-drift", "pair-then", "pair-now", "overlap"
            );
            for row in &report.rows {
                println!(
                    "{:<6} {:>11.4} {:>11.4} {:>11.4} {:>11.4} {:>9.3}",
                    row.task_id,
                    row.image_drift,
                    row.text_drift,
                    row.pair_distance_then,
                    row.pair_distance_now,
                    row.overlap,
                );
            }
        }
    }
    Ok(())
}
