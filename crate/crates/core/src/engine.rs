//! Training orchestration over a task sequence.
//!
//! A run owns the model, walks tasks in order (or trains jointly over all of
//! them), applies the anti-forgetting penalty when configured, estimates
//! parameter importance after each task, feeds the embedding index under the
//! requested policies, and evaluates retrieval after every stage.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::index::{
    recall_at_k, IndexPolicy, IndexStore, QueryDirection, QueryResult, QueryScope,
};
use crate::linalg::{AdamState, Mode};
use crate::loss::{
    embed_ids_cached, ranking_loss, referenced_items, sample_triplets, scatter_grads_to_params,
    EmbeddingSet, Mining, PairPolicy, PositivePair, SimilarityMatrix,
};
use crate::model::{Modality, ModelConfig, ModelSnapshot, SharingMode, TwoBranchModel};
use crate::reg::{
    compose_loss, estimate_ewc, estimate_mas, penalty, EstimationInputs, Estimator, ImportanceMap,
    RegConfig,
};

/// Epoch checkpoints are selected by validation recall at this depth.
pub const VAL_RECALL_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// One training phase over all tasks; negatives may cross task borders.
    JointWithCtnp,
    /// One training phase over all tasks; negatives stay within the anchor's
    /// task even though all tasks are visible.
    JointNoCtnp,
    /// Tasks arrive one at a time; only the current task's data is visible,
    /// so cross-task negatives cannot occur.
    Continual,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::JointWithCtnp => "joint-with-ctnp",
            TrainMode::JointNoCtnp => "joint-no-ctnp",
            TrainMode::Continual => "continual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    /// Plain fine-tuning: no penalty, no importance estimation.
    Ft,
    Ewc,
    Mas,
}

impl Regularizer {
    pub fn name(self) -> &'static str {
        match self {
            Regularizer::Ft => "ft",
            Regularizer::Ewc => "ewc",
            Regularizer::Mas => "mas",
        }
    }

    fn estimator(self) -> Option<Estimator> {
        match self {
            Regularizer::Ft => None,
            Regularizer::Ewc => Some(Estimator::Ewc),
            Regularizer::Mas => Some(Estimator::Mas),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub regularizer: Regularizer,
    pub reg: RegConfig,
    pub sharing: SharingMode,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    /// Positive pairs per batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_keep: f64,
    pub loss: crate::loss::LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Continual,
            regularizer: Regularizer::Ft,
            reg: RegConfig::default(),
            sharing: SharingMode::NoSharing,
            hidden_dim: 64,
            embed_dim: 16,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-4,
            dropout_keep: 0.5,
            loss: crate::loss::LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig(
                "hidden and embedding dims must be >= 1".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "dropout keep probability must be in (0, 1], got {}",
                self.dropout_keep
            )));
        }
        if !self.reg.lambda3.is_finite() || self.reg.lambda3 < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda3 must be finite and >= 0, got {}",
                self.reg.lambda3
            )));
        }
        if self.mode != TrainMode::Continual && self.regularizer != Regularizer::Ft {
            return Err(Error::InvalidConfig(
                "importance regularizers only apply in continual mode".into(),
            ));
        }
        self.loss.validate()
    }
}

/// What to evaluate after each stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    pub ks: Vec<usize>,
    pub policies: Vec<IndexPolicy>,
    pub directions: Vec<QueryDirection>,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            policies: vec![IndexPolicy::Reindex, IndexPolicy::NoReindex],
            directions: vec![QueryDirection::Im2Txt, QueryDirection::Txt2Im],
        }
    }
}

impl EvalPlan {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.policies.is_empty() || self.directions.is_empty() {
            return Err(Error::InvalidConfig(
                "evaluation plan needs at least one k, policy and direction".into(),
            ));
        }
        if let Some(&k) = self.ks.iter().find(|&&k| k == 0) {
            return Err(Error::InvalidK(k));
        }
        Ok(())
    }
}

/// Counters over every sampled triplet of a run. Continual runs must end
/// with `ctnp == 0`; `run_sequence` enforces that.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletAudit {
    pub itnp: u64,
    pub ctnp: u64,
    pub skipped_pairs: u64,
}

impl TripletAudit {
    fn merge(&mut self, other: TripletAudit) {
        self.itnp += other.itnp;
        self.ctnp += other.ctnp;
        self.skipped_pairs += other.skipped_pairs;
    }
}

/// One recall measurement. `task` restricts the query set to that task's
/// test items; `None` pools every task's test queries. `known_scope` says
/// whether candidates were restricted to the query's own task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCell {
    pub policy: IndexPolicy,
    pub direction: QueryDirection,
    pub k: usize,
    pub task: Option<u16>,
    pub known_scope: bool,
    pub recall: f64,
    pub included: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEvals {
    /// Task id of the stage just trained (and indexed) when this was taken.
    pub after_task: u16,
    pub cells: Vec<RecallCell>,
}

impl StageEvals {
    pub fn cell(
        &self,
        policy: IndexPolicy,
        direction: QueryDirection,
        k: usize,
        task: Option<u16>,
        known_scope: bool,
    ) -> Option<&RecallCell> {
        self.cells.iter().find(|c| {
            c.policy == policy
                && c.direction == direction
                && c.k == k
                && c.task == task
                && c.known_scope == known_scope
        })
    }
}

/// Everything one training phase reports back.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Mean per-batch loss for each epoch.
    pub loss_curve: Vec<f64>,
    /// Validation recall@10 after each epoch (0.0 when there is no val split).
    pub val_recall_curve: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub audit: TripletAudit,
}

/// Full record of one run: per-task snapshots and importances, training
/// curves, triplet audit, and retrieval evaluation after every stage.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub task_ids: Vec<u16>,
    pub snapshots: Vec<ModelSnapshot>,
    pub importances: Vec<ImportanceMap>,
    pub loss_curves: Vec<Vec<f64>>,
    pub val_recall_curves: Vec<Vec<f64>>,
    pub best_epochs: Vec<usize>,
    pub audit: TripletAudit,
    pub stage_evals: Vec<StageEvals>,
    /// Wall-clock duration of the run; excluded from determinism guarantees.
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn stage(&self, after_task: u16) -> Option<&StageEvals> {
        self.stage_evals.iter().find(|s| s.after_task == after_task)
    }

    pub fn final_stage(&self) -> Option<&StageEvals> {
        self.stage_evals.last()
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            config: self.config.clone(),
            task_ids: self.task_ids.clone(),
            loss_curves: self.loss_curves.clone(),
            val_recall_curves: self.val_recall_curves.clone(),
            best_epochs: self.best_epochs.clone(),
            audit: self.audit,
            stage_evals: self.stage_evals.clone(),
            wall_clock_secs: self.wall_clock_secs,
        }
    }
}

/// Serializable view of a run without the parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: TrainConfig,
    pub task_ids: Vec<u16>,
    pub loss_curves: Vec<Vec<f64>>,
    pub val_recall_curves: Vec<Vec<f64>>,
    pub best_epochs: Vec<usize>,
    pub audit: TripletAudit,
    pub stage_evals: Vec<StageEvals>,
    pub wall_clock_secs: f64,
}

/// Two runs sharing one seed: the image-branch-regularized model answers
/// image queries, the text-branch-regularized model answers text queries.
#[derive(Debug, Clone)]
pub struct DecoupledRecord {
    pub image_run: RunRecord,
    pub text_run: RunRecord,
}

/// RNG stream ids. Every consumer of randomness gets its own ChaCha stream
/// derived from the run seed, so adding or removing one consumer (e.g.
/// importance estimation) never perturbs another.
pub const STREAM_INIT: u64 = 0;

pub fn train_stream(task_id: u16) -> u64 {
    1 + 3 * task_id as u64
}

pub fn estimate_stream(task_id: u16) -> u64 {
    2 + 3 * task_id as u64
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Training inputs for one phase: the positive pairs, per-task annotated
/// relevance for negative sampling, and the feature vectors behind them.
struct TrainPool {
    pairs: Vec<PositivePair>,
    sims: Vec<SimilarityMatrix>,
    images: BTreeMap<u64, Vec<f64>>,
    texts: BTreeMap<u64, Vec<f64>>,
    policy: PairPolicy,
}

fn single_task_pool(task: &TaskData) -> Result<TrainPool> {
    Ok(TrainPool {
        pairs: task.train_pairs(),
        sims: vec![task.train_sim()?],
        images: task.features_subset(Modality::Image, &task.train_ids)?,
        texts: task.features_subset(Modality::Text, &task.train_ids)?,
        policy: PairPolicy::ItnpOnly,
    })
}

fn joint_pool(tasks: &[TaskData], policy: PairPolicy) -> Result<TrainPool> {
    let mut pairs = Vec::new();
    let mut sims = Vec::new();
    let mut images = BTreeMap::new();
    let mut texts = BTreeMap::new();
    for task in tasks {
        pairs.extend(task.train_pairs());
        sims.push(task.train_sim()?);
        images.extend(task.features_subset(Modality::Image, &task.train_ids)?);
        texts.extend(task.features_subset(Modality::Text, &task.train_ids)?);
    }
    Ok(TrainPool {
        pairs,
        sims,
        images,
        texts,
        policy,
    })
}

struct RegContext<'a> {
    anchor: &'a [f64],
    importance: &'a ImportanceMap,
}

/// Trains the model on one task, starting from its current parameters.
///
/// `prev` carries the previous task's snapshot (the penalty anchor) and its
/// importance map; it must be present exactly when the config names a
/// regularizer and a previous task exists. With `lambda3 == 0` the penalty
/// branch is skipped entirely, so the arithmetic matches plain fine-tuning
/// bit for bit.
pub fn train_task(
    model: &mut TwoBranchModel,
    task: &TaskData,
    prev: Option<(&ModelSnapshot, &ImportanceMap)>,
    cfg: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    task.validate()?;
    if prev.is_some() && cfg.regularizer == Regularizer::Ft {
        return Err(Error::InvalidConfig(
            "plain fine-tuning takes no penalty anchor".into(),
        ));
    }
    let reg = match prev {
        Some((snapshot, importance)) => {
            if snapshot.params.len() != model.param_len() {
                return Err(Error::ShapeMismatch {
                    what: "penalty anchor parameters",
                    expected: model.param_len(),
                    actual: snapshot.params.len(),
                });
            }
            importance.validate(&model.layout())?;
            Some(RegContext {
                anchor: &snapshot.params,
                importance,
            })
        }
        None => None,
    };
    let pool = single_task_pool(task)?;
    train_phase(model, &pool, &[task], reg, cfg, task.task_id, rng)
}

fn train_phase(
    model: &mut TwoBranchModel,
    pool: &TrainPool,
    val_tasks: &[&TaskData],
    reg: Option<RegContext>,
    cfg: &TrainConfig,
    task_label: u16,
    rng: &mut ChaCha12Rng,
) -> Result<TrainOutcome> {
    if pool.pairs.is_empty() {
        return Err(Error::EmptyTaskData("training pairs"));
    }
    let layout = model.layout();
    let mut flat = model.flatten();
    let mut adam = AdamState::new(layout.total, cfg.learning_rate);
    let mut pairs = pool.pairs.clone();

    let val_sims: Vec<SimilarityMatrix> = val_tasks
        .iter()
        .map(|t| t.eval_sim())
        .collect::<Result<_>>()?;
    let has_val = val_tasks.iter().any(|t| !t.val_ids.is_empty());

    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut val_curve = Vec::with_capacity(cfg.epochs);
    let mut audit = TripletAudit::default();
    let mut best_recall = f64::NEG_INFINITY;
    let mut best_epoch = cfg.epochs - 1;
    let mut best_flat = flat.clone();

    for epoch in 0..cfg.epochs {
        pairs.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_index, chunk) in pairs.chunks(cfg.batch_size).enumerate() {
            let mining = mining_embeddings(model, pool, chunk, cfg)?;
            let sampled =
                sample_triplets(chunk, &pool.sims, pool.policy, &cfg.loss, mining.as_ref(), rng)?;
            audit.itnp += sampled.itnp_count as u64;
            audit.ctnp += sampled.ctnp_count as u64;
            audit.skipped_pairs += sampled.skipped_pairs as u64;
            batches += 1;
            if sampled.triplets.is_empty() {
                continue;
            }

            let (image_ids, text_ids) = referenced_items(&sampled.triplets);
            let image_caches = embed_ids_cached(
                model,
                Modality::Image,
                &pool.images,
                &image_ids,
                Mode::Train,
                cfg.dropout_keep,
                rng,
            )?;
            let text_caches = embed_ids_cached(
                model,
                Modality::Text,
                &pool.texts,
                &text_ids,
                Mode::Train,
                cfg.dropout_keep,
                rng,
            )?;
            let mut embeddings = EmbeddingSet::default();
            for (id, (z, _)) in &image_caches {
                embeddings.insert_image(*id, z.clone());
            }
            for (id, (z, _)) in &text_caches {
                embeddings.insert_text(*id, z.clone());
            }

            let ranking = ranking_loss(&sampled.triplets, &embeddings, &cfg.loss)?;
            let mut grads = vec![0.0; layout.total];
            scatter_grads_to_params(
                model,
                &layout,
                &image_caches,
                &text_caches,
                &ranking.grads,
                &mut grads,
            )?;

            let mut total_loss = ranking.loss;
            if let Some(ctx) = &reg {
                if cfg.reg.lambda3 != 0.0 {
                    let (pen, pen_grads) =
                        penalty(&flat, ctx.anchor, ctx.importance, &layout, cfg.reg.scope)?;
                    total_loss = compose_loss(ranking.loss, pen, cfg.reg.lambda3);
                    for (g, p) in grads.iter_mut().zip(&pen_grads) {
                        *g += cfg.reg.lambda3 * p;
                    }
                }
            }
            if !total_loss.is_finite() {
                return Err(Error::NanLoss {
                    task: task_label,
                    epoch,
                    batch: batch_index,
                    image_ids: chunk.iter().map(|p| p.image_id).collect(),
                    text_ids: chunk.iter().map(|p| p.text_id).collect(),
                });
            }

            adam.step(&mut flat, &grads)?;
            model.apply_flat(&flat)?;
            epoch_loss += total_loss;
        }
        loss_curve.push(if batches > 0 {
            epoch_loss / batches as f64
        } else {
            0.0
        });

        let recall = if has_val {
            validation_recall(model, val_tasks, &val_sims, VAL_RECALL_K)?
        } else {
            0.0
        };
        val_curve.push(recall);
        if has_val && recall > best_recall {
            best_recall = recall;
            best_epoch = epoch;
            best_flat.copy_from_slice(&flat);
        }
    }

    if has_val {
        model.apply_flat(&best_flat)?;
    }
    Ok(TrainOutcome {
        loss_curve,
        val_recall_curve: val_curve,
        best_epoch,
        audit,
    })
}

/// Eval-mode embeddings of every batch item, needed only for hardest-in-batch
/// mining. Consumes no randomness.
fn mining_embeddings(
    model: &TwoBranchModel,
    pool: &TrainPool,
    chunk: &[PositivePair],
    cfg: &TrainConfig,
) -> Result<Option<EmbeddingSet>> {
    if cfg.loss.mining != Mining::HardestInBatch {
        return Ok(None);
    }
    let mut set = EmbeddingSet::default();
    for pair in chunk {
        let img = pool.images.get(&pair.image_id).ok_or(Error::MissingFeature {
            modality: "image",
            id: pair.image_id,
        })?;
        set.insert_image(pair.image_id, model.embed(Modality::Image, img)?);
        let txt = pool.texts.get(&pair.text_id).ok_or(Error::MissingFeature {
            modality: "text",
            id: pair.text_id,
        })?;
        set.insert_text(pair.text_id, model.embed(Modality::Text, txt)?);
    }
    Ok(Some(set))
}

/// Recall@k over the validation split: train items are indexed with the
/// current model and every val item queries in both directions. Single-task
/// validation scopes candidates to the task; multi-task validation searches
/// everything.
fn validation_recall(
    model: &TwoBranchModel,
    tasks: &[&TaskData],
    sims: &[SimilarityMatrix],
    k: usize,
) -> Result<f64> {
    let mut store = IndexStore::new(IndexPolicy::NoReindex);
    for task in tasks {
        store.index_task(model, task)?;
    }
    let mut results = Vec::new();
    for task in tasks {
        let scope = if tasks.len() == 1 {
            QueryScope::KnownTask(task.task_id)
        } else {
            QueryScope::Unknown
        };
        for &q in &task.val_ids {
            let img = task.image_features.get(&q).ok_or(Error::MissingFeature {
                modality: "image",
                id: q,
            })?;
            results.push(store.query(model, q, img, QueryDirection::Im2Txt, scope, k)?);
            let txt = task.text_features.get(&q).ok_or(Error::MissingFeature {
                modality: "text",
                id: q,
            })?;
            results.push(store.query(model, q, txt, QueryDirection::Txt2Im, scope, k)?);
        }
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    Ok(recall_at_k(&results, sims, k)?.recall)
}

/// Recall measurements after one stage: per task under known-task and
/// unknown-task scoping, plus the pooled unknown-task row (`task: None`)
/// over every test query seen so far.
fn evaluate_stage(
    model: &TwoBranchModel,
    stores: &[IndexStore],
    tasks_so_far: &[&TaskData],
    eval_sims: &BTreeMap<u16, SimilarityMatrix>,
    plan: &EvalPlan,
    after_task: u16,
) -> Result<StageEvals> {
    let kmax = *plan.ks.iter().max().expect("plan validated nonempty");
    let all_sims: Vec<SimilarityMatrix> = tasks_so_far
        .iter()
        .map(|t| eval_sims[&t.task_id].clone())
        .collect();
    let mut cells = Vec::new();
    for store in stores {
        for &direction in &plan.directions {
            let mut pooled_unknown: Vec<QueryResult> = Vec::new();
            for task in tasks_so_far {
                let sim = std::slice::from_ref(&eval_sims[&task.task_id]);
                let mut known = Vec::with_capacity(task.test_ids.len());
                let mut unknown = Vec::with_capacity(task.test_ids.len());
                for &q in &task.test_ids {
                    let source = match direction {
                        QueryDirection::Im2Txt => &task.image_features,
                        QueryDirection::Txt2Im => &task.text_features,
                    };
                    let feats = source.get(&q).ok_or(Error::MissingFeature {
                        modality: direction.source().name(),
                        id: q,
                    })?;
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
                for &k in &plan.ks {
                    let report = recall_at_k(&known, sim, k)?;
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
                    let report = recall_at_k(&unknown, sim, k)?;
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
                pooled_unknown.extend(unknown);
            }
            for &k in &plan.ks {
                let report = recall_at_k(&pooled_unknown, &all_sims, k)?;
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
    }
    Ok(StageEvals { after_task, cells })
}

fn validate_sequence(tasks: &[TaskData]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::EmptyTaskData("task sequence"));
    }
    let mut seen = BTreeSet::new();
    for task in tasks {
        task.validate()?;
        if !seen.insert(task.task_id) {
            return Err(Error::DuplicateTaskId(task.task_id));
        }
    }
    for window in tasks.windows(2) {
        if window[1].task_id < window[0].task_id {
            return Err(Error::InvalidConfig(format!(
                "task ids must arrive in increasing order: {} after {}",
                window[1].task_id, window[0].task_id
            )));
        }
    }
    Ok(())
}

fn feature_dims(tasks: &[TaskData]) -> Result<(usize, usize)> {
    let first = &tasks[0];
    let image_dim = first
        .image_features
        .values()
        .next()
        .ok_or(Error::EmptyTaskData("image features"))?
        .len();
    let text_dim = first
        .text_features
        .values()
        .next()
        .ok_or(Error::EmptyTaskData("text features"))?
        .len();
    for task in tasks {
        for row in task.image_features.values() {
            if row.len() != image_dim {
                return Err(Error::DimensionMismatch {
                    context: "image features",
                    expected: image_dim,
                    actual: row.len(),
                });
            }
        }
        for row in task.text_features.values() {
            if row.len() != text_dim {
                return Err(Error::DimensionMismatch {
                    context: "text features",
                    expected: text_dim,
                    actual: row.len(),
                });
            }
        }
    }
    Ok((image_dim, text_dim))
}

fn estimate_importance(
    model: &TwoBranchModel,
    task: &TaskData,
    cfg: &TrainConfig,
    estimator: Estimator,
    previous: Option<&ImportanceMap>,
) -> Result<ImportanceMap> {
    let images = task.features_subset(Modality::Image, &task.train_ids)?;
    let texts = task.features_subset(Modality::Text, &task.train_ids)?;
    match estimator {
        Estimator::Ewc => {
            let sim = task.train_sim()?;
            let pairs = task.train_pairs();
            let inputs = EstimationInputs {
                sim: &sim,
                pairs: &pairs,
                image_features: &images,
                text_features: &texts,
            };
            let mut rng = stream_rng(cfg.seed, estimate_stream(task.task_id));
            estimate_ewc(
                model,
                &inputs,
                &cfg.loss,
                cfg.batch_size,
                task.task_id as u32,
                &mut rng,
            )
        }
        Estimator::Mas => estimate_mas(model, &images, &texts, previous, task.task_id as u32),
    }
}

/// Runs the configured mode over the task sequence and reports everything.
///
/// Continual mode walks tasks in order: train (with penalty when configured
/// and a previous task exists), snapshot, estimate importance, index under
/// every requested policy, evaluate. Joint modes run one training phase over
/// the concatenated pair pool and then index and evaluate once.
pub fn run_sequence(tasks: &[TaskData], cfg: &TrainConfig, plan: &EvalPlan) -> Result<RunRecord> {
    let start = Instant::now();
    cfg.validate()?;
    plan.validate()?;
    validate_sequence(tasks)?;
    let (image_dim, text_dim) = feature_dims(tasks)?;

    let model_cfg = ModelConfig::new(
        image_dim,
        text_dim,
        cfg.hidden_dim,
        cfg.embed_dim,
        cfg.sharing,
    );
    let mut init_rng = stream_rng(cfg.seed, STREAM_INIT);
    let mut model = TwoBranchModel::init(model_cfg, &mut init_rng)?;

    let mut eval_sims = BTreeMap::new();
    for task in tasks {
        eval_sims.insert(task.task_id, task.eval_sim()?);
    }

    let mut record = RunRecord {
        config: cfg.clone(),
        task_ids: tasks.iter().map(|t| t.task_id).collect(),
        snapshots: Vec::new(),
        importances: Vec::new(),
        loss_curves: Vec::new(),
        val_recall_curves: Vec::new(),
        best_epochs: Vec::new(),
        audit: TripletAudit::default(),
        stage_evals: Vec::new(),
        wall_clock_secs: 0.0,
    };

    match cfg.mode {
        TrainMode::Continual => {
            let mut stores: Vec<IndexStore> =
                plan.policies.iter().map(|p| IndexStore::new(*p)).collect();
            for (i, task) in tasks.iter().enumerate() {
                let prev = if i > 0 && cfg.regularizer != Regularizer::Ft {
                    Some((
                        record.snapshots.last().expect("snapshot of previous task"),
                        record.importances.last().expect("importance of previous task"),
                    ))
                } else {
                    None
                };
                let mut rng = stream_rng(cfg.seed, train_stream(task.task_id));
                let outcome = train_task(&mut model, task, prev, cfg, &mut rng)?;
                record.loss_curves.push(outcome.loss_curve);
                record.val_recall_curves.push(outcome.val_recall_curve);
                record.best_epochs.push(outcome.best_epoch);
                record.audit.merge(outcome.audit);

                record.snapshots.push(model.snapshot(task.task_id as u32));
                if let Some(estimator) = cfg.regularizer.estimator() {
                    let importance = estimate_importance(
                        &model,
                        task,
                        cfg,
                        estimator,
                        record.importances.last(),
                    )?;
                    record.importances.push(importance);
                }
                for store in &mut stores {
                    store.index_task(&model, task)?;
                }
                let so_far: Vec<&TaskData> = tasks[..=i].iter().collect();
                record.stage_evals.push(evaluate_stage(
                    &model,
                    &stores,
                    &so_far,
                    &eval_sims,
                    plan,
                    task.task_id,
                )?);
            }
            if record.audit.ctnp > 0 {
                return Err(Error::InvalidConfig(format!(
                    "continual run sampled {} cross-task negatives",
                    record.audit.ctnp
                )));
            }
        }
        TrainMode::JointWithCtnp | TrainMode::JointNoCtnp => {
            let policy = match cfg.mode {
                TrainMode::JointWithCtnp => PairPolicy::ItnpAndCtnp,
                _ => PairPolicy::ItnpOnly,
            };
            let pool = joint_pool(tasks, policy)?;
            let all: Vec<&TaskData> = tasks.iter().collect();
            let first_id = tasks[0].task_id;
            let last_id = tasks.last().expect("nonempty").task_id;
            let mut rng = stream_rng(cfg.seed, train_stream(first_id));
            let outcome = train_phase(&mut model, &pool, &all, None, cfg, first_id, &mut rng)?;
            record.loss_curves.push(outcome.loss_curve);
            record.val_recall_curves.push(outcome.val_recall_curve);
            record.best_epochs.push(outcome.best_epoch);
            record.audit.merge(outcome.audit);
            record.snapshots.push(model.snapshot(last_id as u32));

            let mut stores: Vec<IndexStore> =
                plan.policies.iter().map(|p| IndexStore::new(*p)).collect();
            for store in &mut stores {
                for task in tasks {
                    store.index_task(&model, task)?;
                }
            }
            record.stage_evals.push(evaluate_stage(
                &model,
                &stores,
                &all,
                &eval_sims,
                plan,
                last_id,
            )?);
            if cfg.mode == TrainMode::JointNoCtnp && record.audit.ctnp > 0 {
                return Err(Error::InvalidConfig(format!(
                    "joint run without cross-task negatives sampled {}",
                    record.audit.ctnp
                )));
            }
        }
    }

    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Two runs with one seed, each regularizing only the branch that will embed
/// queries: the image-scoped run is evaluated image-to-text, the text-scoped
/// run text-to-image.
pub fn run_decoupled(
    tasks: &[TaskData],
    cfg: &TrainConfig,
    plan: &EvalPlan,
) -> Result<DecoupledRecord> {
    let mut image_cfg = cfg.clone();
    image_cfg.reg.scope = crate::reg::RegScope::ImageOnly;
    let mut image_plan = plan.clone();
    image_plan.directions = vec![QueryDirection::Im2Txt];
    let image_run = run_sequence(tasks, &image_cfg, &image_plan)?;

    let mut text_cfg = cfg.clone();
    text_cfg.reg.scope = crate::reg::RegScope::TextOnly;
    let mut text_plan = plan.clone();
    text_plan.directions = vec![QueryDirection::Txt2Im];
    let text_run = run_sequence(tasks, &text_cfg, &text_plan)?;

    Ok(DecoupledRecord {
        image_run,
        text_run,
    })
}
