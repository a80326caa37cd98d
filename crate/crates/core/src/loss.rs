//! Pair bookkeeping, triplet construction in both retrieval directions, and
//! the bi-directional margin ranking loss with its embedding gradients.
//!
//! Negative pairs are classified by origin: intra-task (ITNP) come from the
//! anchor's own task, cross-task (CTNP) from a different task. Continual
//! training only ever sees ITNPs.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::BACKWARD_NORM_EPS;
use crate::model::distance;

/// Sparse cross-modal pair labels for one task: s_ij = 1 marks (image i,
/// text j) as a positive pair, everything else is negative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarityMatrix {
    task_id: u16,
    image_ids: Vec<u64>,
    text_ids: Vec<u64>,
    positives: BTreeSet<(u64, u64)>,
    pos_texts_of_image: BTreeMap<u64, BTreeSet<u64>>,
    pos_images_of_text: BTreeMap<u64, BTreeSet<u64>>,
}

impl SimilarityMatrix {
    pub fn new(
        task_id: u16,
        image_ids: Vec<u64>,
        text_ids: Vec<u64>,
        positives: impl IntoIterator<Item = (u64, u64)>,
    ) -> Result<Self> {
        let image_set: BTreeSet<u64> = image_ids.iter().copied().collect();
        if image_set.len() != image_ids.len() {
            let id = duplicate_id(&image_ids);
            return Err(Error::DuplicateId {
                what: "similarity image ids",
                id,
            });
        }
        let text_set: BTreeSet<u64> = text_ids.iter().copied().collect();
        if text_set.len() != text_ids.len() {
            let id = duplicate_id(&text_ids);
            return Err(Error::DuplicateId {
                what: "similarity text ids",
                id,
            });
        }
        let mut pos_set = BTreeSet::new();
        let mut pos_texts_of_image: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        let mut pos_images_of_text: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        for (i, j) in positives {
            if !image_set.contains(&i) {
                return Err(Error::InvalidConfig(format!(
                    "positive pair references unknown image id {i}"
                )));
            }
            if !text_set.contains(&j) {
                return Err(Error::InvalidConfig(format!(
                    "positive pair references unknown text id {j}"
                )));
            }
            pos_set.insert((i, j));
            pos_texts_of_image.entry(i).or_default().insert(j);
            pos_images_of_text.entry(j).or_default().insert(i);
        }
        for i in &image_ids {
            if !pos_texts_of_image.contains_key(i) {
                return Err(Error::InvalidConfig(format!(
                    "image id {i} appears in no positive pair"
                )));
            }
        }
        for j in &text_ids {
            if !pos_images_of_text.contains_key(j) {
                return Err(Error::InvalidConfig(format!(
                    "text id {j} appears in no positive pair"
                )));
            }
        }
        Ok(Self {
            task_id,
            image_ids,
            text_ids,
            positives: pos_set,
            pos_texts_of_image,
            pos_images_of_text,
        })
    }

    pub fn task_id(&self) -> u16 {
        self.task_id
    }

    pub fn image_ids(&self) -> &[u64] {
        &self.image_ids
    }

    pub fn text_ids(&self) -> &[u64] {
        &self.text_ids
    }

    pub fn is_positive(&self, image_id: u64, text_id: u64) -> bool {
        self.positives.contains(&(image_id, text_id))
    }

    pub fn positive_pairs(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.positives.iter().copied()
    }

    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }

    pub fn positive_texts_of(&self, image_id: u64) -> Option<&BTreeSet<u64>> {
        self.pos_texts_of_image.get(&image_id)
    }

    pub fn positive_images_of(&self, text_id: u64) -> Option<&BTreeSet<u64>> {
        self.pos_images_of_text.get(&text_id)
    }
}

fn duplicate_id(ids: &[u64]) -> u64 {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(*id) {
            return *id;
        }
    }
    0
}

/// Training direction of a triplet: which modality anchors it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorSide {
    Image,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeKind {
    Itnp,
    Ctnp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub direction: AnchorSide,
    pub anchor_task: u16,
    pub anchor_id: u64,
    pub positive_id: u64,
    pub negative_id: u64,
    pub negative_kind: NegativeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairPolicy {
    ItnpOnly,
    ItnpAndCtnp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mining {
    Random,
    HardestInBatch,
}

/// How many negatives to draw per positive pair and direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeBudget {
    Count(usize),
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub negatives_per_positive: NegativeBudget,
    pub mining: Mining,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.05,
            lambda1: 1.0,
            lambda2: 1.5,
            negatives_per_positive: NegativeBudget::Count(1),
            mining: Mining::Random,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "margin must be > 0, got {}",
                self.margin
            )));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::InvalidConfig(
                "loss direction weights must be >= 0".into(),
            ));
        }
        if let NegativeBudget::Count(0) = self.negatives_per_positive {
            return Err(Error::InvalidConfig(
                "negatives per positive must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One intra-task positive pair, tagged with its task so mixed-task batches
/// (joint training) can restrict negatives per pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositivePair {
    pub task_id: u16,
    pub image_id: u64,
    pub text_id: u64,
}

/// Embeddings keyed by item id, per modality. Ordered maps keep every
/// consumer's iteration deterministic.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingSet {
    images: BTreeMap<u64, Vec<f64>>,
    texts: BTreeMap<u64, Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_image(&mut self, id: u64, embedding: Vec<f64>) {
        self.images.insert(id, embedding);
    }

    pub fn insert_text(&mut self, id: u64, embedding: Vec<f64>) {
        self.texts.insert(id, embedding);
    }

    pub fn image(&self, id: u64) -> Result<&[f64]> {
        self.images
            .get(&id)
            .map(Vec::as_slice)
            .ok_or(Error::MissingEmbedding {
                modality: "image",
                id,
            })
    }

    pub fn text(&self, id: u64) -> Result<&[f64]> {
        self.texts
            .get(&id)
            .map(Vec::as_slice)
            .ok_or(Error::MissingEmbedding {
                modality: "text",
                id,
            })
    }

    pub fn has_image(&self, id: u64) -> bool {
        self.images.contains_key(&id)
    }

    pub fn has_text(&self, id: u64) -> bool {
        self.texts.contains_key(&id)
    }

    pub fn images(&self) -> impl Iterator<Item = (u64, &[f64])> {
        self.images.iter().map(|(id, v)| (*id, v.as_slice()))
    }

    pub fn texts(&self) -> impl Iterator<Item = (u64, &[f64])> {
        self.texts.iter().map(|(id, v)| (*id, v.as_slice()))
    }
}

/// Loss gradients with respect to each referenced embedding. Embeddings that
/// only appear in inactive hinges have no entry (their gradient is zero).
#[derive(Debug, Clone, Default)]
pub struct EmbeddingGrads {
    images: BTreeMap<u64, Vec<f64>>,
    texts: BTreeMap<u64, Vec<f64>>,
}

impl EmbeddingGrads {
    pub fn image_grad(&self, id: u64) -> Option<&[f64]> {
        self.images.get(&id).map(Vec::as_slice)
    }

    pub fn text_grad(&self, id: u64) -> Option<&[f64]> {
        self.texts.get(&id).map(Vec::as_slice)
    }

    pub fn images(&self) -> impl Iterator<Item = (u64, &[f64])> {
        self.images.iter().map(|(id, v)| (*id, v.as_slice()))
    }

    pub fn texts(&self) -> impl Iterator<Item = (u64, &[f64])> {
        self.texts.iter().map(|(id, v)| (*id, v.as_slice()))
    }

    /// Adds a gradient contribution for one item.
    pub fn add(&mut self, side: AnchorSide, id: u64, grad: &[f64]) {
        self.accumulate(side, id, grad, 1.0);
    }

    fn accumulate(&mut self, side: AnchorSide, id: u64, grad: &[f64], scale: f64) {
        let map = match side {
            AnchorSide::Image => &mut self.images,
            AnchorSide::Text => &mut self.texts,
        };
        let entry = map.entry(id).or_insert_with(|| vec![0.0; grad.len()]);
        for (e, g) in entry.iter_mut().zip(grad) {
            *e += scale * g;
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SampleOutcome {
    pub triplets: Vec<Triplet>,
    /// Positive pairs that produced no triplet in either direction.
    pub skipped_pairs: usize,
    pub itnp_count: usize,
    pub ctnp_count: usize,
}

/// Builds triplets for every positive pair in `batch`, in both directions.
///
/// Under `ItnpOnly` negatives come from the anchor pair's own task; under
/// `ItnpAndCtnp` the pool additionally contains every opposite-modality item
/// of the other tasks. Pairs whose pools are empty in both directions are
/// counted in `skipped_pairs`. Hardest-in-batch mining restricts candidates
/// to items present in the batch and needs their embeddings.
pub fn sample_triplets<R: Rng>(
    batch: &[PositivePair],
    sims: &[SimilarityMatrix],
    policy: PairPolicy,
    cfg: &LossConfig,
    embeddings: Option<&EmbeddingSet>,
    rng: &mut R,
) -> Result<SampleOutcome> {
    if batch.is_empty() {
        return Err(Error::EmptyTaskData("triplet batch"));
    }
    cfg.validate()?;
    let by_task: BTreeMap<u16, &SimilarityMatrix> =
        sims.iter().map(|s| (s.task_id(), s)).collect();

    // Batch item sets for hardest-in-batch candidate restriction.
    let (batch_images, batch_texts): (BTreeSet<u64>, BTreeSet<u64>) = batch
        .iter()
        .map(|p| (p.image_id, p.text_id))
        .unzip();

    let mut outcome = SampleOutcome::default();
    for pair in batch {
        let sim = by_task.get(&pair.task_id).ok_or(Error::InvalidConfig(format!(
            "batch pair references unknown task {}",
            pair.task_id
        )))?;
        if !sim.is_positive(pair.image_id, pair.text_id) {
            return Err(Error::InvalidConfig(format!(
                "batch pair ({}, {}) is not a positive in task {}",
                pair.image_id, pair.text_id, pair.task_id
            )));
        }
        let mut emitted = 0usize;
        for side in [AnchorSide::Image, AnchorSide::Text] {
            emitted += sample_for_direction(
                pair, side, sim, &by_task, policy, cfg, embeddings, &batch_images, &batch_texts,
                rng, &mut outcome,
            )?;
        }
        if emitted == 0 {
            outcome.skipped_pairs += 1;
        }
    }
    Ok(outcome)
}

#[allow(clippy::too_many_arguments)]
fn sample_for_direction<R: Rng>(
    pair: &PositivePair,
    side: AnchorSide,
    sim: &SimilarityMatrix,
    by_task: &BTreeMap<u16, &SimilarityMatrix>,
    policy: PairPolicy,
    cfg: &LossConfig,
    embeddings: Option<&EmbeddingSet>,
    batch_images: &BTreeSet<u64>,
    batch_texts: &BTreeSet<u64>,
    rng: &mut R,
    outcome: &mut SampleOutcome,
) -> Result<usize> {
    let (anchor_id, positive_id) = match side {
        AnchorSide::Image => (pair.image_id, pair.text_id),
        AnchorSide::Text => (pair.text_id, pair.image_id),
    };
    let negative_ok = |candidate: u64| match side {
        AnchorSide::Image => !sim.is_positive(pair.image_id, candidate),
        AnchorSide::Text => !sim.is_positive(candidate, pair.text_id),
    };

    // Intra-task pool: opposite-modality items of the anchor's task with s=0.
    let itnp_pool: Vec<u64> = match side {
        AnchorSide::Image => sim.text_ids(),
        AnchorSide::Text => sim.image_ids(),
    }
    .iter()
    .copied()
    .filter(|c| negative_ok(*c))
    .collect();

    // Cross-task pool: every opposite-modality item of the other tasks
    // (positive pairs are intra-task, so these are all negatives).
    let ctnp_pool: Vec<(u16, u64)> = if policy == PairPolicy::ItnpAndCtnp {
        by_task
            .iter()
            .filter(|(t, _)| **t != pair.task_id)
            .flat_map(|(t, s)| {
                let ids = match side {
                    AnchorSide::Image => s.text_ids(),
                    AnchorSide::Text => s.image_ids(),
                };
                ids.iter().map(move |id| (*t, *id))
            })
            .collect()
    } else {
        Vec::new()
    };

    let emit = |negative_id: u64, kind: NegativeKind, outcome: &mut SampleOutcome| {
        outcome.triplets.push(Triplet {
            direction: side,
            anchor_task: pair.task_id,
            anchor_id,
            positive_id,
            negative_id,
            negative_kind: kind,
        });
        match kind {
            NegativeKind::Itnp => outcome.itnp_count += 1,
            NegativeKind::Ctnp => outcome.ctnp_count += 1,
        }
    };

    match cfg.negatives_per_positive {
        NegativeBudget::All => {
            for id in &itnp_pool {
                emit(*id, NegativeKind::Itnp, outcome);
            }
            for (_, id) in &ctnp_pool {
                emit(*id, NegativeKind::Ctnp, outcome);
            }
            Ok(itnp_pool.len() + ctnp_pool.len())
        }
        NegativeBudget::Count(n) => match cfg.mining {
            Mining::Random => {
                let total = itnp_pool.len() + ctnp_pool.len();
                if total == 0 {
                    return Ok(0);
                }
                for _ in 0..n {
                    let idx = rng.gen_range(0..total);
                    if idx < itnp_pool.len() {
                        emit(itnp_pool[idx], NegativeKind::Itnp, outcome);
                    } else {
                        let (_, id) = ctnp_pool[idx - itnp_pool.len()];
                        emit(id, NegativeKind::Ctnp, outcome);
                    }
                }
                Ok(n)
            }
            Mining::HardestInBatch => {
                let emb = embeddings.ok_or(Error::MissingCache)?;
                let anchor = match side {
                    AnchorSide::Image => emb.image(anchor_id)?,
                    AnchorSide::Text => emb.text(anchor_id)?,
                };
                let in_batch = |id: &u64| match side {
                    AnchorSide::Image => batch_texts.contains(id),
                    AnchorSide::Text => batch_images.contains(id),
                };
                let mut scored: Vec<(f64, u64, NegativeKind)> = Vec::new();
                for id in itnp_pool.iter().filter(|id| in_batch(id)) {
                    let cand = match side {
                        AnchorSide::Image => emb.text(*id)?,
                        AnchorSide::Text => emb.image(*id)?,
                    };
                    scored.push((distance(anchor, cand)?, *id, NegativeKind::Itnp));
                }
                for (_, id) in ctnp_pool.iter().filter(|(_, id)| in_batch(id)) {
                    let cand = match side {
                        AnchorSide::Image => emb.text(*id)?,
                        AnchorSide::Text => emb.image(*id)?,
                    };
                    scored.push((distance(anchor, cand)?, *id, NegativeKind::Ctnp));
                }
                scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let take = scored.len().min(n);
                for (_, id, kind) in scored.into_iter().take(take) {
                    emit(id, kind, outcome);
                }
                Ok(take)
            }
        },
    }
}

/// Loss value, per-embedding gradients, and the number of active hinges.
#[derive(Debug, Clone)]
pub struct RankingLossOutput {
    pub loss: f64,
    pub grads: EmbeddingGrads,
    pub active_hinges: usize,
}

/// Bi-directional margin ranking loss:
/// lambda1 * sum [d(a,p) + m - d(a,n)]_+ over image-anchored triplets plus
/// lambda2 * the same over text-anchored triplets. Inactive hinges contribute
/// nothing and have zero gradient.
pub fn ranking_loss(
    triplets: &[Triplet],
    embeddings: &EmbeddingSet,
    cfg: &LossConfig,
) -> Result<RankingLossOutput> {
    cfg.validate()?;
    let mut loss = 0.0;
    let mut grads = EmbeddingGrads::default();
    let mut active = 0usize;
    for t in triplets {
        let (anchor, positive, negative, weight, anchor_side, other_side) = match t.direction {
            AnchorSide::Image => (
                embeddings.image(t.anchor_id)?,
                embeddings.text(t.positive_id)?,
                embeddings.text(t.negative_id)?,
                cfg.lambda1,
                AnchorSide::Image,
                AnchorSide::Text,
            ),
            AnchorSide::Text => (
                embeddings.text(t.anchor_id)?,
                embeddings.image(t.positive_id)?,
                embeddings.image(t.negative_id)?,
                cfg.lambda2,
                AnchorSide::Text,
                AnchorSide::Image,
            ),
        };
        let d_ap = distance(anchor, positive)?;
        let d_an = distance(anchor, negative)?;
        let hinge = d_ap + cfg.margin - d_an;
        if hinge <= 0.0 || weight == 0.0 {
            continue;
        }
        active += 1;
        loss += weight * hinge;
        let dp = d_ap.max(BACKWARD_NORM_EPS);
        let dn = d_an.max(BACKWARD_NORM_EPS);
        let dim = anchor.len();
        let mut ga = vec![0.0; dim];
        let mut gp = vec![0.0; dim];
        let mut gn = vec![0.0; dim];
        for k in 0..dim {
            let ap = (anchor[k] - positive[k]) / dp;
            let an = (anchor[k] - negative[k]) / dn;
            ga[k] = ap - an;
            gp[k] = -ap;
            gn[k] = an;
        }
        grads.accumulate(anchor_side, t.anchor_id, &ga, weight);
        grads.accumulate(other_side, t.positive_id, &gp, weight);
        grads.accumulate(other_side, t.negative_id, &gn, weight);
    }
    Ok(RankingLossOutput {
        loss,
        grads,
        active_hinges: active,
    })
}

/// Item ids referenced by a triplet list, split by modality.
pub fn referenced_items(triplets: &[Triplet]) -> (BTreeSet<u64>, BTreeSet<u64>) {
    let mut images = BTreeSet::new();
    let mut texts = BTreeSet::new();
    for t in triplets {
        match t.direction {
            AnchorSide::Image => {
                images.insert(t.anchor_id);
                texts.insert(t.positive_id);
                texts.insert(t.negative_id);
            }
            AnchorSide::Text => {
                texts.insert(t.anchor_id);
                images.insert(t.positive_id);
                images.insert(t.negative_id);
            }
        }
    }
    (images, texts)
}

/// Embeds the listed ids with caches kept for backprop. Ids are processed in
/// ascending order, so train-mode dropout draws are reproducible.
pub fn embed_ids_cached<R: Rng>(
    model: &crate::model::TwoBranchModel,
    modality: crate::model::Modality,
    features: &BTreeMap<u64, Vec<f64>>,
    ids: &BTreeSet<u64>,
    mode: crate::linalg::Mode,
    dropout_keep: f64,
    rng: &mut R,
) -> Result<BTreeMap<u64, (Vec<f64>, crate::model::BranchCache)>> {
    let mut out = BTreeMap::new();
    for &id in ids {
        let input = features.get(&id).ok_or(Error::MissingFeature {
            modality: modality.name(),
            id,
        })?;
        let pair = model.forward_cached(modality, input, mode, dropout_keep, rng)?;
        out.insert(id, pair);
    }
    Ok(out)
}

/// Backprops embedding gradients through their cached forwards, adding the
/// resulting parameter gradients into `out_flat` (canonical flat layout).
pub fn scatter_grads_to_params(
    model: &crate::model::TwoBranchModel,
    layout: &crate::model::ParamLayout,
    image_caches: &BTreeMap<u64, (Vec<f64>, crate::model::BranchCache)>,
    text_caches: &BTreeMap<u64, (Vec<f64>, crate::model::BranchCache)>,
    grads: &EmbeddingGrads,
    out_flat: &mut [f64],
) -> Result<()> {
    use crate::model::Modality;
    for (id, g) in grads.images() {
        let (_, cache) = image_caches.get(&id).ok_or(Error::MissingCache)?;
        let branch = model.backward(cache, g)?;
        layout.accumulate_branch(out_flat, Modality::Image, &branch);
    }
    for (id, g) in grads.texts() {
        let (_, cache) = text_caches.get(&id).ok_or(Error::MissingCache)?;
        let branch = model.backward(cache, g)?;
        layout.accumulate_branch(out_flat, Modality::Text, &branch);
    }
    Ok(())
}

/// One violated ranking constraint: d(anchor, positive) + m > d(anchor, negative).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub direction: AnchorSide,
    pub anchor_id: u64,
    pub positive_id: u64,
    pub negative_id: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ViolationReport {
    pub violations: Vec<Violation>,
}

impl ViolationReport {
    pub fn count(&self) -> usize {
        self.violations.len()
    }
}

/// Enumerates every intra-task triplet constraint in both directions and
/// reports the violated ones. Embeddings must come from eval-mode passes.
pub fn anchored_constraint_check(
    sim: &SimilarityMatrix,
    embeddings: &EmbeddingSet,
    margin: f64,
) -> Result<ViolationReport> {
    let mut report = ViolationReport::default();
    for &i in sim.image_ids() {
        let Some(positives) = sim.positive_texts_of(i) else {
            continue;
        };
        let u = embeddings.image(i)?;
        for &j in positives {
            let d_pos = distance(u, embeddings.text(j)?)?;
            for &k in sim.text_ids() {
                if sim.is_positive(i, k) {
                    continue;
                }
                let d_neg = distance(u, embeddings.text(k)?)?;
                if d_pos + margin > d_neg {
                    report.violations.push(Violation {
                        direction: AnchorSide::Image,
                        anchor_id: i,
                        positive_id: j,
                        negative_id: k,
                    });
                }
            }
        }
    }
    for &j in sim.text_ids() {
        let Some(positives) = sim.positive_images_of(j) else {
            continue;
        };
        let v = embeddings.text(j)?;
        for &i in positives {
            let d_pos = distance(v, embeddings.image(i)?)?;
            for &k in sim.image_ids() {
                if sim.is_positive(k, j) {
                    continue;
                }
                let d_neg = distance(v, embeddings.image(k)?)?;
                if d_pos + margin > d_neg {
                    report.violations.push(Violation {
                        direction: AnchorSide::Text,
                        anchor_id: j,
                        positive_id: i,
                        negative_id: k,
                    });
                }
            }
        }
    }
    Ok(report)
}
