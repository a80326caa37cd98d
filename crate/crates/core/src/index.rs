//! Versioned embedding store with reindex / no-reindex policies, exact
//! nearest-neighbor querying in both directions under known/unknown task
//! scoping, Recall@K, and the forgetting diagnostics (drift, misalignment,
//! cross-task overlap).
//!
//! The store is an exact index: querying is a brute-force scan over
//! scope-eligible entries, which doubles as its own correctness oracle. Ties
//! are broken by ascending item id for cross-run determinism.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::byteio::{
    expect_eof, read_f32_vec, read_magic, read_u16, read_u32, read_u64, read_u8, write_f32_slice,
    write_u16, write_u32, write_u64,
};
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::loss::SimilarityMatrix;
use crate::model::{distance, Modality, ModelSnapshot, TwoBranchModel};

pub const INDEX_MAGIC: [u8; 4] = *b"XMIX";
pub const INDEX_VERSION: u16 = 1;

const POLICY_REINDEX: u8 = 0;
const POLICY_NO_REINDEX: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndexPolicy {
    /// Every index_task call re-embeds all prior entries with the latest
    /// model; all live entries share the latest extractor version.
    Reindex,
    /// Entries are written once with the model of their own task and never
    /// touched again.
    NoReindex,
}

impl IndexPolicy {
    pub fn name(self) -> &'static str {
        match self {
            IndexPolicy::Reindex => "reindex",
            IndexPolicy::NoReindex => "no-reindex",
        }
    }

    fn code(self) -> u8 {
        match self {
            IndexPolicy::Reindex => POLICY_REINDEX,
            IndexPolicy::NoReindex => POLICY_NO_REINDEX,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            POLICY_REINDEX => Ok(IndexPolicy::Reindex),
            POLICY_NO_REINDEX => Ok(IndexPolicy::NoReindex),
            other => Err(Error::InvalidField {
                field: "index policy",
                value: other as u64,
            }),
        }
    }
}

/// One stored embedding. The vector is unit-norm f32; `extractor_version` is
/// the task index of the model that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedEmbedding {
    pub item_id: u64,
    pub task_id: u16,
    pub modality: Modality,
    pub extractor_version: u16,
    pub vector: Vec<f32>,
}

impl IndexedEmbedding {
    pub fn new(
        item_id: u64,
        task_id: u16,
        modality: Modality,
        extractor_version: u16,
        vector: Vec<f32>,
    ) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::InvalidField {
                field: "embedding length",
                value: 0,
            });
        }
        let mut norm_sq = 0.0f64;
        for v in &vector {
            if !v.is_finite() {
                return Err(Error::NonFiniteRow {
                    row: item_id as usize,
                });
            }
            norm_sq += (*v as f64) * (*v as f64);
        }
        let norm = norm_sq.sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "indexed embedding for item {item_id} has norm {norm}, expected 1"
            )));
        }
        Ok(Self {
            item_id,
            task_id,
            modality,
            extractor_version,
            vector,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryDirection {
    Im2Txt,
    Txt2Im,
}

impl QueryDirection {
    pub fn name(self) -> &'static str {
        match self {
            QueryDirection::Im2Txt => "im2txt",
            QueryDirection::Txt2Im => "txt2im",
        }
    }

    /// Modality of the database side.
    pub fn target(self) -> Modality {
        match self {
            QueryDirection::Im2Txt => Modality::Text,
            QueryDirection::Txt2Im => Modality::Image,
        }
    }

    /// Modality of the query side.
    pub fn source(self) -> Modality {
        match self {
            QueryDirection::Im2Txt => Modality::Image,
            QueryDirection::Txt2Im => Modality::Text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryScope {
    /// The querying user knows which task the item belongs to; candidates
    /// are restricted to that task's entries.
    KnownTask(u16),
    /// Candidates span every indexed task.
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub query_id: u64,
    pub direction: QueryDirection,
    pub scope: QueryScope,
    /// (item id, distance), distance non-decreasing, ties by ascending id.
    pub ranking: Vec<(u64, f64)>,
}

/// Exact embedding index. Mutation happens only through `index_task`, which
/// prepares the full update before touching the live maps, so a failed call
/// leaves the store exactly as it was.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexStore {
    policy: IndexPolicy,
    generation: u16,
    entries: BTreeMap<(Modality, u64), IndexedEmbedding>,
    /// Raw source features, kept only under the reindex policy so later
    /// tasks can re-embed earlier entries.
    archive: BTreeMap<(Modality, u64), Vec<f64>>,
    indexed_tasks: BTreeSet<u16>,
}

impl IndexStore {
    pub fn new(policy: IndexPolicy) -> Self {
        Self {
            policy,
            generation: 0,
            entries: BTreeMap::new(),
            archive: BTreeMap::new(),
            indexed_tasks: BTreeSet::new(),
        }
    }

    pub fn policy(&self) -> IndexPolicy {
        self.policy
    }

    pub fn generation(&self) -> u16 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indexed_tasks(&self) -> &BTreeSet<u16> {
        &self.indexed_tasks
    }

    pub fn entry(&self, modality: Modality, item_id: u64) -> Option<&IndexedEmbedding> {
        self.entries.get(&(modality, item_id))
    }

    pub fn entries(&self) -> impl Iterator<Item = &IndexedEmbedding> {
        self.entries.values()
    }

    /// Indexes one task's training items with the given (current) model.
    ///
    /// Under no-reindex the new entries carry the task's own id as extractor
    /// version and prior entries are untouched. Under reindex, every prior
    /// entry is additionally re-embedded from its archived features with
    /// this model, so all live entries share the latest version.
    pub fn index_task(&mut self, model: &TwoBranchModel, task: &TaskData) -> Result<()> {
        if self.indexed_tasks.contains(&task.task_id) {
            return Err(Error::TaskAlreadyIndexed(task.task_id));
        }
        if self.policy == IndexPolicy::Reindex && task.task_id <= self.generation {
            return Err(Error::InvalidConfig(format!(
                "tasks must be indexed in increasing order under reindex: got {} after {}",
                task.task_id, self.generation
            )));
        }
        let version = task.task_id;

        // Build the complete update first; commit only if everything passed.
        let mut new_entries: Vec<IndexedEmbedding> = Vec::new();
        let mut new_archive: Vec<((Modality, u64), Vec<f64>)> = Vec::new();
        for &id in &task.train_ids {
            for modality in [Modality::Image, Modality::Text] {
                let features = match modality {
                    Modality::Image => &task.image_features,
                    Modality::Text => &task.text_features,
                };
                let x = features.get(&id).ok_or(Error::MissingFeature {
                    modality: modality.name(),
                    id,
                })?;
                if self.entries.contains_key(&(modality, id)) {
                    return Err(Error::PolicyViolation {
                        modality: modality.name(),
                        item_id: id,
                    });
                }
                let emb = embed_f32(model, modality, x)?;
                new_entries.push(IndexedEmbedding::new(
                    id,
                    task.task_id,
                    modality,
                    version,
                    emb,
                )?);
                if self.policy == IndexPolicy::Reindex {
                    new_archive.push(((modality, id), x.clone()));
                }
            }
        }

        let mut refreshed: Vec<IndexedEmbedding> = Vec::new();
        if self.policy == IndexPolicy::Reindex {
            for entry in self.entries.values() {
                let key = (entry.modality, entry.item_id);
                let x = self.archive.get(&key).ok_or(Error::MissingFeature {
                    modality: entry.modality.name(),
                    id: entry.item_id,
                })?;
                let emb = embed_f32(model, entry.modality, x)?;
                refreshed.push(IndexedEmbedding::new(
                    entry.item_id,
                    entry.task_id,
                    entry.modality,
                    version,
                    emb,
                )?);
            }
        }

        for entry in refreshed {
            self.entries.insert((entry.modality, entry.item_id), entry);
        }
        for entry in new_entries {
            self.entries.insert((entry.modality, entry.item_id), entry);
        }
        self.archive.extend(new_archive);
        self.indexed_tasks.insert(task.task_id);
        self.generation = version;
        Ok(())
    }

    /// Embeds the raw feature vector with the current model and ranks the
    /// scope-eligible opposite-modality entries by ascending Euclidean
    /// distance, top `k`, ties by ascending item id. Returns the full scope
    /// when it holds fewer than `k` entries.
    pub fn query(
        &self,
        model: &TwoBranchModel,
        query_id: u64,
        q: &[f64],
        direction: QueryDirection,
        scope: QueryScope,
        k: usize,
    ) -> Result<QueryResult> {
        if k == 0 {
            return Err(Error::InvalidK(0));
        }
        let target = direction.target();
        let emb = embed_f32(model, direction.source(), q)?;
        let qv: Vec<f64> = emb.iter().map(|v| *v as f64).collect();

        let mut scored: Vec<(f64, u64)> = Vec::new();
        for entry in self.entries.values() {
            if entry.modality != target {
                continue;
            }
            if let QueryScope::KnownTask(t) = scope {
                if entry.task_id != t {
                    continue;
                }
            }
            let ev: Vec<f64> = entry.vector.iter().map(|v| *v as f64).collect();
            scored.push((distance(&qv, &ev)?, entry.item_id));
        }
        if scored.is_empty() {
            return Err(Error::EmptyScope);
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.truncate(k);
        Ok(QueryResult {
            query_id,
            direction,
            scope,
            ranking: scored.into_iter().map(|(d, id)| (id, d)).collect(),
        })
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&INDEX_MAGIC)?;
        write_u16(w, INDEX_VERSION)?;
        w.write_all(&[self.policy.code()])?;
        let dim = self.entries.values().next().map_or(0, |e| e.vector.len());
        write_u32(w, dim as u32)?;
        write_u64(w, self.entries.len() as u64)?;
        for entry in self.entries.values() {
            if entry.vector.len() != dim {
                return Err(Error::ShapeMismatch {
                    what: "index entry vector",
                    expected: dim,
                    actual: entry.vector.len(),
                });
            }
            write_u64(w, entry.item_id)?;
            write_u16(w, entry.task_id)?;
            w.write_all(&[match entry.modality {
                Modality::Image => 0u8,
                Modality::Text => 1u8,
            }])?;
            write_u16(w, entry.extractor_version)?;
            write_f32_slice(w, &entry.vector)?;
        }
        Ok(())
    }

    /// Reads an index file. The feature archive is not part of the format,
    /// so a loaded reindex-policy store cannot re-embed prior tasks until
    /// their features are indexed again from source data.
    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        read_magic(r, INDEX_MAGIC)?;
        let version = read_u16(r, "index format version")?;
        if version != INDEX_VERSION {
            return Err(Error::BadVersion(version));
        }
        let policy = IndexPolicy::from_code(read_u8(r, "index policy")?)?;
        let dim = read_u32(r, "embedding dim")? as usize;
        let count = read_u64(r, "entry count")? as usize;
        let mut entries = BTreeMap::new();
        let mut indexed_tasks = BTreeSet::new();
        let mut generation = 0u16;
        for _ in 0..count {
            let item_id = read_u64(r, "entry item id")?;
            let task_id = read_u16(r, "entry task id")?;
            let modality = match read_u8(r, "entry modality")? {
                0 => Modality::Image,
                1 => Modality::Text,
                other => {
                    return Err(Error::InvalidField {
                        field: "entry modality",
                        value: other as u64,
                    })
                }
            };
            let extractor_version = read_u16(r, "entry extractor version")?;
            let vector = read_f32_vec(r, dim, "entry vector")?;
            let entry =
                IndexedEmbedding::new(item_id, task_id, modality, extractor_version, vector)?;
            if entries.insert((modality, item_id), entry).is_some() {
                return Err(Error::DuplicateId {
                    what: "index entries",
                    id: item_id,
                });
            }
            indexed_tasks.insert(task_id);
            generation = generation.max(extractor_version);
        }
        expect_eof(r, "index file")?;
        Ok(Self {
            policy,
            generation,
            entries,
            archive: BTreeMap::new(),
            indexed_tasks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read(&mut r)
    }
}

fn embed_f32(model: &TwoBranchModel, modality: Modality, x: &[f64]) -> Result<Vec<f32>> {
    let emb = match modality {
        Modality::Image => model.embed_image(x)?,
        Modality::Text => model.embed_text(x)?,
    };
    Ok(emb.iter().map(|v| *v as f32).collect())
}

/// Recall@K over a batch of query results: the fraction of evaluable queries
/// whose top-K contains at least one positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall: f64,
    pub hits: usize,
    pub included: usize,
    /// Query ids excluded because ground truth lists no positive for them.
    pub excluded: Vec<u64>,
}

pub fn recall_at_k(
    results: &[QueryResult],
    ground_truth: &[SimilarityMatrix],
    k: usize,
) -> Result<RecallReport> {
    if k == 0 {
        return Err(Error::InvalidK(0));
    }
    let mut hits = 0usize;
    let mut included = 0usize;
    let mut excluded = Vec::new();
    for result in results {
        let mut positives: BTreeSet<u64> = BTreeSet::new();
        for sim in ground_truth {
            let set = match result.direction {
                QueryDirection::Im2Txt => sim.positive_texts_of(result.query_id),
                QueryDirection::Txt2Im => sim.positive_images_of(result.query_id),
            };
            if let Some(set) = set {
                positives.extend(set);
            }
        }
        if positives.is_empty() {
            excluded.push(result.query_id);
            continue;
        }
        included += 1;
        if result
            .ranking
            .iter()
            .take(k)
            .any(|(id, _)| positives.contains(id))
        {
            hits += 1;
        }
    }
    let recall = if included == 0 {
        0.0
    } else {
        hits as f64 / included as f64
    };
    Ok(RecallReport {
        recall,
        hits,
        included,
        excluded,
    })
}

/// Per-task forgetting diagnostics, comparing each task's contemporaneous
/// model against the current one over that task's indexed items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDrift {
    pub task_id: u16,
    /// Mean embedding displacement of this task's indexed images/texts
    /// between its own model and the current model.
    pub image_drift: f64,
    pub text_drift: f64,
    /// Mean positive-pair distance under the task's own model and under the
    /// current model; their gap is the cross-modal misalignment.
    pub pair_distance_then: f64,
    pub pair_distance_now: f64,
    /// Fraction of this task's items whose nearest same-modality neighbor
    /// from another task (under the current model) is strictly closer than
    /// the nearest within-task non-self neighbor.
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub current_task: u32,
    pub rows: Vec<TaskDrift>,
}

pub fn diagnose_drift(
    snapshots: &[ModelSnapshot],
    tasks: &[TaskData],
    store: &IndexStore,
) -> Result<DriftReport> {
    if snapshots.len() < 2 {
        return Err(Error::InvalidConfig(
            "drift diagnostics need at least two model snapshots".into(),
        ));
    }
    let current_snapshot = snapshots.last().unwrap();
    let current = TwoBranchModel::restore(current_snapshot)?;
    let task_data: BTreeMap<u16, &TaskData> = tasks.iter().map(|t| (t.task_id, t)).collect();

    // Current-model embeddings of every indexed item, for the overlap metric.
    let mut current_embeddings: BTreeMap<(Modality, u64), (u16, Vec<f64>)> = BTreeMap::new();
    for entry in store.entries() {
        let task = task_data.get(&entry.task_id).ok_or(Error::InvalidConfig(format!(
            "no task data for indexed task {}",
            entry.task_id
        )))?;
        let features = match entry.modality {
            Modality::Image => &task.image_features,
            Modality::Text => &task.text_features,
        };
        let x = features.get(&entry.item_id).ok_or(Error::MissingFeature {
            modality: entry.modality.name(),
            id: entry.item_id,
        })?;
        let emb = match entry.modality {
            Modality::Image => current.embed_image(x)?,
            Modality::Text => current.embed_text(x)?,
        };
        current_embeddings.insert((entry.modality, entry.item_id), (entry.task_id, emb));
    }

    let mut rows = Vec::new();
    for snapshot in snapshots {
        let task_id = snapshot.task_index as u16;
        if !store.indexed_tasks().contains(&task_id) {
            continue;
        }
        let task = match task_data.get(&task_id) {
            Some(t) => t,
            None => continue,
        };
        let then = TwoBranchModel::restore(snapshot)?;

        let drift = |modality: Modality| -> Result<f64> {
            let features = match modality {
                Modality::Image => &task.image_features,
                Modality::Text => &task.text_features,
            };
            let mut sum = 0.0;
            let mut n = 0usize;
            for entry in store.entries() {
                if entry.task_id != task_id || entry.modality != modality {
                    continue;
                }
                let x = features.get(&entry.item_id).ok_or(Error::MissingFeature {
                    modality: modality.name(),
                    id: entry.item_id,
                })?;
                let (now_emb, then_emb) = match modality {
                    Modality::Image => (current.embed_image(x)?, then.embed_image(x)?),
                    Modality::Text => (current.embed_text(x)?, then.embed_text(x)?),
                };
                sum += distance(&now_emb, &then_emb)?;
                n += 1;
            }
            Ok(if n == 0 { 0.0 } else { sum / n as f64 })
        };
        let image_drift = drift(Modality::Image)?;
        let text_drift = drift(Modality::Text)?;

        // positive-pair alignment: the task's 1:1 pairs among indexed items
        let mut then_sum = 0.0;
        let mut now_sum = 0.0;
        let mut pairs = 0usize;
        for pair in task.train_pairs() {
            let (Some(x), Some(y)) = (
                task.image_features.get(&pair.image_id),
                task.text_features.get(&pair.text_id),
            ) else {
                continue;
            };
            then_sum += distance(&then.embed_image(x)?, &then.embed_text(y)?)?;
            now_sum += distance(&current.embed_image(x)?, &current.embed_text(y)?)?;
            pairs += 1;
        }
        let (pair_distance_then, pair_distance_now) = if pairs == 0 {
            (0.0, 0.0)
        } else {
            (then_sum / pairs as f64, now_sum / pairs as f64)
        };

        // overlap under the current model
        let mut overlapping = 0usize;
        let mut counted = 0usize;
        for ((modality, id), (t, emb)) in &current_embeddings {
            if *t != task_id {
                continue;
            }
            let mut nearest_within = f64::INFINITY;
            let mut nearest_cross = f64::INFINITY;
            for ((m2, id2), (t2, emb2)) in &current_embeddings {
                if m2 != modality || (*m2 == *modality && id2 == id) {
                    continue;
                }
                let d = distance(emb, emb2)?;
                if t2 == t {
                    nearest_within = nearest_within.min(d);
                } else {
                    nearest_cross = nearest_cross.min(d);
                }
            }
            if nearest_within.is_finite() || nearest_cross.is_finite() {
                counted += 1;
                if nearest_cross < nearest_within {
                    overlapping += 1;
                }
            }
        }
        let overlap = if counted == 0 {
            0.0
        } else {
            overlapping as f64 / counted as f64
        };

        rows.push(TaskDrift {
            task_id,
            image_drift,
            text_drift,
            pair_distance_then,
            pair_distance_now,
            overlap,
        });
    }
    Ok(DriftReport {
        current_task: current_snapshot.task_index,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, SyntheticSpec};
    use crate::model::{ModelConfig, SharingMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            image_dim: 10,
            text_dim: 12,
            latent_dim: 4,
            num_tasks: 2,
            categories_per_task: 2,
            pairs_per_category: 10,
            noise_std: 0.1,
            separation: 1.0,
            seed: 3,
        }
    }

    fn model(seed: u64) -> TwoBranchModel {
        // Hidden wide enough that no item zeroes out every ReLU while the
        // freshly initialized biases are still exactly zero.
        let cfg = ModelConfig::new(10, 12, 32, 4, SharingMode::NoSharing);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        TwoBranchModel::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn first_task_is_policy_independent() {
        let data = Dataset::generate(&spec()).unwrap();
        let m = model(1);
        let mut a = IndexStore::new(IndexPolicy::Reindex);
        let mut b = IndexStore::new(IndexPolicy::NoReindex);
        a.index_task(&m, &data.tasks[0]).unwrap();
        b.index_task(&m, &data.tasks[0]).unwrap();
        let ea: Vec<_> = a.entries().collect();
        let eb: Vec<_> = b.entries().collect();
        assert_eq!(ea, eb);
    }

    #[test]
    fn no_reindex_leaves_prior_entries_untouched() {
        let data = Dataset::generate(&spec()).unwrap();
        let m1 = model(1);
        let m2 = model(2); // a very different model for task 2
        let mut store = IndexStore::new(IndexPolicy::NoReindex);
        store.index_task(&m1, &data.tasks[0]).unwrap();
        let before: Vec<IndexedEmbedding> = store.entries().cloned().collect();
        store.index_task(&m2, &data.tasks[1]).unwrap();
        for entry in before {
            let live = store.entry(entry.modality, entry.item_id).unwrap();
            assert_eq!(*live, entry);
            assert_eq!(live.extractor_version, live.task_id);
        }
    }

    #[test]
    fn reindex_recomputes_every_entry_with_latest_model() {
        let data = Dataset::generate(&spec()).unwrap();
        let m1 = model(1);
        let m2 = model(2);
        let mut store = IndexStore::new(IndexPolicy::Reindex);
        store.index_task(&m1, &data.tasks[0]).unwrap();
        store.index_task(&m2, &data.tasks[1]).unwrap();
        for task in &data.tasks {
            for &id in &task.train_ids {
                for modality in [Modality::Image, Modality::Text] {
                    let features = match modality {
                        Modality::Image => &task.image_features,
                        Modality::Text => &task.text_features,
                    };
                    let expected = embed_f32(&m2, modality, &features[&id]).unwrap();
                    let live = store.entry(modality, id).unwrap();
                    assert_eq!(live.vector, expected);
                    assert_eq!(live.extractor_version, 2);
                    assert_eq!(live.task_id, task.task_id);
                }
            }
        }
    }

    #[test]
    fn double_indexing_is_rejected() {
        let data = Dataset::generate(&spec()).unwrap();
        let m = model(1);
        let mut store = IndexStore::new(IndexPolicy::NoReindex);
        store.index_task(&m, &data.tasks[0]).unwrap();
        assert!(matches!(
            store.index_task(&m, &data.tasks[0]),
            Err(Error::TaskAlreadyIndexed(1))
        ));
    }

    #[test]
    fn colliding_item_is_a_policy_violation() {
        let data = Dataset::generate(&spec()).unwrap();
        let m = model(1);
        let mut store = IndexStore::new(IndexPolicy::NoReindex);
        store.index_task(&m, &data.tasks[0]).unwrap();
        // forge a task that reuses an already-live id
        let mut clash = data.tasks[1].clone();
        let stolen = data.tasks[0].train_ids[0];
        clash.train_ids[0] = stolen;
        clash
            .image_features
            .insert(stolen, data.tasks[0].image_features[&stolen].clone());
        clash
            .text_features
            .insert(stolen, data.tasks[0].text_features[&stolen].clone());
        clash.category_of.insert(stolen, 0);
        let err = store.index_task(&m, &clash);
        assert!(matches!(err, Err(Error::PolicyViolation { .. })));
    }

    #[test]
    fn query_finds_exact_match_at_rank_one() {
        // one text entry whose vector equals the query's own embedding
        let data = Dataset::generate(&spec()).unwrap();
        let task = &data.tasks[0];
        let m = model(1);
        let probe = task.train_ids[0];
        let qx = &task.image_features[&probe];
        let mut store = IndexStore::new(IndexPolicy::NoReindex);
        let entry = IndexedEmbedding::new(
            42,
            1,
            Modality::Text,
            1,
            embed_f32(&m, Modality::Image, qx).unwrap(),
        )
        .unwrap();
        store.entries.insert((Modality::Text, 42), entry);
        store.indexed_tasks.insert(1);
        store.generation = 1;
        let qr = store
            .query(&m, probe, qx, QueryDirection::Im2Txt, QueryScope::Unknown, 1)
            .unwrap();
        assert_eq!(qr.ranking, vec![(42, 0.0)]);

        // features of the wrong dimensionality are rejected
        let err = store
            .query(
                &m,
                probe,
                &task.text_features[&probe],
                QueryDirection::Im2Txt,
                QueryScope::Unknown,
                1,
            )
            .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn query_matches_brute_force_oracle() {
        // 50 random unit entries, seed 13; compare against a full sort.
        let m = model(4);
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let mut store = IndexStore::new(IndexPolicy::NoReindex);
        let embed_dim = 4;
        for id in 0..50u64 {
            let v: Vec<f64> = (0..embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let unit = crate::linalg::l2_normalize(&v).unwrap();
            let vector: Vec<f32> = unit.iter().map(|x| *x as f32).collect();
            let task_id = if id < 25 { 1 } else { 2 };
            let entry =
                IndexedEmbedding::new(id, task_id, Modality::Text, task_id, vector).unwrap();
            store.entries.insert((Modality::Text, id), entry);
            store.indexed_tasks.insert(task_id);
        }
        store.generation = 2;

        let data = Dataset::generate(&SyntheticSpec { image_dim: 10, ..spec() }).unwrap();
        let qx = &data.tasks[0].image_features[&data.tasks[0].train_ids[0]];
        for (scope, expected_pool) in [
            (QueryScope::Unknown, 50usize),
            (QueryScope::KnownTask(1), 25),
            (QueryScope::KnownTask(2), 25),
        ] {
            let k = 7;
            let qr = store
                .query(&m, 0, qx, QueryDirection::Im2Txt, scope, k)
                .unwrap();
            // oracle: embed, full sort with the same tie rule
            let qe = m.embed_image(qx).unwrap();
            let qv: Vec<f64> = qe.iter().map(|v| *v as f32 as f64).collect();
            let mut all: Vec<(f64, u64)> = store
                .entries()
                .filter(|e| e.modality == Modality::Text)
                .filter(|e| match scope {
                    QueryScope::KnownTask(t) => e.task_id == t,
                    QueryScope::Unknown => true,
                })
                .map(|e| {
                    let ev: Vec<f64> = e.vector.iter().map(|v| *v as f64).collect();
                    (distance(&qv, &ev).unwrap(), e.item_id)
                })
                .collect();
            assert_eq!(all.len(), expected_pool);
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expected: Vec<(u64, f64)> = all.into_iter().take(k).map(|(d, id)| (id, d)).collect();
            assert_eq!(qr.ranking, expected);
        }
    }

    #[test]
    fn query_ties_break_by_ascending_id() {
        let m = model(5);
        let mut store = IndexStore::new(IndexPolicy::NoReindex);
        let v = vec![1.0f32, 0.0, 0.0, 0.0];
        for id in [9u64, 3, 7] {
            let entry = IndexedEmbedding::new(id, 1, Modality::Text, 1, v.clone()).unwrap();
            store.entries.insert((Modality::Text, id), entry);
        }
        store.indexed_tasks.insert(1);
        store.generation = 1;
        let data = Dataset::generate(&spec()).unwrap();
        let qx = &data.tasks[0].image_features[&data.tasks[0].train_ids[0]];
        let qr = store
            .query(&m, 0, qx, QueryDirection::Im2Txt, QueryScope::Unknown, 3)
            .unwrap();
        let ids: Vec<u64> = qr.ranking.iter().map(|(id, _)| *id).collect();
        assert_eq!(ids, vec![3, 7, 9]);
    }

    #[test]
    fn oversized_k_returns_full_scope_and_empty_scope_errors() {
        let data = Dataset::generate(&spec()).unwrap();
        let m = model(1);
        let mut store = IndexStore::new(IndexPolicy::NoReindex);
        store.index_task(&m, &data.tasks[0]).unwrap();
        let task = &data.tasks[0];
        let qx = &task.image_features[&task.train_ids[0]];
        let qr = store
            .query(&m, 0, qx, QueryDirection::Im2Txt, QueryScope::Unknown, 10_000)
            .unwrap();
        assert_eq!(qr.ranking.len(), task.train_ids.len());

        assert!(matches!(
            store.query(&m, 0, qx, QueryDirection::Im2Txt, QueryScope::KnownTask(42), 5),
            Err(Error::EmptyScope)
        ));
        assert!(matches!(
            store.query(&m, 0, qx, QueryDirection::Im2Txt, QueryScope::Unknown, 0),
            Err(Error::InvalidK(0))
        ));
    }

    #[test]
    fn recall_hand_cases() {
        let sim = SimilarityMatrix::new(1, vec![1, 2], vec![11, 12], [(1, 11), (2, 12)]).unwrap();
        let hit = QueryResult {
            query_id: 1,
            direction: QueryDirection::Im2Txt,
            scope: QueryScope::Unknown,
            ranking: vec![(11, 0.1), (12, 0.2)],
        };
        let miss = QueryResult {
            query_id: 2,
            direction: QueryDirection::Im2Txt,
            scope: QueryScope::Unknown,
            ranking: vec![(11, 0.1), (12, 0.2)],
        };
        // query 2's positive is 12, at rank 2
        let r1 = recall_at_k(&[hit.clone(), miss.clone()], std::slice::from_ref(&sim), 1).unwrap();
        assert_eq!(r1.recall, 0.5);
        let r2 = recall_at_k(&[hit.clone(), miss.clone()], std::slice::from_ref(&sim), 2).unwrap();
        assert_eq!(r2.recall, 1.0);
        assert!(r2.recall >= r1.recall); // non-decreasing in K

        // unknown query id: excluded with counter
        let stranger = QueryResult {
            query_id: 99,
            direction: QueryDirection::Im2Txt,
            scope: QueryScope::Unknown,
            ranking: vec![(11, 0.1)],
        };
        let r3 = recall_at_k(&[hit, miss, stranger], std::slice::from_ref(&sim), 2).unwrap();
        assert_eq!(r3.included, 2);
        assert_eq!(r3.excluded, vec![99]);
    }

    #[test]
    fn recall_matches_hand_computed_fraction() {
        // 20 queries against a brute-force store; oracle computed manually
        let data = Dataset::generate(&SyntheticSpec { num_tasks: 1, ..spec() }).unwrap();
        let task = &data.tasks[0];
        let m = model(6);
        let mut store = IndexStore::new(IndexPolicy::NoReindex);
        store.index_task(&m, task).unwrap();
        let sim = task.eval_sim().unwrap();
        let k = 5;
        let mut results = Vec::new();
        let mut expected_hits = 0usize;
        let queries: Vec<u64> = task.train_ids.iter().copied().take(20).collect();
        for &q in &queries {
            let qr = store
                .query(
                    &m,
                    q,
                    &task.image_features[&q],
                    QueryDirection::Im2Txt,
                    QueryScope::Unknown,
                    k,
                )
                .unwrap();
            let positives = sim.positive_texts_of(q).unwrap();
            if qr.ranking.iter().any(|(id, _)| positives.contains(id)) {
                expected_hits += 1;
            }
            results.push(qr);
        }
        let report = recall_at_k(&results, std::slice::from_ref(&sim), k).unwrap();
        assert_eq!(report.hits, expected_hits);
        assert_eq!(report.included, queries.len());
        assert!((report.recall - expected_hits as f64 / queries.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn index_file_roundtrip_is_bitwise() {
        let data = Dataset::generate(&spec()).unwrap();
        let m = model(1);
        let mut store = IndexStore::new(IndexPolicy::NoReindex);
        store.index_task(&m, &data.tasks[0]).unwrap();
        store.index_task(&m, &data.tasks[1]).unwrap();
        let mut buf = Vec::new();
        store.write(&mut buf).unwrap();
        let back = IndexStore::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back.policy(), store.policy());
        assert_eq!(back.generation(), store.generation());
        let mut buf2 = Vec::new();
        back.write(&mut buf2).unwrap();
        assert_eq!(buf, buf2);

        // truncation and bad policy byte
        let cut = &buf[..buf.len() - 1];
        assert!(IndexStore::read(&mut &cut[..]).is_err());
        let mut bad = buf.clone();
        bad[6] = 7; // policy byte after magic + version
        assert!(IndexStore::read(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn drift_is_zero_for_identical_snapshots() {
        let data = Dataset::generate(&spec()).unwrap();
        let m = model(1);
        let mut store = IndexStore::new(IndexPolicy::NoReindex);
        store.index_task(&m, &data.tasks[0]).unwrap();
        store.index_task(&m, &data.tasks[1]).unwrap();
        let report =
            diagnose_drift(&[m.snapshot(1), m.snapshot(2)], &data.tasks, &store).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            assert_eq!(row.image_drift, 0.0);
            assert_eq!(row.text_drift, 0.0);
            assert_eq!(row.pair_distance_then, row.pair_distance_now);
        }
    }

    #[test]
    fn frozen_text_branch_has_zero_text_drift() {
        let data = Dataset::generate(&spec()).unwrap();
        let m1 = model(1);
        // perturb only the image path
        let mut m2 = m1.clone();
        let layout = m2.layout();
        let mut flat = m2.flatten();
        for k in layout.image_hidden.clone() {
            flat[k] += 0.25;
        }
        m2.apply_flat(&flat).unwrap();

        let mut store = IndexStore::new(IndexPolicy::NoReindex);
        store.index_task(&m1, &data.tasks[0]).unwrap();
        store.index_task(&m2, &data.tasks[1]).unwrap();
        let report =
            diagnose_drift(&[m1.snapshot(1), m2.snapshot(2)], &data.tasks, &store).unwrap();
        let row1 = report.rows.iter().find(|r| r.task_id == 1).unwrap();
        assert_eq!(row1.text_drift, 0.0);
        assert!(row1.image_drift > 0.0);
    }

    #[test]
    fn overlap_matches_brute_force_recount() {
        let data = Dataset::generate(&spec()).unwrap();
        let m = model(7);
        let mut store = IndexStore::new(IndexPolicy::NoReindex);
        store.index_task(&m, &data.tasks[0]).unwrap();
        store.index_task(&m, &data.tasks[1]).unwrap();
        let report =
            diagnose_drift(&[m.snapshot(1), m.snapshot(2)], &data.tasks, &store).unwrap();

        // independent recount for task 1
        let mut embs: Vec<(Modality, u64, u16, Vec<f64>)> = Vec::new();
        for task in &data.tasks {
            for &id in &task.train_ids {
                embs.push((
                    Modality::Image,
                    id,
                    task.task_id,
                    m.embed_image(&task.image_features[&id]).unwrap(),
                ));
                embs.push((
                    Modality::Text,
                    id,
                    task.task_id,
                    m.embed_text(&task.text_features[&id]).unwrap(),
                ));
            }
        }
        let mut overlapping = 0usize;
        let mut counted = 0usize;
        for (m1, id1, t1, e1) in &embs {
            if *t1 != 1 {
                continue;
            }
            let mut within = f64::INFINITY;
            let mut cross = f64::INFINITY;
            for (m2, id2, t2, e2) in &embs {
                if m2 != m1 || id2 == id1 {
                    continue;
                }
                let d = distance(e1, e2).unwrap();
                if t2 == t1 {
                    within = within.min(d);
                } else {
                    cross = cross.min(d);
                }
            }
            counted += 1;
            if cross < within {
                overlapping += 1;
            }
        }
        let expected = overlapping as f64 / counted as f64;
        let row1 = report.rows.iter().find(|r| r.task_id == 1).unwrap();
        assert!((row1.overlap - expected).abs() < 1e-12);
    }
}
