//! Feature-file persistence, the synthetic task-sequence generator, and the
//! dataset model shared by training and evaluation.
//!
//! A dataset is a sequence of tasks; each task owns disjoint item ids with
//! one image and one text feature vector per id, a category label per id,
//! and a train/val/test split. Category labels drive both negative filtering
//! during training and relevance judgments during evaluation. Datasets
//! loaded from feature files without a relevance sidecar degrade to
//! id-equality relevance (each item its own category).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::byteio::{
    expect_eof, read_f32_vec, read_magic, read_u16, read_u32, read_u64, read_u8, write_f32_slice,
    write_u16, write_u32, write_u64,
};
use crate::error::{Error, Result};
use crate::loss::{PositivePair, SimilarityMatrix};
use crate::model::Modality;

pub const FEATURE_MAGIC: [u8; 4] = *b"XMFT";
pub const FEATURE_VERSION: u16 = 1;

fn modality_code(m: Modality) -> u8 {
    match m {
        Modality::Image => 0,
        Modality::Text => 1,
    }
}

fn modality_from_code(code: u8) -> Result<Modality> {
    match code {
        0 => Ok(Modality::Image),
        1 => Ok(Modality::Text),
        other => Err(Error::InvalidField {
            field: "modality",
            value: other as u64,
        }),
    }
}

/// One modality's raw feature matrix: `count` rows of `dim` f32 values, with
/// an item id and a task id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub modality: Modality,
    pub dim: usize,
    pub ids: Vec<u64>,
    pub task_ids: Vec<u16>,
    pub rows: Vec<f32>,
}

impl FeatureFile {
    pub fn new(
        modality: Modality,
        dim: usize,
        ids: Vec<u64>,
        task_ids: Vec<u16>,
        rows: Vec<f32>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidField {
                field: "feature dim",
                value: 0,
            });
        }
        if task_ids.len() != ids.len() {
            return Err(Error::ShapeMismatch {
                what: "feature task-id table",
                expected: ids.len(),
                actual: task_ids.len(),
            });
        }
        if rows.len() != ids.len() * dim {
            return Err(Error::ShapeMismatch {
                what: "feature matrix",
                expected: ids.len() * dim,
                actual: rows.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(*id) {
                return Err(Error::DuplicateId {
                    what: "feature file ids",
                    id: *id,
                });
            }
        }
        for (row, chunk) in rows.chunks(dim).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteRow { row });
            }
        }
        Ok(Self {
            modality,
            dim,
            ids,
            task_ids,
            rows,
        })
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.rows[index * self.dim..(index + 1) * self.dim]
    }

    /// Features widened to f64, grouped by task then item id.
    pub fn by_task(&self) -> BTreeMap<u16, BTreeMap<u64, Vec<f64>>> {
        let mut out: BTreeMap<u16, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
        for i in 0..self.count() {
            let v: Vec<f64> = self.row(i).iter().map(|x| *x as f64).collect();
            out.entry(self.task_ids[i]).or_default().insert(self.ids[i], v);
        }
        out
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&FEATURE_MAGIC)?;
        write_u16(w, FEATURE_VERSION)?;
        w.write_all(&[modality_code(self.modality)])?;
        write_u64(w, self.count() as u64)?;
        write_u32(w, self.dim as u32)?;
        write_f32_slice(w, &self.rows)?;
        for id in &self.ids {
            write_u64(w, *id)?;
        }
        for t in &self.task_ids {
            write_u16(w, *t)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        read_magic(r, FEATURE_MAGIC)?;
        let version = read_u16(r, "feature format version")?;
        if version != FEATURE_VERSION {
            return Err(Error::BadVersion(version));
        }
        let modality = modality_from_code(read_u8(r, "modality")?)?;
        let count = read_u64(r, "row count")? as usize;
        let dim = read_u32(r, "feature dim")? as usize;
        let rows = read_f32_vec(r, count * dim, "feature rows")?;
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            ids.push(read_u64(r, "id table")?);
        }
        let mut task_ids = Vec::with_capacity(count);
        for _ in 0..count {
            task_ids.push(read_u16(r, "task-id table")?);
        }
        expect_eof(r, "feature file")?;
        Self::new(modality, dim, ids, task_ids, rows)
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

/// One task's items, labels, split, and raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task_id: u16,
    /// Item id -> category label. Items of the same category are mutually
    /// relevant; with id-equality relevance the label is the id itself.
    pub category_of: BTreeMap<u64, u64>,
    pub train_ids: Vec<u64>,
    pub val_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
    pub image_features: BTreeMap<u64, Vec<f64>>,
    pub text_features: BTreeMap<u64, Vec<f64>>,
}

impl TaskData {
    /// The 1:1 training pairs, one per train item, in ascending id order.
    pub fn train_pairs(&self) -> Vec<PositivePair> {
        self.train_ids
            .iter()
            .map(|id| PositivePair {
                task_id: self.task_id,
                image_id: *id,
                text_id: *id,
            })
            .collect()
    }

    /// Annotated positives over the training split: only the 1:1 pairs are
    /// positive, so same-category items are legitimate training negatives.
    /// This is what negative sampling consults.
    pub fn train_sim(&self) -> Result<SimilarityMatrix> {
        let positives: Vec<(u64, u64)> = self.train_ids.iter().map(|id| (*id, *id)).collect();
        SimilarityMatrix::new(
            self.task_id,
            self.train_ids.clone(),
            self.train_ids.clone(),
            positives,
        )
    }

    /// Category-level relevance over every item of the task: a retrieved
    /// item is correct when it shares the query's category. Used as
    /// evaluation ground truth (exact counterparts of test queries are never
    /// indexed, so instance-level ground truth would be vacuous).
    pub fn eval_sim(&self) -> Result<SimilarityMatrix> {
        let all = self.all_ids();
        self.sim_over(&all)
    }

    /// Owned copy of the feature vectors for `ids` in one modality.
    pub fn features_subset(
        &self,
        modality: Modality,
        ids: &[u64],
    ) -> Result<BTreeMap<u64, Vec<f64>>> {
        let source = match modality {
            Modality::Image => &self.image_features,
            Modality::Text => &self.text_features,
        };
        let mut out = BTreeMap::new();
        for id in ids {
            let row = source.get(id).ok_or(Error::MissingFeature {
                modality: modality.name(),
                id: *id,
            })?;
            out.insert(*id, row.clone());
        }
        Ok(out)
    }

    pub fn all_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self
            .train_ids
            .iter()
            .chain(&self.val_ids)
            .chain(&self.test_ids)
            .copied()
            .collect();
        ids.sort_unstable();
        ids
    }

    fn sim_over(&self, ids: &[u64]) -> Result<SimilarityMatrix> {
        let mut positives = Vec::new();
        for &i in ids {
            let ci = self.category_of.get(&i).ok_or(Error::InvalidConfig(format!(
                "item {i} has no category label"
            )))?;
            for &j in ids {
                if self.category_of.get(&j) == Some(ci) {
                    positives.push((i, j));
                }
            }
        }
        SimilarityMatrix::new(self.task_id, ids.to_vec(), ids.to_vec(), positives)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.all_ids();
        let unique: BTreeSet<u64> = all.iter().copied().collect();
        if unique.len() != all.len() {
            return Err(Error::InvalidConfig(format!(
                "task {}: split lists overlap",
                self.task_id
            )));
        }
        if self.train_ids.is_empty() {
            return Err(Error::EmptyTaskData("train split"));
        }
        for id in &all {
            if !self.image_features.contains_key(id) {
                return Err(Error::MissingFeature {
                    modality: "image",
                    id: *id,
                });
            }
            if !self.text_features.contains_key(id) {
                return Err(Error::MissingFeature {
                    modality: "text",
                    id: *id,
                });
            }
            if !self.category_of.contains_key(id) {
                return Err(Error::InvalidConfig(format!("item {id} has no category label")));
            }
        }
        Ok(())
    }
}

/// Synthetic sequence parameters. Items of a category share a latent center
/// on a sphere of radius `separation`; each modality observes the center
/// through an affine lift plus per-item Gaussian latent noise of scale
/// `noise_std`. Lifts are drawn per task, so successive tasks encode their
/// categories through different feature subspaces — the domain shift that
/// makes sequential training interfere with earlier tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_dim: usize,
    pub text_dim: usize,
    pub latent_dim: usize,
    pub num_tasks: u16,
    pub categories_per_task: usize,
    pub pairs_per_category: usize,
    pub noise_std: f64,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_dim: 64,
            text_dim: 96,
            latent_dim: 8,
            num_tasks: 3,
            categories_per_task: 3,
            pairs_per_category: 40,
            noise_std: 0.15,
            separation: 1.0,
            seed: 17,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::InvalidConfig("latent dim must be >= 1".into()));
        }
        if self.image_dim < self.latent_dim || self.text_dim < self.latent_dim {
            return Err(Error::InvalidConfig(format!(
                "feature dims ({}, {}) must be >= latent dim {}",
                self.image_dim, self.text_dim, self.latent_dim
            )));
        }
        if self.num_tasks == 0 {
            return Err(Error::InvalidConfig("need at least one task".into()));
        }
        if self.categories_per_task < 2 {
            return Err(Error::InvalidConfig(
                "need >= 2 categories per task so intra-task negatives exist".into(),
            ));
        }
        if self.pairs_per_category < 10 {
            return Err(Error::InvalidConfig(
                "need >= 10 pairs per category for an 80/10/10 split".into(),
            ));
        }
        if self.noise_std < 0.0 || !(self.separation > 0.0) {
            return Err(Error::InvalidConfig(
                "noise std must be >= 0 and separation > 0".into(),
            ));
        }
        Ok(())
    }
}

/// A full task sequence, either synthetic or assembled from feature files.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tasks: Vec<TaskData>,
}

impl Dataset {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        let l = spec.latent_dim;

        // One affine lift per task and modality (drawn inside the task loop).
        let lift = |rng: &mut ChaCha12Rng, out_dim: usize| -> (Vec<f64>, Vec<f64>) {
            let scale = 1.0 / (l as f64).sqrt();
            let a: Vec<f64> = (0..out_dim * l)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let b: Vec<f64> = (0..out_dim)
                .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            (a, b)
        };

        let noise = Normal::new(0.0, spec.noise_std).map_err(|e| {
            Error::InvalidConfig(format!("bad noise distribution: {e}"))
        })?;

        let project = |a: &[f64], b: &[f64], z: &[f64], out_dim: usize| -> Vec<f64> {
            let mut out = vec![0.0; out_dim];
            for r in 0..out_dim {
                let mut acc = b[r];
                for (c, zc) in z.iter().enumerate() {
                    acc += a[r * l + c] * zc;
                }
                // quantize so in-memory data equals file round-tripped data
                out[r] = acc as f32 as f64;
            }
            out
        };

        let mut tasks = Vec::new();
        let mut next_id: u64 = 0;
        let mut next_category: u64 = 0;
        for t in 1..=spec.num_tasks {
            let (a_img, b_img) = lift(&mut rng, spec.image_dim);
            let (a_txt, b_txt) = lift(&mut rng, spec.text_dim);
            let mut task = TaskData {
                task_id: t,
                category_of: BTreeMap::new(),
                train_ids: Vec::new(),
                val_ids: Vec::new(),
                test_ids: Vec::new(),
                image_features: BTreeMap::new(),
                text_features: BTreeMap::new(),
            };
            for _ in 0..spec.categories_per_task {
                let category = next_category;
                next_category += 1;
                // category center: uniform direction scaled to `separation`
                let mut center: Vec<f64> =
                    (0..l).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let norm = center.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for v in &mut center {
                    *v *= spec.separation / norm;
                }

                let mut member_ids = Vec::new();
                for _ in 0..spec.pairs_per_category {
                    let id = next_id;
                    next_id += 1;
                    member_ids.push(id);
                    task.category_of.insert(id, category);
                    let z_img: Vec<f64> =
                        center.iter().map(|c| c + noise.sample(&mut rng)).collect();
                    let z_txt: Vec<f64> =
                        center.iter().map(|c| c + noise.sample(&mut rng)).collect();
                    task.image_features
                        .insert(id, project(&a_img, &b_img, &z_img, spec.image_dim));
                    task.text_features
                        .insert(id, project(&a_txt, &b_txt, &z_txt, spec.text_dim));
                }

                // per-category 80/10/10 split
                member_ids.shuffle(&mut rng);
                let n = member_ids.len();
                let n_val = (n / 10).max(1);
                let n_test = (n / 10).max(1);
                let n_train = n - n_val - n_test;
                task.train_ids.extend(&member_ids[..n_train]);
                task.val_ids.extend(&member_ids[n_train..n_train + n_val]);
                task.test_ids.extend(&member_ids[n_train + n_val..]);
            }
            task.train_ids.sort_unstable();
            task.val_ids.sort_unstable();
            task.test_ids.sort_unstable();
            task.validate()?;
            tasks.push(task);
        }
        Ok(Self { tasks })
    }

    /// Serializes all tasks into one feature file per modality.
    pub fn to_feature_files(&self) -> Result<(FeatureFile, FeatureFile)> {
        let build = |modality: Modality| -> Result<FeatureFile> {
            let mut ids = Vec::new();
            let mut task_ids = Vec::new();
            let mut rows: Vec<f32> = Vec::new();
            let mut dim = None;
            for task in &self.tasks {
                let features = match modality {
                    Modality::Image => &task.image_features,
                    Modality::Text => &task.text_features,
                };
                for (id, v) in features {
                    let d = *dim.get_or_insert(v.len());
                    if v.len() != d {
                        return Err(Error::ShapeMismatch {
                            what: "feature row",
                            expected: d,
                            actual: v.len(),
                        });
                    }
                    ids.push(*id);
                    task_ids.push(task.task_id);
                    rows.extend(v.iter().map(|x| *x as f32));
                }
            }
            let dim = dim.ok_or(Error::EmptyTaskData("dataset"))?;
            FeatureFile::new(modality, dim, ids, task_ids, rows)
        };
        Ok((build(Modality::Image)?, build(Modality::Text)?))
    }

    pub fn sidecar(&self) -> RelevanceSidecar {
        RelevanceSidecar {
            categories: self
                .tasks
                .iter()
                .flat_map(|t| t.category_of.iter().map(|(k, v)| (*k, *v)))
                .collect(),
            tasks: self
                .tasks
                .iter()
                .map(|t| SidecarTaskSplit {
                    task_id: t.task_id,
                    train: t.train_ids.clone(),
                    val: t.val_ids.clone(),
                    test: t.test_ids.clone(),
                })
                .collect(),
        }
    }

    /// Hex sha256 over the serialized feature files; identifies the dataset
    /// content independent of its in-memory form.
    pub fn content_hash(&self) -> Result<String> {
        let (img, txt) = self.to_feature_files()?;
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        img.write(&mut buf)?;
        hasher.update(&buf);
        buf.clear();
        txt.write(&mut buf)?;
        hasher.update(&buf);
        let digest = hasher.finalize();
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Pairs two feature files by item id. Every id must occur in both
    /// modalities with the same task id. Without a sidecar, relevance is
    /// id-equality and each task is split 80/10/10 by a shuffle seeded with
    /// `split_seed`.
    pub fn from_feature_files(
        images: &FeatureFile,
        texts: &FeatureFile,
        sidecar: Option<&RelevanceSidecar>,
        split_seed: u64,
    ) -> Result<Self> {
        if images.modality != Modality::Image {
            return Err(Error::InvalidConfig("first feature file must be images".into()));
        }
        if texts.modality != Modality::Text {
            return Err(Error::InvalidConfig("second feature file must be texts".into()));
        }
        let img_by_task = images.by_task();
        let txt_by_task = texts.by_task();
        let img_tasks: BTreeSet<u16> = img_by_task.keys().copied().collect();
        let txt_tasks: BTreeSet<u16> = txt_by_task.keys().copied().collect();
        if img_tasks != txt_tasks {
            return Err(Error::InvalidConfig(format!(
                "task sets differ between modalities: {img_tasks:?} vs {txt_tasks:?}"
            )));
        }

        let mut tasks = Vec::new();
        for (task_id, image_features) in img_by_task {
            let text_features = &txt_by_task[&task_id];
            let img_ids: BTreeSet<u64> = image_features.keys().copied().collect();
            let txt_ids: BTreeSet<u64> = text_features.keys().copied().collect();
            if img_ids != txt_ids {
                let odd = img_ids.symmetric_difference(&txt_ids).next().copied().unwrap_or(0);
                return Err(Error::InvalidConfig(format!(
                    "task {task_id}: item {odd} present in only one modality"
                )));
            }

            let (category_of, train_ids, val_ids, test_ids) = match sidecar {
                Some(sc) => {
                    let split = sc
                        .tasks
                        .iter()
                        .find(|t| t.task_id == task_id)
                        .ok_or(Error::InvalidConfig(format!(
                            "sidecar has no split for task {task_id}"
                        )))?;
                    let mut categories = BTreeMap::new();
                    for id in &img_ids {
                        let c = sc.categories.get(id).ok_or(Error::InvalidConfig(format!(
                            "sidecar has no category for item {id}"
                        )))?;
                        categories.insert(*id, *c);
                    }
                    (
                        categories,
                        split.train.clone(),
                        split.val.clone(),
                        split.test.clone(),
                    )
                }
                None => {
                    // id-equality relevance, seeded split
                    let categories: BTreeMap<u64, u64> =
                        img_ids.iter().map(|id| (*id, *id)).collect();
                    let mut ids: Vec<u64> = img_ids.iter().copied().collect();
                    let mut rng = ChaCha12Rng::seed_from_u64(split_seed);
                    rng.set_stream(task_id as u64);
                    ids.shuffle(&mut rng);
                    let n = ids.len();
                    let n_val = (n / 10).max(1);
                    let n_test = (n / 10).max(1);
                    if n <= n_val + n_test {
                        return Err(Error::EmptyTaskData("train split"));
                    }
                    let n_train = n - n_val - n_test;
                    let mut train: Vec<u64> = ids[..n_train].to_vec();
                    let mut val: Vec<u64> = ids[n_train..n_train + n_val].to_vec();
                    let mut test: Vec<u64> = ids[n_train + n_val..].to_vec();
                    train.sort_unstable();
                    val.sort_unstable();
                    test.sort_unstable();
                    (categories, train, val, test)
                }
            };

            let task = TaskData {
                task_id,
                category_of,
                train_ids,
                val_ids,
                test_ids,
                image_features,
                text_features: text_features.clone(),
            };
            task.validate()?;
            tasks.push(task);
        }
        Ok(Self { tasks })
    }
}

/// JSON sidecar carrying category labels and split membership, so relevance
/// survives a round trip through feature files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceSidecar {
    pub categories: BTreeMap<u64, u64>,
    pub tasks: Vec<SidecarTaskSplit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarTaskSplit {
    pub task_id: u16,
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl RelevanceSidecar {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| Error::InvalidConfig(format!("sidecar serialization failed: {e}")))?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        serde_json::from_reader(r)
            .map_err(|e| Error::InvalidConfig(format!("sidecar parse failed: {e}")))
    }
}
