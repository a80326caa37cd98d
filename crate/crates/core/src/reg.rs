//! Quadratic anti-forgetting penalty and the two parameter-importance
//! estimators that feed it.
//!
//! The penalty pulls the current parameters toward the previous task's
//! snapshot, weighted per coordinate by an importance map. Importance comes
//! from either squared ranking-loss gradients (re-estimated after each task)
//! or accumulated absolute gradients of the squared branch output norm,
//! tapped before l2 normalization.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::byteio::{
    expect_eof, read_f64_vec, read_magic, read_u16, read_u32, read_u64, read_u8, write_f64_slice,
    write_u16, write_u32, write_u64,
};
use crate::error::{Error, Result};
use crate::linalg::Mode;
use crate::loss::{
    embed_ids_cached, ranking_loss, referenced_items, sample_triplets, scatter_grads_to_params,
    EmbeddingSet, LossConfig, Mining, PairPolicy, PositivePair, SimilarityMatrix,
};
use crate::model::{Modality, ParamLayout, TwoBranchModel};
use crate::snapshot::{FORMAT_VERSION, KIND_IMPORTANCE, MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    /// Squared gradient of the ranking loss, averaged over batches.
    Ewc,
    /// Absolute gradient of the squared pre-normalization output norm,
    /// averaged over samples and accumulated across tasks.
    Mas,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Ewc => "ewc",
            Estimator::Mas => "mas",
        }
    }

    fn code(self) -> u8 {
        match self {
            Estimator::Ewc => 0,
            Estimator::Mas => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Estimator::Ewc),
            1 => Ok(Estimator::Mas),
            other => Err(Error::InvalidField {
                field: "estimator",
                value: other as u64,
            }),
        }
    }
}

/// Per-coordinate parameter importance, split into the image path (theta)
/// and the text path (omega). In share-top mode both halves carry their own
/// view of the shared top layer and the penalty superposes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    pub estimator: Estimator,
    pub task_index: u32,
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
}

impl ImportanceMap {
    pub fn zeros(estimator: Estimator, layout: &ParamLayout) -> Self {
        Self {
            estimator,
            task_index: 0,
            theta: vec![0.0; layout.theta_len()],
            omega: vec![0.0; layout.omega_len()],
        }
    }

    pub fn validate(&self, layout: &ParamLayout) -> Result<()> {
        if self.theta.len() != layout.theta_len() {
            return Err(Error::ShapeMismatch {
                what: "importance theta",
                expected: layout.theta_len(),
                actual: self.theta.len(),
            });
        }
        if self.omega.len() != layout.omega_len() {
            return Err(Error::ShapeMismatch {
                what: "importance omega",
                expected: layout.omega_len(),
                actual: self.omega.len(),
            });
        }
        for v in self.theta.iter().chain(&self.omega) {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "importance values must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which branch the penalty constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegScope {
    BothBranches,
    ImageOnly,
    TextOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegConfig {
    pub lambda3: f64,
    pub scope: RegScope,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            lambda3: 1e6,
            scope: RegScope::BothBranches,
        }
    }
}

/// Unscaled penalty sum(importance * (current - anchor)^2) over the scoped
/// paths, with its gradient w.r.t. the current flat parameters.
pub fn penalty(
    current: &[f64],
    anchor: &[f64],
    importance: &ImportanceMap,
    layout: &ParamLayout,
    scope: RegScope,
) -> Result<(f64, Vec<f64>)> {
    if current.len() != layout.total {
        return Err(Error::ShapeMismatch {
            what: "penalty current parameters",
            expected: layout.total,
            actual: current.len(),
        });
    }
    if anchor.len() != layout.total {
        return Err(Error::ShapeMismatch {
            what: "penalty anchor parameters",
            expected: layout.total,
            actual: anchor.len(),
        });
    }
    importance.validate(layout)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; layout.total];
    if scope != RegScope::TextOnly {
        let cur = layout.extract_theta(current);
        let anc = layout.extract_theta(anchor);
        let mut g = vec![0.0; cur.len()];
        for k in 0..cur.len() {
            let d = cur[k] - anc[k];
            loss += importance.theta[k] * d * d;
            g[k] = 2.0 * importance.theta[k] * d;
        }
        layout.scatter_add_theta(&mut grad, &g);
    }
    if scope != RegScope::ImageOnly {
        let cur = layout.extract_omega(current);
        let anc = layout.extract_omega(anchor);
        let mut g = vec![0.0; cur.len()];
        for k in 0..cur.len() {
            let d = cur[k] - anc[k];
            loss += importance.omega[k] * d * d;
            g[k] = 2.0 * importance.omega[k] * d;
        }
        layout.scatter_add_omega(&mut grad, &g);
    }
    Ok((loss, grad))
}

pub fn compose_loss(ranking: f64, penalty: f64, lambda3: f64) -> f64 {
    ranking + lambda3 * penalty
}

/// Task data needed to estimate ranking-loss-gradient importance.
pub struct EstimationInputs<'a> {
    pub sim: &'a SimilarityMatrix,
    pub pairs: &'a [PositivePair],
    pub image_features: &'a BTreeMap<u64, Vec<f64>>,
    pub text_features: &'a BTreeMap<u64, Vec<f64>>,
}

/// Importance as the mean over batches of the squared ranking-loss gradient.
///
/// Runs in eval mode over the given pairs in order. Negatives are intra-task
/// only. Each map is standalone: callers replace, not accumulate, across
/// tasks. `rng` is consumed exclusively by negative sampling.
pub fn estimate_ewc<R: Rng>(
    model: &TwoBranchModel,
    inputs: &EstimationInputs,
    loss_cfg: &LossConfig,
    batch_size: usize,
    task_index: u32,
    rng: &mut R,
) -> Result<ImportanceMap> {
    if inputs.pairs.is_empty() {
        return Err(Error::EmptyTaskData("importance estimation pairs"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be >= 1".into()));
    }
    let layout = model.layout();
    let mut sq_sum = vec![0.0; layout.total];
    let mut n_batches = 0usize;
    for chunk in inputs.pairs.chunks(batch_size) {
        // Hardest-in-batch mining needs current embeddings of the chunk items.
        let mining_emb = match loss_cfg.mining {
            Mining::Random => None,
            Mining::HardestInBatch => {
                let img_ids: BTreeSet<u64> = chunk.iter().map(|p| p.image_id).collect();
                let txt_ids: BTreeSet<u64> = chunk.iter().map(|p| p.text_id).collect();
                let mut emb = EmbeddingSet::new();
                for id in img_ids {
                    let x = inputs.image_features.get(&id).ok_or(Error::MissingFeature {
                        modality: "image",
                        id,
                    })?;
                    emb.insert_image(id, model.embed_image(x)?);
                }
                for id in txt_ids {
                    let x = inputs.text_features.get(&id).ok_or(Error::MissingFeature {
                        modality: "text",
                        id,
                    })?;
                    emb.insert_text(id, model.embed_text(x)?);
                }
                Some(emb)
            }
        };
        let sampled = sample_triplets(
            chunk,
            std::slice::from_ref(inputs.sim),
            PairPolicy::ItnpOnly,
            loss_cfg,
            mining_emb.as_ref(),
            rng,
        )?;
        n_batches += 1;
        if sampled.triplets.is_empty() {
            continue; // zero gradient, still a batch
        }
        let (img_ids, txt_ids) = referenced_items(&sampled.triplets);
        let img = embed_ids_cached(
            model,
            Modality::Image,
            inputs.image_features,
            &img_ids,
            Mode::Eval,
            1.0,
            rng,
        )?;
        let txt = embed_ids_cached(
            model,
            Modality::Text,
            inputs.text_features,
            &txt_ids,
            Mode::Eval,
            1.0,
            rng,
        )?;
        let mut emb = EmbeddingSet::new();
        for (id, (e, _)) in &img {
            emb.insert_image(*id, e.clone());
        }
        for (id, (e, _)) in &txt {
            emb.insert_text(*id, e.clone());
        }
        let out = ranking_loss(&sampled.triplets, &emb, loss_cfg)?;
        let mut flat = vec![0.0; layout.total];
        scatter_grads_to_params(model, &layout, &img, &txt, &out.grads, &mut flat)?;
        for (s, g) in sq_sum.iter_mut().zip(&flat) {
            *s += g * g;
        }
    }
    let scale = 1.0 / n_batches as f64;
    for v in &mut sq_sum {
        *v *= scale;
    }
    Ok(ImportanceMap {
        estimator: Estimator::Ewc,
        task_index,
        theta: layout.extract_theta(&sq_sum),
        omega: layout.extract_omega(&sq_sum),
    })
}

/// Importance as the mean absolute gradient of the squared pre-normalization
/// top output norm, added onto the previous task's map (label-free, grows
/// monotonically).
///
/// Image samples inform the image path, text samples the text path; with a
/// shared top layer each side carries its own modality's contribution.
pub fn estimate_mas(
    model: &TwoBranchModel,
    image_features: &BTreeMap<u64, Vec<f64>>,
    text_features: &BTreeMap<u64, Vec<f64>>,
    previous: Option<&ImportanceMap>,
    task_index: u32,
) -> Result<ImportanceMap> {
    if image_features.is_empty() {
        return Err(Error::EmptyTaskData("importance estimation images"));
    }
    if text_features.is_empty() {
        return Err(Error::EmptyTaskData("importance estimation texts"));
    }
    let layout = model.layout();
    if let Some(prev) = previous {
        prev.validate(&layout)?;
        if prev.estimator != Estimator::Mas {
            return Err(Error::InvalidConfig(format!(
                "cannot accumulate onto a {} importance map",
                prev.estimator.name()
            )));
        }
    }

    let mean_abs = |features: &BTreeMap<u64, Vec<f64>>, modality: Modality| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; layout.total];
        let mut sample = vec![0.0; layout.total];
        for x in features.values() {
            let (_, cache) = model.forward_eval(modality, x)?;
            let upstream: Vec<f64> = cache.pre_norm().iter().map(|z| 2.0 * z).collect();
            let grads = model.backward_from_pre_norm(&cache, &upstream)?;
            sample.iter_mut().for_each(|v| *v = 0.0);
            layout.accumulate_branch(&mut sample, modality, &grads);
            for (a, g) in acc.iter_mut().zip(&sample) {
                *a += g.abs();
            }
        }
        let scale = 1.0 / features.len() as f64;
        for v in &mut acc {
            *v *= scale;
        }
        Ok(acc)
    };

    let image_flat = mean_abs(image_features, Modality::Image)?;
    let text_flat = mean_abs(text_features, Modality::Text)?;
    let mut theta = layout.extract_theta(&image_flat);
    let mut omega = layout.extract_omega(&text_flat);
    if let Some(prev) = previous {
        for (t, p) in theta.iter_mut().zip(&prev.theta) {
            *t += p;
        }
        for (o, p) in omega.iter_mut().zip(&prev.omega) {
            *o += p;
        }
    }
    Ok(ImportanceMap {
        estimator: Estimator::Mas,
        task_index,
        theta,
        omega,
    })
}

pub fn write_importance<W: Write>(w: &mut W, map: &ImportanceMap) -> Result<()> {
    w.write_all(&MAGIC)?;
    write_u16(w, FORMAT_VERSION)?;
    w.write_all(&[KIND_IMPORTANCE, map.estimator.code()])?;
    write_u32(w, map.task_index)?;
    write_u64(w, map.theta.len() as u64)?;
    write_u64(w, map.omega.len() as u64)?;
    write_f64_slice(w, &map.theta)?;
    write_f64_slice(w, &map.omega)?;
    Ok(())
}

pub fn read_importance<R: Read>(r: &mut R) -> Result<ImportanceMap> {
    read_magic(r, MAGIC)?;
    let version = read_u16(r, "format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let kind = read_u8(r, "record kind")?;
    if kind != KIND_IMPORTANCE {
        return Err(Error::InvalidField {
            field: "record kind",
            value: kind as u64,
        });
    }
    let estimator = Estimator::from_code(read_u8(r, "estimator")?)?;
    let task_index = read_u32(r, "task index")?;
    let theta_len = read_u64(r, "theta length")? as usize;
    let omega_len = read_u64(r, "omega length")? as usize;
    let theta = read_f64_vec(r, theta_len, "theta values")?;
    let omega = read_f64_vec(r, omega_len, "omega values")?;
    expect_eof(r, "importance file")?;
    for (row, v) in theta.iter().chain(&omega).enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteRow { row });
        }
        if *v < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "negative importance value {v} at index {row}"
            )));
        }
    }
    Ok(ImportanceMap {
        estimator,
        task_index,
        theta,
        omega,
    })
}

pub fn save_importance(path: &Path, map: &ImportanceMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_importance(&mut w, map)?;
    w.flush()?;
    Ok(())
}

pub fn load_importance(path: &Path) -> Result<ImportanceMap> {
    let mut r = BufReader::new(File::open(path)?);
    read_importance(&mut r)
}
