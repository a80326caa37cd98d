//! The two-branch embedding network: modality-specific hidden layers feeding
//! a top layer (optionally shared between branches) and l2 normalization.
//!
//! Each branch is `input -> linear -> ReLU -> dropout -> linear -> l2 norm`.
//! The top layer can be shared between branches; the hidden layers stay
//! modality-specific.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    dropout_backward, dropout_forward, l2_normalize, l2_normalize_backward,
    linear_backward, linear_forward, relu_backward, relu_forward, DenseMatrix, DropoutMask,
    LayerParams, Mode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SharingMode {
    NoSharing,
    ShareTop,
}

impl SharingMode {
    pub fn name(self) -> &'static str {
        match self {
            SharingMode::NoSharing => "no-sharing",
            SharingMode::ShareTop => "share-top",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: BranchConfig,
    pub text: BranchConfig,
    pub sharing: SharingMode,
}

impl ModelConfig {
    pub fn new(
        image_input: usize,
        text_input: usize,
        hidden: usize,
        embed: usize,
        sharing: SharingMode,
    ) -> Self {
        Self {
            image: BranchConfig {
                input_dim: image_input,
                hidden_dim: hidden,
                embed_dim: embed,
            },
            text: BranchConfig {
                input_dim: text_input,
                hidden_dim: hidden,
                embed_dim: embed,
            },
            sharing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("image", &self.image), ("text", &self.text)] {
            if b.input_dim == 0 || b.hidden_dim == 0 || b.embed_dim == 0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} branch dims must all be >= 1"
                )));
            }
        }
        if self.image.embed_dim != self.text.embed_dim {
            return Err(Error::InvalidConfig(
                "branches must share the embedding dimension".into(),
            ));
        }
        if self.sharing == SharingMode::ShareTop && self.image.hidden_dim != self.text.hidden_dim {
            return Err(Error::InvalidConfig(
                "share-top requires equal hidden dims so the shared layer fits both".into(),
            ));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.image.embed_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TopLayers {
    Separate { image: LayerParams, text: LayerParams },
    Shared(LayerParams),
}

/// The two-branch model. In share-top mode a single top layer backs both
/// branches, so a write through one branch is visible through the other.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoBranchModel {
    config: ModelConfig,
    image_hidden: LayerParams,
    text_hidden: LayerParams,
    tops: TopLayers,
}

/// Cached activations from one train-mode branch pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct BranchCache {
    pub modality: Modality,
    input: Vec<f64>,
    pre_hidden: Vec<f64>,
    dropout: DropoutMask,
    dropped: Vec<f64>,
    pre_norm: Vec<f64>,
}

impl BranchCache {
    /// Top-layer output before l2 normalization (the MAS tap point).
    pub fn pre_norm(&self) -> &[f64] {
        &self.pre_norm
    }
}

/// Per-layer gradients for one branch.
#[derive(Debug, Clone)]
pub struct BranchGrads {
    pub hidden_weight: DenseMatrix,
    pub hidden_bias: Vec<f64>,
    pub top_weight: DenseMatrix,
    pub top_bias: Vec<f64>,
}

impl TwoBranchModel {
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let image_hidden = LayerParams::init_he(config.image.hidden_dim, config.image.input_dim, rng);
        let image_top = LayerParams::init_he(config.image.embed_dim, config.image.hidden_dim, rng);
        let text_hidden = LayerParams::init_he(config.text.hidden_dim, config.text.input_dim, rng);
        let tops = match config.sharing {
            SharingMode::ShareTop => TopLayers::Shared(image_top),
            SharingMode::NoSharing => {
                let text_top =
                    LayerParams::init_he(config.text.embed_dim, config.text.hidden_dim, rng);
                TopLayers::Separate {
                    image: image_top,
                    text: text_top,
                }
            }
        };
        Ok(Self {
            config,
            image_hidden,
            text_hidden,
            tops,
        })
    }

    pub fn from_parts(
        config: ModelConfig,
        image_hidden: LayerParams,
        image_top: LayerParams,
        text_hidden: LayerParams,
        text_top: Option<LayerParams>,
    ) -> Result<Self> {
        config.validate()?;
        let tops = match (config.sharing, text_top) {
            (SharingMode::ShareTop, None) => TopLayers::Shared(image_top),
            (SharingMode::NoSharing, Some(text)) => TopLayers::Separate {
                image: image_top,
                text,
            },
            _ => {
                return Err(Error::InvalidConfig(
                    "text top layer must be present exactly when not sharing".into(),
                ))
            }
        };
        Ok(Self {
            config,
            image_hidden,
            text_hidden,
            tops,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn sharing(&self) -> SharingMode {
        self.config.sharing
    }

    pub fn hidden(&self, modality: Modality) -> &LayerParams {
        match modality {
            Modality::Image => &self.image_hidden,
            Modality::Text => &self.text_hidden,
        }
    }

    pub fn top(&self, modality: Modality) -> &LayerParams {
        match (&self.tops, modality) {
            (TopLayers::Shared(top), _) => top,
            (TopLayers::Separate { image, .. }, Modality::Image) => image,
            (TopLayers::Separate { text, .. }, Modality::Text) => text,
        }
    }

    /// Mutable access to the top layer reached through `modality`. In
    /// share-top mode both modalities reach the same storage.
    pub fn top_mut(&mut self, modality: Modality) -> &mut LayerParams {
        match (&mut self.tops, modality) {
            (TopLayers::Shared(top), _) => top,
            (TopLayers::Separate { image, .. }, Modality::Image) => image,
            (TopLayers::Separate { text, .. }, Modality::Text) => text,
        }
    }

    fn branch_dims(&self, modality: Modality) -> &BranchConfig {
        match modality {
            Modality::Image => &self.config.image,
            Modality::Text => &self.config.text,
        }
    }

    /// Eval-mode embedding: deterministic, consumes no RNG, dropout inactive.
    pub fn embed(&self, modality: Modality, input: &[f64]) -> Result<Vec<f64>> {
        let dims = self.branch_dims(modality);
        if input.len() != dims.input_dim {
            return Err(Error::DimensionMismatch {
                context: "embed",
                expected: dims.input_dim,
                actual: input.len(),
            });
        }
        let z1 = linear_forward(input, self.hidden(modality))?;
        let a1 = relu_forward(&z1);
        let z2 = linear_forward(&a1, self.top(modality))?;
        l2_normalize(&z2)
    }

    pub fn embed_image(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.embed(Modality::Image, x)
    }

    pub fn embed_text(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.embed(Modality::Text, y)
    }

    /// Forward pass with activation caching. `Mode::Train` draws a dropout
    /// mask from `rng`; `Mode::Eval` keeps everything and consumes no RNG.
    pub fn forward_cached<R: Rng>(
        &self,
        modality: Modality,
        input: &[f64],
        mode: Mode,
        dropout_keep: f64,
        rng: &mut R,
    ) -> Result<(Vec<f64>, BranchCache)> {
        let dims = self.branch_dims(modality);
        if input.len() != dims.input_dim {
            return Err(Error::DimensionMismatch {
                context: "forward_cached",
                expected: dims.input_dim,
                actual: input.len(),
            });
        }
        let z1 = linear_forward(input, self.hidden(modality))?;
        let a1 = relu_forward(&z1);
        let dropout = match mode {
            Mode::Train => DropoutMask::sample(a1.len(), dropout_keep, rng)?,
            Mode::Eval => DropoutMask::eval(a1.len()),
        };
        let dropped = dropout_forward(&a1, &dropout);
        let z2 = linear_forward(&dropped, self.top(modality))?;
        let u = l2_normalize(&z2)?;
        Ok((
            u,
            BranchCache {
                modality,
                input: input.to_vec(),
                pre_hidden: z1,
                dropout,
                dropped,
                pre_norm: z2,
            },
        ))
    }

    /// Backward from a gradient on the normalized embedding.
    /// Eval-mode forward with cache kept for backprop; consumes no randomness.
    pub fn forward_eval(&self, modality: Modality, input: &[f64]) -> Result<(Vec<f64>, BranchCache)> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        self.forward_cached(modality, input, Mode::Eval, 1.0, &mut rng)
    }

    pub fn backward(&self, cache: &BranchCache, grad_embedding: &[f64]) -> Result<BranchGrads> {
        let g2 = l2_normalize_backward(&cache.pre_norm, grad_embedding);
        self.backward_from_pre_norm(cache, &g2)
    }

    /// Backward from a gradient on the pre-normalization top output. Used by
    /// the branch-output-norm importance estimator, which taps before the
    /// normalization.
    pub fn backward_from_pre_norm(
        &self,
        cache: &BranchCache,
        grad_pre_norm: &[f64],
    ) -> Result<BranchGrads> {
        let top = self.top(cache.modality);
        let (top_weight, top_bias, grad_dropped) =
            linear_backward(top, &cache.dropped, grad_pre_norm)?;
        let grad_a1 = dropout_backward(&grad_dropped, &cache.dropout);
        let grad_z1 = relu_backward(&cache.pre_hidden, &grad_a1);
        let (hidden_weight, hidden_bias, _) =
            linear_backward(self.hidden(cache.modality), &cache.input, &grad_z1)?;
        Ok(BranchGrads {
            hidden_weight,
            hidden_bias,
            top_weight,
            top_bias,
        })
    }

    // ---- flat parameter layout ------------------------------------------

    /// Canonical flat order: image-hidden W, b; image-top W, b; text-hidden
    /// W, b; text-top W, b. The top is stored once in share-top mode.
    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config)
    }

    pub fn param_len(&self) -> usize {
        self.layout().total
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        push_layer(&mut out, &self.image_hidden);
        push_layer(&mut out, self.top(Modality::Image));
        push_layer(&mut out, &self.text_hidden);
        if self.config.sharing == SharingMode::NoSharing {
            push_layer(&mut out, self.top(Modality::Text));
        }
        out
    }

    pub fn apply_flat(&mut self, flat: &[f64]) -> Result<()> {
        let layout = self.layout();
        if flat.len() != layout.total {
            return Err(Error::ShapeMismatch {
                what: "flat parameter array",
                expected: layout.total,
                actual: flat.len(),
            });
        }
        load_layer(&mut self.image_hidden, &flat[layout.image_hidden.clone()]);
        let top_seg = layout.image_top.clone();
        load_layer(self.top_mut(Modality::Image), &flat[top_seg]);
        load_layer(&mut self.text_hidden, &flat[layout.text_hidden.clone()]);
        if self.config.sharing == SharingMode::NoSharing {
            let seg = layout.text_top.clone();
            load_layer(self.top_mut(Modality::Text), &flat[seg]);
        }
        Ok(())
    }

    pub fn snapshot(&self, task_index: u32) -> ModelSnapshot {
        ModelSnapshot {
            task_index,
            config: self.config,
            params: self.flatten(),
        }
    }

    pub fn restore(snapshot: &ModelSnapshot) -> Result<TwoBranchModel> {
        let config = snapshot.config;
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if snapshot.params.len() != layout.total {
            return Err(Error::ShapeMismatch {
                what: "snapshot parameter array",
                expected: layout.total,
                actual: snapshot.params.len(),
            });
        }
        let image_hidden = layer_from_flat(
            &snapshot.params[layout.image_hidden.clone()],
            config.image.hidden_dim,
            config.image.input_dim,
        )?;
        let image_top = layer_from_flat(
            &snapshot.params[layout.image_top.clone()],
            config.image.embed_dim,
            config.image.hidden_dim,
        )?;
        let text_hidden = layer_from_flat(
            &snapshot.params[layout.text_hidden.clone()],
            config.text.hidden_dim,
            config.text.input_dim,
        )?;
        let text_top = match config.sharing {
            SharingMode::NoSharing => Some(layer_from_flat(
                &snapshot.params[layout.text_top.clone()],
                config.text.embed_dim,
                config.text.hidden_dim,
            )?),
            SharingMode::ShareTop => None,
        };
        TwoBranchModel::from_parts(config, image_hidden, image_top, text_hidden, text_top)
    }
}

fn push_layer(out: &mut Vec<f64>, layer: &LayerParams) {
    out.extend_from_slice(layer.weight.data());
    out.extend_from_slice(&layer.bias);
}

fn load_layer(layer: &mut LayerParams, flat: &[f64]) {
    let w = layer.weight.rows() * layer.weight.cols();
    layer.weight.data_mut().copy_from_slice(&flat[..w]);
    layer.bias.copy_from_slice(&flat[w..]);
}

fn layer_from_flat(flat: &[f64], rows: usize, cols: usize) -> Result<LayerParams> {
    let w = rows * cols;
    LayerParams::new(
        DenseMatrix::new(rows, cols, flat[..w].to_vec())?,
        flat[w..].to_vec(),
    )
}

/// Segment ranges of the canonical flat parameter vector. `text_top` equals
/// `image_top` in share-top mode: both branches read the same storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub image_hidden: std::ops::Range<usize>,
    pub image_top: std::ops::Range<usize>,
    pub text_hidden: std::ops::Range<usize>,
    pub text_top: std::ops::Range<usize>,
    pub total: usize,
    pub shared_top: bool,
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let ih = config.image.hidden_dim * config.image.input_dim + config.image.hidden_dim;
        let it = config.image.embed_dim * config.image.hidden_dim + config.image.embed_dim;
        let th = config.text.hidden_dim * config.text.input_dim + config.text.hidden_dim;
        let tt = config.text.embed_dim * config.text.hidden_dim + config.text.embed_dim;
        let image_hidden = 0..ih;
        let image_top = ih..ih + it;
        let text_hidden = ih + it..ih + it + th;
        let (text_top, total, shared_top) = match config.sharing {
            SharingMode::ShareTop => (image_top.clone(), ih + it + th, true),
            SharingMode::NoSharing => {
                (ih + it + th..ih + it + th + tt, ih + it + th + tt, false)
            }
        };
        Self {
            image_hidden,
            image_top,
            text_hidden,
            text_top,
            total,
            shared_top,
        }
    }

    /// Length of the image-path parameter vector (hidden + top).
    pub fn theta_len(&self) -> usize {
        self.image_hidden.len() + self.image_top.len()
    }

    /// Length of the text-path parameter vector (hidden + top).
    pub fn omega_len(&self) -> usize {
        self.text_hidden.len() + self.text_top.len()
    }

    /// Image-path parameters: [image-hidden, image-top], in flat order.
    pub fn extract_theta(&self, flat: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.theta_len());
        out.extend_from_slice(&flat[self.image_hidden.clone()]);
        out.extend_from_slice(&flat[self.image_top.clone()]);
        out
    }

    /// Text-path parameters: [text-hidden, text-top]. In share-top mode the
    /// top segment is the shared storage.
    pub fn extract_omega(&self, flat: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.omega_len());
        out.extend_from_slice(&flat[self.text_hidden.clone()]);
        out.extend_from_slice(&flat[self.text_top.clone()]);
        out
    }

    /// Adds an image-path gradient vector into a flat gradient buffer.
    pub fn scatter_add_theta(&self, flat: &mut [f64], theta: &[f64]) {
        debug_assert_eq!(theta.len(), self.theta_len());
        let split = self.image_hidden.len();
        add_into(&mut flat[self.image_hidden.clone()], &theta[..split]);
        add_into(&mut flat[self.image_top.clone()], &theta[split..]);
    }

    /// Adds a text-path gradient vector into a flat gradient buffer. In
    /// share-top mode the top contribution lands on the shared segment.
    pub fn scatter_add_omega(&self, flat: &mut [f64], omega: &[f64]) {
        debug_assert_eq!(omega.len(), self.omega_len());
        let split = self.text_hidden.len();
        add_into(&mut flat[self.text_hidden.clone()], &omega[..split]);
        add_into(&mut flat[self.text_top.clone()], &omega[split..]);
    }

    /// Adds per-layer branch gradients into a flat gradient buffer,
    /// accumulating shared-top contributions from both branches.
    pub fn accumulate_branch(&self, flat: &mut [f64], modality: Modality, grads: &BranchGrads) {
        let (hidden_seg, top_seg) = match modality {
            Modality::Image => (self.image_hidden.clone(), self.image_top.clone()),
            Modality::Text => (self.text_hidden.clone(), self.text_top.clone()),
        };
        let hw = grads.hidden_weight.data();
        let hseg = &mut flat[hidden_seg];
        add_into(&mut hseg[..hw.len()], hw);
        add_into(&mut hseg[hw.len()..], &grads.hidden_bias);
        let tw = grads.top_weight.data();
        let tseg = &mut flat[top_seg];
        add_into(&mut tseg[..tw.len()], tw);
        add_into(&mut tseg[tw.len()..], &grads.top_bias);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Flattened parameters plus the metadata needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub task_index: u32,
    pub config: ModelConfig,
    pub params: Vec<f64>,
}

impl ModelSnapshot {
    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config)
    }
}

/// Euclidean distance between two embeddings of equal length.
pub fn distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            context: "distance",
            expected: u.len(),
            actual: v.len(),
        });
    }
    Ok(u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::l2_norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn toy_config(sharing: SharingMode) -> ModelConfig {
        ModelConfig::new(6, 5, 4, 3, sharing)
    }

    fn seeded_model(seed: u64, sharing: SharingMode) -> TwoBranchModel {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        TwoBranchModel::init(toy_config(sharing), &mut rng).unwrap()
    }

    #[test]
    fn embed_reduces_to_l2_normalize_for_identity_branch() {
        // Identity weights, zero bias, non-negative input keeps ReLU inactive.
        let config = ModelConfig::new(4, 4, 4, 4, SharingMode::NoSharing);
        let eye = || {
            let mut m = DenseMatrix::zeros(4, 4);
            for i in 0..4 {
                m.set(i, i, 1.0);
            }
            LayerParams::new(m, vec![0.0; 4]).unwrap()
        };
        let model =
            TwoBranchModel::from_parts(config, eye(), eye(), eye(), Some(eye())).unwrap();
        let u = model.embed_image(&[3.0, 4.0, 0.0, 0.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-12);
        assert!((u[1] - 0.8).abs() < 1e-12);
        assert!(u[2].abs() < 1e-12 && u[3].abs() < 1e-12);
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let model = seeded_model(1, SharingMode::NoSharing);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..10 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let u = model.embed_image(&x).unwrap();
            let v = model.embed_text(&y).unwrap();
            assert!((l2_norm(&u) - 1.0).abs() < 1e-9);
            assert!((l2_norm(&v) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn embed_matches_independent_forward() {
        // Oracle: re-code the forward pass with explicit loops.
        let model = seeded_model(5, SharingMode::NoSharing);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u = model.embed_image(&x).unwrap();

        let hidden = model.hidden(Modality::Image);
        let top = model.top(Modality::Image);
        let mut z1 = vec![0.0; 4];
        for r in 0..4 {
            z1[r] = hidden.bias[r];
            for c in 0..6 {
                z1[r] += hidden.weight.get(r, c) * x[c];
            }
            z1[r] = z1[r].max(0.0);
        }
        let mut z2 = vec![0.0; 3];
        for r in 0..3 {
            z2[r] = top.bias[r];
            for c in 0..4 {
                z2[r] += top.weight.get(r, c) * z1[c];
            }
        }
        let norm = z2.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..3 {
            assert!((u[i] - z2[i] / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_text_mirrors_image_contract() {
        let model = seeded_model(9, SharingMode::NoSharing);
        let y = vec![0.2, -0.4, 0.6, 0.1, -0.9];
        let v = model.embed_text(&y).unwrap();
        assert!((l2_norm(&v) - 1.0).abs() < 1e-9);
        assert!(matches!(
            model.embed_text(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn distance_cases() {
        let u = vec![1.0, 0.0];
        assert_eq!(distance(&u, &u).unwrap(), 0.0);
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert!((distance(&u, &neg).unwrap() - 2.0).abs() < 1e-15);
        assert!((distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(distance(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn snapshot_round_trip_is_bitwise() {
        for sharing in [SharingMode::NoSharing, SharingMode::ShareTop] {
            let model = seeded_model(12, sharing);
            let snap = model.snapshot(3);
            let restored = TwoBranchModel::restore(&snap).unwrap();
            assert_eq!(model, restored);
            assert_eq!(snap.params, restored.flatten());
        }
    }

    #[test]
    fn share_top_restore_preserves_aliasing() {
        let model = seeded_model(13, SharingMode::ShareTop);
        let snap = model.snapshot(1);
        let mut restored = TwoBranchModel::restore(&snap).unwrap();
        restored.top_mut(Modality::Image).bias[0] = 42.0;
        assert_eq!(restored.top(Modality::Text).bias[0], 42.0);
    }

    #[test]
    fn eval_forward_consumes_no_rng() {
        let model = seeded_model(21, SharingMode::NoSharing);
        let x = vec![0.5; 6];
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let before = rng.clone();
        let (_, _) = model
            .forward_cached(Modality::Image, &x, Mode::Eval, 0.5, &mut rng)
            .unwrap();
        assert_eq!(rng, before);
    }

    #[test]
    fn flatten_apply_round_trip() {
        for sharing in [SharingMode::NoSharing, SharingMode::ShareTop] {
            let model = seeded_model(31, sharing);
            let flat = model.flatten();
            let mut other = seeded_model(32, sharing);
            other.apply_flat(&flat).unwrap();
            assert_eq!(other.flatten(), flat);
            assert_eq!(other, model);
        }
    }

    #[test]
    fn layout_theta_omega_cover_flat_vector() {
        for sharing in [SharingMode::NoSharing, SharingMode::ShareTop] {
            let model = seeded_model(41, sharing);
            let layout = model.layout();
            let flat = model.flatten();
            let theta = layout.extract_theta(&flat);
            let omega = layout.extract_omega(&flat);
            assert_eq!(theta.len(), layout.theta_len());
            assert_eq!(omega.len(), layout.omega_len());
            // Scatter of all-ones path vectors must touch every flat slot.
            let mut buf = vec![0.0; layout.total];
            layout.scatter_add_theta(&mut buf, &vec![1.0; theta.len()]);
            layout.scatter_add_omega(&mut buf, &vec![1.0; omega.len()]);
            assert!(buf.iter().all(|v| *v > 0.0));
            if sharing == SharingMode::ShareTop {
                // shared segment accumulates from both paths
                assert!(buf[layout.image_top.clone()].iter().all(|v| *v == 2.0));
            }
        }
    }
}
