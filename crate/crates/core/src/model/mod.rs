//! 3D-CNN backbone, triple-tower cloze network, task heads and persistence.
//!
//! One backbone parameter set serves all towers: an item's m clips run
//! through the same convolution stack, their embeddings are concatenated in
//! raw-video clip order, and a single linear head classifies the operation.
//! Separate linear heads serve action recognition and frozen-backbone
//! probing.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, OptimSnapshot,
    CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cloze::OperationKind;
use crate::rng::{derive_rng, stream};
use crate::tensor::gradcheck::{relative_error, sample_coords};
use crate::tensor::{
    conv3d_backward, conv3d_forward, linear_backward, linear_forward, maxpool3d,
    maxpool3d_backward, relu, relu_backward, softmax_cross_entropy, Conv3dSpec, Scalar, Tensor,
    TensorError,
};

/// Width of the operation-classification output.
pub const VCP_CLASSES: usize = OperationKind::COUNT;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {reason}")]
    InvalidConfig { reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn default_kernel() -> (usize, usize, usize) {
    (3, 3, 3)
}

/// One conv-relu-pool stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub out_channels: usize,
    /// Odd extents; convolution uses unit stride and same padding.
    #[serde(default = "default_kernel")]
    pub kernel: (usize, usize, usize),
    pub pool_window: (usize, usize, usize),
    pub pool_stride: (usize, usize, usize),
}

/// Backbone layout. The final stage's channel count, globally average
/// pooled, is the embedding the heads consume ("conv5" features).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Per-tower input extents: (channels, frames, height, width).
    pub input: (usize, usize, usize, usize),
    pub stages: Vec<StageConfig>,
    /// Embedding width; must equal the final stage's out_channels.
    pub feature_dim: usize,
}

impl Default for BackboneConfig {
    /// Desk-scale stack: 8-frame 16x16 RGB clips through channel widths
    /// 8/16/32/64, spatial-only first pool, then full pooling down to 1x1x1.
    fn default() -> Self {
        let stage = |out_channels, pool: (usize, usize, usize)| StageConfig {
            out_channels,
            kernel: default_kernel(),
            pool_window: pool,
            pool_stride: pool,
        };
        Self {
            input: (3, 8, 16, 16),
            stages: vec![
                stage(8, (1, 2, 2)),
                stage(16, (2, 2, 2)),
                stage(32, (2, 2, 2)),
                stage(64, (2, 2, 2)),
            ],
            feature_dim: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::InvalidConfig { reason });
        let (c, t, h, w) = self.input;
        if c == 0 || t == 0 || h == 0 || w == 0 {
            return fail(format!("input extents must be positive, got {:?}", self.input));
        }
        if self.stages.is_empty() {
            return fail("at least one stage required".into());
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.out_channels == 0 {
                return fail(format!("stage {i}: out_channels must be positive"));
            }
            let (kt, kh, kw) = stage.kernel;
            for k in [kt, kh, kw] {
                if k == 0 || k % 2 == 0 {
                    return fail(format!(
                        "stage {i}: kernel {:?} must have odd positive extents for same padding",
                        stage.kernel
                    ));
                }
            }
            for (win, s) in [
                (stage.pool_window.0, stage.pool_stride.0),
                (stage.pool_window.1, stage.pool_stride.1),
                (stage.pool_window.2, stage.pool_stride.2),
            ] {
                if win == 0 || s == 0 {
                    return fail(format!("stage {i}: pool window/stride must be positive"));
                }
            }
        }
        let last = self.stages.last().expect("stages checked non-empty");
        if self.feature_dim == 0 || self.feature_dim != last.out_channels {
            return fail(format!(
                "feature_dim {} must equal the final stage's out_channels {}",
                self.feature_dim, last.out_channels
            ));
        }
        self.stage_extents()?;
        Ok(())
    }

    /// Post-pool (T, H, W) extents after each stage. Convolutions preserve
    /// extents (unit stride, same padding); pooling shrinks them.
    pub fn stage_extents(&self) -> Result<Vec<(usize, usize, usize)>, ModelError> {
        let (_, mut t, mut h, mut w) = self.input;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let pool = |n: usize, win: usize, s: usize, axis: &str| -> Result<usize, ModelError> {
                if n < win {
                    return Err(ModelError::InvalidConfig {
                        reason: format!(
                            "stage {i}: pool window {win} exceeds {axis} extent {n}"
                        ),
                    });
                }
                Ok((n - win) / s + 1)
            };
            t = pool(t, stage.pool_window.0, stage.pool_stride.0, "temporal")?;
            h = pool(h, stage.pool_window.1, stage.pool_stride.1, "height")?;
            w = pool(w, stage.pool_window.2, stage.pool_stride.2, "width")?;
            out.push((t, h, w));
        }
        Ok(out)
    }
}

/// He-style uniform init: U(-b, b) with b = sqrt(6 / fan_in), giving
/// variance 2 / fan_in. Elements are drawn as f64 in linear order so the
/// draw sequence is identical for every scalar type.
fn he_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
        .expect("initializer shapes are valid")
}

#[derive(Debug, Clone, PartialEq)]
struct ConvStage<T: Scalar> {
    spec: Conv3dSpec,
    weights: Tensor<T>,
    bias: Tensor<T>,
    pool_window: (usize, usize, usize),
    pool_stride: (usize, usize, usize),
}

impl<T: Scalar> ConvStage<T> {
    fn build(config: &StageConfig, in_channels: usize, init: Option<&mut ChaCha8Rng>) -> Self {
        let (kt, kh, kw) = config.kernel;
        let spec = Conv3dSpec::new(in_channels, config.out_channels)
            .with_kernel(config.kernel)
            .with_padding(((kt - 1) / 2, (kh - 1) / 2, (kw - 1) / 2));
        let fan_in = in_channels * kt * kh * kw;
        let weights = match init {
            Some(rng) => he_uniform(&spec.weight_shape(), fan_in, rng),
            None => Tensor::zeros(&spec.weight_shape()).expect("weight shape is valid"),
        };
        let bias = Tensor::zeros(&[config.out_channels]).expect("bias shape is valid");
        Self {
            spec,
            weights,
            bias,
            pool_window: config.pool_window,
            pool_stride: config.pool_stride,
        }
    }
}

/// Shared-weight convolutional tower.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T: Scalar = f32> {
    config: BackboneConfig,
    stages: Vec<ConvStage<T>>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache<T: Scalar = f32> {
    stages: Vec<StageCache<T>>,
    /// Shape of the final pooled activation the average pool consumed.
    final_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
struct StageCache<T: Scalar> {
    input: Tensor<T>,
    pre_relu: Tensor<T>,
    argmax: Vec<usize>,
}

fn global_average_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let [n, c, t, h, w] = input.dims5("global_average_pool")?;
    let vol = t * h * w;
    let scale = T::from_f64(1.0 / vol as f64);
    let mut out = Tensor::zeros(&[n, c])?;
    let src = input.data();
    for (i, dst) in out.data_mut().iter_mut().enumerate() {
        let mut acc = T::zero();
        for &v in &src[i * vol..(i + 1) * vol] {
            acc += v;
        }
        *dst = acc * scale;
    }
    Ok(out)
}

fn global_average_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>, TensorError> {
    let [n, c] = grad_out.dims2("global_average_pool_backward")?;
    if input_shape.len() != 5 || input_shape[0] != n || input_shape[1] != c {
        return Err(TensorError::InvalidShape {
            shape: input_shape.to_vec(),
            reason: format!("expected [{n}, {c}, T, H, W] input shape"),
        });
    }
    let vol: usize = input_shape[2..].iter().product();
    let scale = T::from_f64(1.0 / vol as f64);
    let mut grad_input = Tensor::zeros(input_shape)?;
    let dst = grad_input.data_mut();
    for (i, &g) in grad_out.data().iter().enumerate() {
        let v = g * scale;
        for d in &mut dst[i * vol..(i + 1) * vol] {
            *d = v;
        }
    }
    Ok(grad_input)
}

/// Per-stage parameter gradients.
#[derive(Debug, Clone)]
pub struct StageGrads<T: Scalar = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Backbone<T> {
    /// He-uniform weights, zero biases, drawn in stage order.
    pub fn init(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut in_c = config.input.0;
        for stage in &config.stages {
            stages.push(ConvStage::build(stage, in_c, Some(rng)));
            in_c = stage.out_channels;
        }
        Ok(Self { config, stages })
    }

    /// All-zero parameters; used before filling from a checkpoint.
    fn zeroed(config: BackboneConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut in_c = config.input.0;
        for stage in &config.stages {
            stages.push(ConvStage::build(stage, in_c, None));
            in_c = stage.out_channels;
        }
        Ok(Self { config, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(), ModelError> {
        let [_, c, t, h, w] = input.dims5("backbone input")?;
        let expect = self.config.input;
        for (axis, (got, want)) in
            [(c, expect.0), (t, expect.1), (h, expect.2), (w, expect.3)].into_iter().enumerate()
        {
            if got != want {
                return Err(ModelError::Tensor(TensorError::AxisMismatch {
                    context: "backbone input",
                    axis: axis + 1,
                    expected: want,
                    actual: got,
                }));
            }
        }
        Ok(())
    }

    /// Embeds a clip batch [N, C, T, H, W] into [N, feature_dim].
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_input(input)?;
        let mut x = input.clone();
        for stage in &self.stages {
            let pre = conv3d_forward(&x, &stage.weights, &stage.bias, &stage.spec)?;
            let act = relu(&pre);
            let (pooled, _) = maxpool3d(&act, stage.pool_window, stage.pool_stride)?;
            x = pooled;
        }
        Ok(global_average_pool(&x)?)
    }

    /// Forward pass that keeps the intermediates the backward pass needs.
    pub fn forward_cached(
        &self,
        input: &Tensor<T>,
    ) -> Result<(Tensor<T>, BackboneCache<T>), ModelError> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let pre = conv3d_forward(&x, &stage.weights, &stage.bias, &stage.spec)?;
            let act = relu(&pre);
            let (pooled, argmax) = maxpool3d(&act, stage.pool_window, stage.pool_stride)?;
            stages.push(StageCache { input: x, pre_relu: pre, argmax });
            x = pooled;
        }
        let features = global_average_pool(&x)?;
        let cache = BackboneCache { stages, final_shape: x.shape().to_vec() };
        Ok((features, cache))
    }

    /// Backpropagates feature gradients; returns (input grad, stage grads).
    pub fn backward(
        &self,
        cache: &BackboneCache<T>,
        grad_features: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<StageGrads<T>>), ModelError> {
        if cache.stages.len() != self.stages.len() {
            return Err(ModelError::InvalidConfig {
                reason: format!(
                    "cache has {} stages, backbone has {}",
                    cache.stages.len(),
                    self.stages.len()
                ),
            });
        }
        let mut grad = global_average_pool_backward(grad_features, &cache.final_shape)?;
        let mut stage_grads: Vec<StageGrads<T>> = Vec::with_capacity(self.stages.len());
        for (stage, sc) in self.stages.iter().zip(cache.stages.iter()).rev() {
            let grad_act = maxpool3d_backward(&grad, &sc.argmax, sc.pre_relu.shape())?;
            let grad_pre = relu_backward(&grad_act, &sc.pre_relu)?;
            let grads = conv3d_backward(&grad_pre, &sc.input, &stage.weights, &stage.spec)?;
            stage_grads.push(StageGrads { weights: grads.grad_weights, bias: grads.grad_bias });
            grad = grads.grad_input;
        }
        stage_grads.reverse();
        Ok((grad, stage_grads))
    }
}

/// Single linear layer y = xW^T + b.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead<T: Scalar = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearHead<T> {
    fn zeroed(in_features: usize, out_features: usize) -> Self {
        Self {
            weights: Tensor::zeros(&[out_features, in_features]).expect("weight shape is valid"),
            bias: Tensor::zeros(&[out_features]).expect("bias shape is valid"),
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        linear_forward(input, &self.weights, &self.bias)
    }
}

/// Which head consumes the concatenated tower features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClozeHead {
    /// End-to-end operation classification.
    Vcp,
    /// Assessment head trained with the backbone frozen.
    Probe,
}

/// The full network: shared backbone plus the three task heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ClozeNetwork<T: Scalar = f32> {
    backbone: Backbone<T>,
    head_vcp: LinearHead<T>,
    head_action: LinearHead<T>,
    head_probe: LinearHead<T>,
    clips_per_item: usize,
    num_action_classes: usize,
}

/// Cached intermediates of [`ClozeNetwork::cloze_forward_cached`].
#[derive(Debug, Clone)]
pub struct ClozeCache<T: Scalar = f32> {
    backbone: BackboneCache<T>,
    /// Head input: per-item tower features concatenated in clip order.
    concat: Tensor<T>,
    head: ClozeHead,
}

/// Cached intermediates of [`ClozeNetwork::action_forward_cached`].
#[derive(Debug, Clone)]
pub struct ActionCache<T: Scalar = f32> {
    backbone: BackboneCache<T>,
    features: Tensor<T>,
}

/// Parameter gradients aligned with [`ClozeNetwork::param_names`]; `None`
/// marks parameters the pass did not reach (frozen or other heads).
#[derive(Debug, Clone)]
pub struct NetGrads<T: Scalar = f32> {
    pub by_param: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ClozeNetwork<T> {
    /// He-uniform conv stages drawn from the seed's init stream. The three
    /// classification heads start at zero: a fresh network scores every
    /// class equally (initial cross-entropy is exactly ln K), and loading a
    /// pretrained backbone can never shift how the heads begin, so paired
    /// pretrained-vs-random runs differ only in the backbone.
    pub fn init(
        config: BackboneConfig,
        clips_per_item: usize,
        num_action_classes: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if clips_per_item < 2 {
            return Err(ModelError::InvalidConfig {
                reason: format!("clips_per_item {clips_per_item} must be at least 2"),
            });
        }
        if num_action_classes == 0 {
            return Err(ModelError::InvalidConfig {
                reason: "num_action_classes must be positive".into(),
            });
        }
        let backbone = Backbone::init(config, &mut derive_rng(seed, &[stream::INIT]))?;
        let feat = backbone.config().feature_dim;
        Ok(Self {
            head_vcp: LinearHead::zeroed(clips_per_item * feat, VCP_CLASSES),
            head_action: LinearHead::zeroed(feat, num_action_classes),
            head_probe: LinearHead::zeroed(clips_per_item * feat, VCP_CLASSES),
            backbone,
            clips_per_item,
            num_action_classes,
        })
    }

    /// All-zero parameters with the same layout; used by checkpoint loading.
    fn zeroed(
        config: BackboneConfig,
        clips_per_item: usize,
        num_action_classes: usize,
    ) -> Result<Self, ModelError> {
        let backbone = Backbone::zeroed(config)?;
        let feat = backbone.config().feature_dim;
        Ok(Self {
            backbone,
            head_vcp: LinearHead::zeroed(clips_per_item * feat, VCP_CLASSES),
            head_action: LinearHead::zeroed(feat, num_action_classes),
            head_probe: LinearHead::zeroed(clips_per_item * feat, VCP_CLASSES),
            clips_per_item,
            num_action_classes,
        })
    }

    pub fn backbone(&self) -> &Backbone<T> {
        &self.backbone
    }

    pub fn config(&self) -> &BackboneConfig {
        self.backbone.config()
    }

    pub fn clips_per_item(&self) -> usize {
        self.clips_per_item
    }

    pub fn num_action_classes(&self) -> usize {
        self.num_action_classes
    }

    pub fn head(&self, head: ClozeHead) -> &LinearHead<T> {
        match head {
            ClozeHead::Vcp => &self.head_vcp,
            ClozeHead::Probe => &self.head_probe,
        }
    }

    pub fn head_action(&self) -> &LinearHead<T> {
        &self.head_action
    }

    /// Fixed parameter order: backbone stages, then the three heads.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.num_params());
        for i in 0..self.backbone.stages.len() {
            names.push(format!("backbone.stage{i}.weights"));
            names.push(format!("backbone.stage{i}.bias"));
        }
        for head in ["head_vcp", "head_action", "head_probe"] {
            names.push(format!("{head}.weights"));
            names.push(format!("{head}.bias"));
        }
        names
    }

    pub fn num_params(&self) -> usize {
        2 * self.backbone.stages.len() + 6
    }

    /// Index of a head's weight parameter in [`Self::param_names`] order.
    fn head_base(&self, head: ClozeHead) -> usize {
        let heads = 2 * self.backbone.stages.len();
        match head {
            ClozeHead::Vcp => heads,
            ClozeHead::Probe => heads + 4,
        }
    }

    fn action_base(&self) -> usize {
        2 * self.backbone.stages.len() + 2
    }

    pub fn param(&self, index: usize) -> &Tensor<T> {
        let stages = self.backbone.stages.len();
        if index < 2 * stages {
            let stage = &self.backbone.stages[index / 2];
            if index % 2 == 0 { &stage.weights } else { &stage.bias }
        } else {
            let head = match (index - 2 * stages) / 2 {
                0 => &self.head_vcp,
                1 => &self.head_action,
                2 => &self.head_probe,
                _ => panic!("parameter index {index} out of range"),
            };
            if index % 2 == 0 { &head.weights } else { &head.bias }
        }
    }

    pub fn param_mut(&mut self, index: usize) -> &mut Tensor<T> {
        let stages = self.backbone.stages.len();
        if index < 2 * stages {
            let stage = &mut self.backbone.stages[index / 2];
            if index % 2 == 0 { &mut stage.weights } else { &mut stage.bias }
        } else {
            let head = match (index - 2 * stages) / 2 {
                0 => &mut self.head_vcp,
                1 => &mut self.head_action,
                2 => &mut self.head_probe,
                _ => panic!("parameter index {index} out of range"),
            };
            if index % 2 == 0 { &mut head.weights } else { &mut head.bias }
        }
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor<T>> {
        let idx = self.param_names().iter().position(|n| n == name)?;
        Some(self.param(idx))
    }

    /// Classifies operation logits for a tower batch [B·m, C, T, H, W]
    /// whose rows hold each item's m clips consecutively in clip order.
    pub fn cloze_forward(
        &self,
        towers: &Tensor<T>,
        head: ClozeHead,
    ) -> Result<Tensor<T>, ModelError> {
        Ok(self.cloze_forward_cached(towers, head)?.0)
    }

    pub fn cloze_forward_cached(
        &self,
        towers: &Tensor<T>,
        head: ClozeHead,
    ) -> Result<(Tensor<T>, ClozeCache<T>), ModelError> {
        let [n, _, _, _, _] = towers.dims5("cloze_forward towers")?;
        let m = self.clips_per_item;
        if n == 0 || n % m != 0 {
            return Err(ModelError::Tensor(TensorError::InvalidShape {
                shape: towers.shape().to_vec(),
                reason: format!("tower count {n} must be a positive multiple of m = {m}"),
            }));
        }
        let batch = n / m;
        let feat = self.backbone.config.feature_dim;
        let (features, backbone_cache) = self.backbone.forward_cached(towers)?;
        // Row-major [B·m, F] data re-read as [B, m·F] is exactly the
        // per-item concatenation in clip order.
        let concat = Tensor::new(&[batch, m * feat], features.into_data())?;
        let logits = self.head(head).forward(&concat)?;
        Ok((logits, ClozeCache { backbone: backbone_cache, concat, head }))
    }

    /// Gradients for the head used in the cached forward pass, plus the
    /// backbone when `with_backbone` (probe training leaves it frozen).
    pub fn cloze_backward(
        &self,
        cache: &ClozeCache<T>,
        grad_logits: &Tensor<T>,
        with_backbone: bool,
    ) -> Result<NetGrads<T>, ModelError> {
        let head = self.head(cache.head);
        let (grad_concat, grad_w, grad_b) =
            linear_backward(grad_logits, &cache.concat, &head.weights)?;
        let mut by_param: Vec<Option<Tensor<T>>> = vec![None; self.num_params()];
        let base = self.head_base(cache.head);
        by_param[base] = Some(grad_w);
        by_param[base + 1] = Some(grad_b);
        if with_backbone {
            let [batch, mf] = grad_concat.dims2("cloze_backward concat grad")?;
            let feat = self.backbone.config.feature_dim;
            let grad_features =
                Tensor::new(&[batch * self.clips_per_item, feat], grad_concat.into_data())?;
            debug_assert_eq!(mf, self.clips_per_item * feat);
            let (_, stage_grads) = self.backbone.backward(&cache.backbone, &grad_features)?;
            for (i, sg) in stage_grads.into_iter().enumerate() {
                by_param[2 * i] = Some(sg.weights);
                by_param[2 * i + 1] = Some(sg.bias);
            }
        }
        Ok(NetGrads { by_param })
    }

    /// Action logits for a clip batch [B, C, T, H, W].
    pub fn action_forward(&self, clips: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(self.action_forward_cached(clips)?.0)
    }

    pub fn action_forward_cached(
        &self,
        clips: &Tensor<T>,
    ) -> Result<(Tensor<T>, ActionCache<T>), ModelError> {
        let (features, backbone_cache) = self.backbone.forward_cached(clips)?;
        let logits = self.head_action.forward(&features)?;
        Ok((logits, ActionCache { backbone: backbone_cache, features }))
    }

    pub fn action_backward(
        &self,
        cache: &ActionCache<T>,
        grad_logits: &Tensor<T>,
        with_backbone: bool,
    ) -> Result<NetGrads<T>, ModelError> {
        let (grad_features, grad_w, grad_b) =
            linear_backward(grad_logits, &cache.features, &self.head_action.weights)?;
        let mut by_param: Vec<Option<Tensor<T>>> = vec![None; self.num_params()];
        let base = self.action_base();
        by_param[base] = Some(grad_w);
        by_param[base + 1] = Some(grad_b);
        if with_backbone {
            let (_, stage_grads) = self.backbone.backward(&cache.backbone, &grad_features)?;
            for (i, sg) in stage_grads.into_iter().enumerate() {
                by_param[2 * i] = Some(sg.weights);
                by_param[2 * i + 1] = Some(sg.bias);
            }
        }
        Ok(NetGrads { by_param })
    }

    /// Final-stage pooled features for retrieval; equals the backbone
    /// forward output. With `normalize`, rows are scaled to unit L2 norm.
    pub fn extract_conv5(
        &self,
        clips: &Tensor<T>,
        normalize: bool,
    ) -> Result<Tensor<T>, ModelError> {
        let mut features = self.backbone.forward(clips)?;
        if normalize {
            let [_, f] = features.dims2("extract_conv5")?;
            for row in features.data_mut().chunks_exact_mut(f) {
                let mut sq = T::zero();
                for v in row.iter() {
                    sq += *v * *v;
                }
                let norm = sq.sqrt();
                if norm > T::zero() {
                    for v in row.iter_mut() {
                        *v = *v / norm;
                    }
                }
            }
        }
        Ok(features)
    }

    /// SHA-256 over the backbone parameters in order; heads excluded.
    /// Probe training asserts this stays constant.
    pub fn backbone_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for stage in &self.backbone.stages {
            for tensor in [&stage.weights, &stage.bias] {
                for &v in tensor.data() {
                    hasher.update(Scalar::to_f64(v).to_le_bytes());
                }
            }
        }
        hasher.finalize().into()
    }
}

/// Outcome of an end-to-end gradient check: worst relative error per
/// parameter tensor, and the overall worst.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub per_param: Vec<(String, f64)>,
    pub worst: f64,
}

/// Compares analytic gradients against f64 central finite differences end
/// to end: random towers through `cloze_forward` into softmax
/// cross-entropy, sampling `samples_per_param` coordinates of every
/// parameter tensor that receives a gradient.
pub fn gradcheck_network(
    backbone: BackboneConfig,
    clips_per_item: usize,
    seed: u64,
    samples_per_param: usize,
) -> Result<GradcheckReport, ModelError> {
    fn cloze_loss(
        net: &ClozeNetwork<f64>,
        towers: &Tensor<f64>,
        labels: &[usize],
    ) -> Result<f64, ModelError> {
        let logits = net.cloze_forward(towers, ClozeHead::Vcp)?;
        Ok(softmax_cross_entropy(&logits, labels)?.0)
    }

    let mut net = ClozeNetwork::<f64>::init(backbone, clips_per_item, 2, seed)?;
    // Freshly initialized heads are zero, which blocks gradient flow into
    // the backbone; give them random weights so the whole path is live.
    let mut rng = derive_rng(seed, &[0x6D]);
    let names = net.param_names();
    for idx in 0..net.num_params() {
        if names[idx].starts_with("head_") {
            for v in net.param_mut(idx).data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let (c, t, h, w) = net.config().input;
    let batch = 2usize;
    let shape = [batch * clips_per_item, c, t, h, w];
    let len: usize = shape.iter().product();
    let towers = Tensor::new(&shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let labels: Vec<usize> = (0..batch).map(|b| (b * 3 + 1) % VCP_CLASSES).collect();

    let (logits, cache) = net.cloze_forward_cached(&towers, ClozeHead::Vcp)?;
    let (_, grad_logits) = softmax_cross_entropy(&logits, &labels)?;
    let analytic = net.cloze_backward(&cache, &grad_logits, true)?;

    let mut per_param = Vec::new();
    let mut worst = 0.0f64;
    for idx in 0..net.num_params() {
        let Some(grad) = analytic.by_param[idx].clone() else { continue };
        let mut param_worst = 0.0f64;
        for &coord in &sample_coords(grad.len(), samples_per_param) {
            let eps = 1e-6;
            let orig = net.param(idx).data()[coord];
            net.param_mut(idx).data_mut()[coord] = orig + eps;
            let plus = cloze_loss(&net, &towers, &labels)?;
            net.param_mut(idx).data_mut()[coord] = orig - eps;
            let minus = cloze_loss(&net, &towers, &labels)?;
            net.param_mut(idx).data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            param_worst = param_worst.max(relative_error(grad.data()[coord], numeric));
        }
        worst = worst.max(param_worst);
        per_param.push((names[idx].clone(), param_worst));
    }
    Ok(GradcheckReport { per_param, worst })
}
