// SPDX-License-Identifier: Apache-2.0

//! Two-branch instance classifier. The image branch runs convolutions and
//! residual separable modules over the masked patch and ends in global
//! average pooling; the statistics branch is a small MLP over the normalized
//! statistic vector. Their outputs are concatenated into a 5-way softmax head.

pub mod ops;
pub mod weights;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{Batch, Patch, STAT_LEN};
use crate::par::{self, Execution};
use crate::pointcloud::ClassId;
use crate::range_image::ChannelConfig;

use ops::Tensor;

pub use weights::{load_weights, read_weights, save_weights, write_weights};

/// Initialization range of [`Model::init_random`].
pub const INIT_SCALE: f32 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub c_in: usize,
    pub c_out: usize,
    /// `[3][3][c_in][c_out]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pointwise {
    pub c_in: usize,
    pub c_out: usize,
    /// `[c_in][c_out]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseSeparable {
    /// `[3][3][c_in]`
    pub dw_weight: Vec<f32>,
    pub dw_bias: Vec<f32>,
    pub pointwise: Pointwise,
}

impl DepthwiseSeparable {
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        ops::depthwise_separable(
            input,
            &self.dw_weight,
            &self.dw_bias,
            &self.pointwise.weight,
            &self.pointwise.bias,
        )
    }
}

/// Two depthwise-separable convolutions and 2×2 max pooling, summed with a
/// stride-2 1×1 projection of the input. Halves both spatial sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSeparable {
    pub first: DepthwiseSeparable,
    pub second: DepthwiseSeparable,
    pub shortcut: Pointwise,
}

impl ResidualSeparable {
    pub fn c_in(&self) -> usize {
        self.shortcut.c_in
    }

    pub fn c_out(&self) -> usize {
        self.shortcut.c_out
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if !input.height.is_multiple_of(2) || !input.width.is_multiple_of(2) {
            return Err(Error::Contract(format!(
                "residual module on odd size {}x{}",
                input.height, input.width
            )));
        }
        let mut main = self.first.forward(input)?;
        ops::relu_inplace(&mut main);
        let main = self.second.forward(&main)?;
        let mut out = ops::maxpool_2x2(&main)?;
        let short = ops::pointwise(input, &self.shortcut.weight, &self.shortcut.bias, 2)?;
        ops::add_inplace(&mut out, &short)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    /// `[n_in][n_out]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn forward(&self, input: &[f32]) -> Result<Vec<f32>> {
        ops::dense(input, &self.weight, &self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Layer {
    Conv3x3(Conv3x3),
    Residual(ResidualSeparable),
    Dense(Dense),
    Relu,
    GlobalAvgPool,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv3x3(_) => LayerKind::Conv3x3,
            Layer::Residual(_) => LayerKind::ResidualAdd,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Relu => LayerKind::Relu,
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
        }
    }

    pub fn param_count(&self) -> usize {
        let pw = |p: &Pointwise| p.weight.len() + p.bias.len();
        let ds = |d: &DepthwiseSeparable| d.dw_weight.len() + d.dw_bias.len() + pw(&d.pointwise);
        match self {
            Layer::Conv3x3(c) => c.weight.len() + c.bias.len(),
            Layer::Residual(r) => ds(&r.first) + ds(&r.second) + pw(&r.shortcut),
            Layer::Dense(d) => d.weight.len() + d.bias.len(),
            Layer::Relu | Layer::GlobalAvgPool => 0,
        }
    }
}

/// Layer kind codes as stored in the weight file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum LayerKind {
    Conv3x3 = 1,
    Depthwise3x3 = 2,
    Pointwise1x1 = 3,
    Dense = 4,
    MaxPool2x2 = 5,
    Relu = 6,
    BatchNorm = 7,
    GlobalAvgPool = 8,
    Concat = 9,
    Softmax = 10,
    ResidualAdd = 11,
    Metadata = 255,
}

impl LayerKind {
    pub fn from_code(code: u8) -> Option<Self> {
        use LayerKind::*;
        [
            Conv3x3,
            Depthwise3x3,
            Pointwise1x1,
            Dense,
            MaxPool2x2,
            Relu,
            BatchNorm,
            GlobalAvgPool,
            Concat,
            Softmax,
            ResidualAdd,
            Metadata,
        ]
        .into_iter()
        .find(|k| *k as u8 == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Depthwise3x3 => "depthwise3x3",
            LayerKind::Pointwise1x1 => "pointwise1x1",
            LayerKind::Dense => "dense",
            LayerKind::MaxPool2x2 => "maxpool2x2",
            LayerKind::Relu => "relu",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::GlobalAvgPool => "globalavgpool",
            LayerKind::Concat => "concat",
            LayerKind::Softmax => "softmax",
            LayerKind::ResidualAdd => "residual",
            LayerKind::Metadata => "metadata",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub channels: ChannelConfig,
    pub patch_side: usize,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub image_branch: Vec<Layer>,
    pub stats_branch: Vec<Layer>,
    pub head: Dense,
    pub meta: ModelMeta,
}

/// Layer widths of the two-branch network.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub channels: ChannelConfig,
    pub patch_side: usize,
    pub stem_width: usize,
    pub block_widths: Vec<usize>,
    pub out_width: usize,
    pub stats_widths: Vec<usize>,
}

impl Default for Architecture {
    /// The reference network: 20 533 parameters with the I/HNV/VNV channels.
    fn default() -> Self {
        Self {
            channels: ChannelConfig::REFERENCE,
            patch_side: crate::features::DEFAULT_PATCH_SIDE,
            stem_width: 16,
            block_widths: vec![32, 48],
            out_width: 24,
            stats_widths: vec![16, 16],
        }
    }
}

impl Architecture {
    pub fn with_channels(channels: ChannelConfig) -> Self {
        Self {
            channels,
            ..Self::default()
        }
    }

    pub fn init_random(&self, seed: u64) -> Result<Model> {
        self.channels.validate()?;
        let downsample = 1usize << self.block_widths.len();
        if self.patch_side == 0 || !self.patch_side.is_multiple_of(downsample) {
            return Err(Error::Contract(format!(
                "patch side {} not divisible by {downsample}",
                self.patch_side
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f32> {
            (0..n).map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE)).collect()
        };
        let c_in = self.channels.plane_count();
        let stem = Conv3x3 {
            c_in,
            c_out: self.stem_width,
            weight: draw(9 * c_in * self.stem_width),
            bias: draw(self.stem_width),
        };
        let mut image_branch = vec![Layer::Conv3x3(stem), Layer::Relu];
        let mut c = self.stem_width;
        for &width in &self.block_widths {
            let mut pointwise = |c_in: usize, c_out: usize| Pointwise {
                c_in,
                c_out,
                weight: draw(c_in * c_out),
                bias: draw(c_out),
            };
            let p1 = pointwise(c, width);
            let p2 = pointwise(width, width);
            let sc = pointwise(c, width);
            let first = DepthwiseSeparable {
                dw_weight: draw(9 * c),
                dw_bias: draw(c),
                pointwise: p1,
            };
            let second = DepthwiseSeparable {
                dw_weight: draw(9 * width),
                dw_bias: draw(width),
                pointwise: p2,
            };
            image_branch.push(Layer::Residual(ResidualSeparable {
                first,
                second,
                shortcut: sc,
            }));
            c = width;
        }
        image_branch.push(Layer::Conv3x3(Conv3x3 {
            c_in: c,
            c_out: self.out_width,
            weight: draw(9 * c * self.out_width),
            bias: draw(self.out_width),
        }));
        image_branch.push(Layer::Relu);
        image_branch.push(Layer::GlobalAvgPool);

        let mut stats_branch = Vec::new();
        let mut n = STAT_LEN;
        for &width in &self.stats_widths {
            stats_branch.push(Layer::Dense(Dense {
                n_in: n,
                n_out: width,
                weight: draw(n * width),
                bias: draw(width),
            }));
            stats_branch.push(Layer::Relu);
            n = width;
        }
        let head_in = self.out_width + n;
        let head = Dense {
            n_in: head_in,
            n_out: ClassId::COUNT,
            weight: draw(head_in * ClassId::COUNT),
            bias: draw(ClassId::COUNT),
        };
        Ok(Model {
            image_branch,
            stats_branch,
            head,
            meta: ModelMeta {
                channels: self.channels,
                patch_side: self.patch_side,
                class_names: ClassId::ALL.iter().map(|c| c.name().to_string()).collect(),
            },
        })
    }
}

/// Class probabilities indexed by [`ClassId`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub probabilities: [f32; ClassId::COUNT],
}

impl ClassScores {
    pub fn from_logits(logits: &[f32]) -> Result<Self> {
        let p = ops::softmax(logits);
        Ok(Self {
            probabilities: p
                .try_into()
                .map_err(|_| Error::Contract("head must emit 5 logits".into()))?,
        })
    }

    /// Puts all probability mass on one class.
    pub fn certain(class: ClassId) -> Self {
        let mut probabilities = [0.0; ClassId::COUNT];
        probabilities[class.index()] = 1.0;
        Self { probabilities }
    }
}

/// Argmax with ties going to the lowest class id, plus its probability.
pub fn predict(scores: &ClassScores) -> (ClassId, f32) {
    let mut best = 0;
    for (i, &p) in scores.probabilities.iter().enumerate().skip(1) {
        if p > scores.probabilities[best] {
            best = i;
        }
    }
    (ClassId::ALL[best], scores.probabilities[best])
}

/// Anything that turns a batch into per-patch class scores.
pub trait InstanceClassifier: Sync {
    fn classify(&self, batch: &Batch, exec: Execution) -> Result<Vec<ClassScores>>;
}

impl InstanceClassifier for Model {
    fn classify(&self, batch: &Batch, exec: Execution) -> Result<Vec<ClassScores>> {
        forward(self, batch, exec)
    }
}

impl Model {
    /// The reference architecture with seeded uniform weights.
    pub fn init_random(seed: u64) -> Self {
        Architecture::default()
            .init_random(seed)
            .expect("reference architecture is valid")
    }

    pub fn param_count(&self) -> usize {
        self.image_branch
            .iter()
            .chain(&self.stats_branch)
            .map(Layer::param_count)
            .sum::<usize>()
            + self.head.weight.len()
            + self.head.bias.len()
    }

    pub fn input_planes(&self) -> usize {
        self.meta.channels.plane_count()
    }

    fn check_patch(&self, patch: &Patch) -> Result<()> {
        if patch.channels != self.input_planes() || patch.side != self.meta.patch_side {
            return Err(Error::Contract(format!(
                "patch {}x{}x{} does not match model input {}x{}x{}",
                patch.channels,
                patch.side,
                patch.side,
                self.input_planes(),
                self.meta.patch_side,
                self.meta.patch_side
            )));
        }
        Ok(())
    }

    /// Image features followed by statistics features: the head's input.
    pub fn embed(&self, patch: &Patch) -> Result<Vec<f32>> {
        self.check_patch(patch)?;
        let mut t = Tensor::from_planes(patch.channels, patch.side, &patch.planes)?;
        let mut pooled: Option<Vec<f32>> = None;
        for layer in &self.image_branch {
            match (layer, pooled.as_mut()) {
                (Layer::Conv3x3(c), None) => t = ops::conv2d_3x3(&t, &c.weight, &c.bias)?,
                (Layer::Residual(r), None) => t = r.forward(&t)?,
                (Layer::Relu, None) => ops::relu_inplace(&mut t),
                (Layer::GlobalAvgPool, None) => pooled = Some(ops::global_avg_pool(&t)),
                (Layer::Relu, Some(v)) => ops::relu_slice(v),
                (Layer::Dense(d), Some(v)) => *v = d.forward(v)?,
                (l, _) => {
                    return Err(Error::Contract(format!(
                        "{} layer out of place in image branch",
                        l.kind().name()
                    )))
                }
            }
        }
        let mut features =
            pooled.ok_or_else(|| Error::Contract("image branch lacks global pooling".into()))?;
        let mut s = patch.stats.normalized().to_vec();
        for layer in &self.stats_branch {
            match layer {
                Layer::Dense(d) => s = d.forward(&s)?,
                Layer::Relu => ops::relu_slice(&mut s),
                l => {
                    return Err(Error::Contract(format!(
                        "{} layer in statistics branch",
                        l.kind().name()
                    )))
                }
            }
        }
        features.extend_from_slice(&s);
        Ok(features)
    }

    pub fn logits(&self, patch: &Patch) -> Result<Vec<f32>> {
        self.head.forward(&self.embed(patch)?)
    }
}

pub fn forward(model: &Model, batch: &Batch, exec: Execution) -> Result<Vec<ClassScores>> {
    par::map(&batch.patches, exec, |p| {
        ClassScores::from_logits(&model.logits(p)?)
    })
    .into_iter()
    .collect()
}

pub fn param_count(model: &Model) -> usize {
    model.param_count()
}
