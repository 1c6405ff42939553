//! The edge-reparameterized attention network.
//!
//! `head ConvL (3→C) → N × EARB → tail 3×3 conv (C→3) → + input`, clamped to
//! `[0, 1]` at inference. Each EARB computes
//!
//! ```text
//! u = ConvL(PReLU(KRM(x)))
//! y = x + SAM(u') ⊙ u'     where u' = CAM(u) ⊙ u
//! ```
//!
//! Parameter containers are generic over the parameter representation `P`
//! so one forward implementation serves plain tensors and tape variables.

use rand::Rng;

use crate::attention::{
    channel_attention_with, spatial_attention_with, Cam, CamWeights, MlpActivation, Sam,
    SamWeights, REDUCTION, SPATIAL_KERNEL,
};
use crate::autodiff::{Backend, Eager, Unary};
use crate::error::{ModelError, TensorError};
use crate::kirsch::EdgeOperator;
use crate::ops::conv::{Conv, ConvKernel};
use crate::ops::norm::{NormGroup, LAYER_NORM_EPS};
use crate::reparam::{
    fuse_krm, fused_macs_per_pixel, init_conv, krm_forward_training, krm_training_macs_per_pixel,
    EdgeBranch, Krm, KrmWeights, EXPANSION,
};
use crate::tensor::{Real, Tensor4};

/// Trunk width.
pub const CHANNELS: usize = 32;
/// Number of residual blocks.
pub const BLOCKS: usize = 5;
/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;
/// Image channels.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Mode {
    #[default]
    Training,
    Fused,
}

impl Mode {
    pub fn code(self) -> u8 {
        match self {
            Mode::Training => 0,
            Mode::Fused => 1,
        }
    }

    pub fn from_code(v: u8) -> Option<Self> {
        match v {
            0 => Some(Mode::Training),
            1 => Some(Mode::Fused),
            _ => None,
        }
    }
}

/// What sits in the convolution slot at the start of each block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// Multi-branch reparameterization block.
    #[default]
    Reparam,
    /// A single ordinary 3×3 convolution (ablation baseline).
    Plain,
}

/// Architecture and ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub channels: usize,
    pub blocks: usize,
    pub expansion: usize,
    pub reduction: usize,
    pub operator: EdgeOperator,
    pub block_kind: BlockKind,
    pub norm: NormGroup,
    pub cam_activation: MlpActivation,
    pub use_cam: bool,
    pub use_sam: bool,
    pub global_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: CHANNELS,
            blocks: BLOCKS,
            expansion: EXPANSION,
            reduction: REDUCTION,
            operator: EdgeOperator::Kirsch,
            block_kind: BlockKind::Reparam,
            norm: NormGroup::PerChannel,
            cam_activation: MlpActivation::Relu,
            use_cam: true,
            use_sam: true,
            global_residual: true,
        }
    }
}

impl ModelConfig {
    /// Two channels, two blocks: small enough for exhaustive gradient checks.
    pub fn toy() -> Self {
        Self {
            channels: 2,
            blocks: 2,
            reduction: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels == 0 {
            return Err(ModelError::Config("channel width must be positive".into()));
        }
        if self.expansion == 0 {
            return Err(ModelError::Config(
                "expansion factor must be positive".into(),
            ));
        }
        if self.use_cam && (self.reduction == 0 || self.channels % self.reduction != 0) {
            return Err(ModelError::Config(format!(
                "reduction ratio {} does not divide {} channels",
                self.reduction, self.channels
            )));
        }
        Ok(())
    }
}

/// `PReLU(LN(Conv(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvL<P> {
    pub conv: Conv<P>,
    pub gain: P,
    pub shift: P,
    pub slopes: P,
}

pub type ConvLWeights<T> = ConvL<Tensor4<T>>;

#[derive(Clone, Debug, PartialEq)]
pub enum BlockConv<P> {
    Reparam(Krm<P>),
    Fused(Conv<P>),
    Plain(Conv<P>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Earb<P> {
    pub conv: BlockConv<P>,
    /// PReLU slopes after the block convolution.
    pub act: P,
    pub convl: ConvL<P>,
    pub cam: Option<Cam<P>>,
    pub sam: Option<Sam<P>>,
}

pub type EarbWeights<T> = Earb<Tensor4<T>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Model<P> {
    pub head: ConvL<P>,
    pub blocks: Vec<Earb<P>>,
    pub tail: Conv<P>,
    pub config: ModelConfig,
    pub mode: Mode,
}

pub type EraNetModel<T> = Model<Tensor4<T>>;

type Named<'f, P, Q> = dyn FnMut(&str, &P) -> Q + 'f;

fn conv_named<P, Q>(prefix: &str, c: &Conv<P>, f: &mut Named<P, Q>) -> Conv<Q> {
    Conv {
        weight: f(&format!("{prefix}.weight"), &c.weight),
        bias: c.bias.as_ref().map(|b| f(&format!("{prefix}.bias"), b)),
    }
}

fn convl_named<P, Q>(prefix: &str, c: &ConvL<P>, f: &mut Named<P, Q>) -> ConvL<Q> {
    ConvL {
        conv: conv_named(&format!("{prefix}.conv"), &c.conv, f),
        gain: f(&format!("{prefix}.ln.gain"), &c.gain),
        shift: f(&format!("{prefix}.ln.shift"), &c.shift),
        slopes: f(&format!("{prefix}.prelu"), &c.slopes),
    }
}

fn krm_named<P, Q>(prefix: &str, k: &Krm<P>, f: &mut Named<P, Q>) -> Krm<Q> {
    Krm {
        normal: conv_named(&format!("{prefix}.normal"), &k.normal, f),
        expand: conv_named(&format!("{prefix}.expand"), &k.expand, f),
        squeeze: conv_named(&format!("{prefix}.squeeze"), &k.squeeze, f),
        operator: k.operator,
        edges: k
            .edges
            .iter()
            .enumerate()
            .map(|(j, e)| EdgeBranch {
                pre: conv_named(&format!("{prefix}.edge.{j}.pre"), &e.pre, f),
                scale: f(&format!("{prefix}.edge.{j}.scale"), &e.scale),
                bias: f(&format!("{prefix}.edge.{j}.bias"), &e.bias),
            })
            .collect(),
    }
}

fn earb_named<P, Q>(prefix: &str, e: &Earb<P>, f: &mut Named<P, Q>) -> Earb<Q> {
    Earb {
        conv: match &e.conv {
            BlockConv::Reparam(k) => BlockConv::Reparam(krm_named(&format!("{prefix}.krm"), k, f)),
            BlockConv::Fused(c) => BlockConv::Fused(conv_named(&format!("{prefix}.fused"), c, f)),
            BlockConv::Plain(c) => BlockConv::Plain(conv_named(&format!("{prefix}.plain"), c, f)),
        },
        act: f(&format!("{prefix}.act"), &e.act),
        convl: convl_named(&format!("{prefix}.convl"), &e.convl, f),
        cam: e.cam.as_ref().map(|c| Cam {
            reduce: f(&format!("{prefix}.cam.reduce"), &c.reduce),
            expand: f(&format!("{prefix}.cam.expand"), &c.expand),
            activation: c.activation,
        }),
        sam: e.sam.as_ref().map(|s| Sam {
            conv: conv_named(&format!("{prefix}.sam"), &s.conv, f),
        }),
    }
}

impl<P> Model<P> {
    /// Maps every parameter, in a fixed order, together with its name.
    pub fn map_named<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> Model<Q> {
        let f: &mut Named<P, Q> = f;
        Model {
            head: convl_named("head", &self.head, f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| earb_named(&format!("blocks.{i}"), b, f))
                .collect(),
            tail: conv_named("tail", &self.tail, f),
            config: self.config,
            mode: self.mode,
        }
    }

    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Model<Q> {
        self.map_named(&mut |_, p| f(p))
    }
}

/// Parameter count of one named layer group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub name: String,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub layers: Vec<LayerParams>,
    pub total: usize,
}

impl ParamReport {
    /// Size in bytes at single precision.
    pub fn bytes(&self) -> usize {
        self.total * 4
    }
}

fn layer_group(name: &str) -> &str {
    let depth = if name.starts_with("blocks.") { 3 } else { 1 };
    match name.match_indices('.').nth(depth - 1) {
        Some((i, _)) => &name[..i],
        None => name,
    }
}

fn convl_init<T: Real, R: Rng>(out_c: usize, in_c: usize, rng: &mut R) -> ConvLWeights<T> {
    ConvL {
        conv: init_conv(out_c, in_c, 3, true, rng),
        gain: Tensor4::full([1, out_c, 1, 1], T::one()),
        shift: Tensor4::zeros([1, out_c, 1, 1]),
        slopes: Tensor4::full([1, out_c, 1, 1], T::lit(PRELU_INIT)),
    }
}

fn convl_zeros<T: Real>(out_c: usize, in_c: usize) -> ConvLWeights<T> {
    ConvL {
        conv: ConvKernel::zeros(out_c, in_c, 3, true),
        gain: Tensor4::zeros([1, out_c, 1, 1]),
        shift: Tensor4::zeros([1, out_c, 1, 1]),
        slopes: Tensor4::zeros([1, out_c, 1, 1]),
    }
}

impl<T: Real> EraNetModel<T> {
    /// Training-mode model with fan-in uniform weights, zero biases, unit LN
    /// gains, PReLU slopes [`PRELU_INIT`] and edge scales 1/8.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let c = config.channels;
        let head = convl_init(c, IMAGE_CHANNELS, rng);
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let conv = match config.block_kind {
                BlockKind::Reparam => {
                    BlockConv::Reparam(KrmWeights::init(c, config.expansion, config.operator, rng))
                }
                BlockKind::Plain => BlockConv::Plain(init_conv(c, c, 3, true, rng)),
            };
            let act = Tensor4::full([1, c, 1, 1], T::lit(PRELU_INIT));
            let convl = convl_init(c, c, rng);
            let cam = if config.use_cam {
                let mut w = CamWeights::init(c, config.reduction, rng)?;
                w.activation = config.cam_activation;
                Some(w)
            } else {
                None
            };
            let sam = config.use_sam.then(|| SamWeights::init(rng));
            blocks.push(Earb {
                conv,
                act,
                convl,
                cam,
                sam,
            });
        }
        let tail = init_conv(IMAGE_CHANNELS, c, 3, true, rng);
        Ok(Model {
            head,
            blocks,
            tail,
            config,
            mode: Mode::Training,
        })
    }

    /// Training-mode model with every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let c = config.channels;
        let blocks = (0..config.blocks)
            .map(|_| -> Result<EarbWeights<T>, ModelError> {
                let conv = match config.block_kind {
                    BlockKind::Reparam => {
                        BlockConv::Reparam(KrmWeights::zeros(c, config.expansion, config.operator))
                    }
                    BlockKind::Plain => BlockConv::Plain(ConvKernel::zeros(c, c, 3, true)),
                };
                let cam = if config.use_cam {
                    let mut w = CamWeights::zeros(c, config.reduction)?;
                    w.activation = config.cam_activation;
                    Some(w)
                } else {
                    None
                };
                Ok(Earb {
                    conv,
                    act: Tensor4::zeros([1, c, 1, 1]),
                    convl: convl_zeros(c, c),
                    cam,
                    sam: config.use_sam.then(SamWeights::zeros),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Model {
            head: convl_zeros(c, IMAGE_CHANNELS),
            blocks,
            tail: ConvKernel::zeros(IMAGE_CHANNELS, c, 3, true),
            config,
            mode: Mode::Training,
        })
    }

    /// Parameters flattened in the canonical order.
    pub fn parameters(&self) -> Vec<Tensor4<T>> {
        let mut out = Vec::new();
        self.map(&mut |p| out.push(p.clone()));
        out
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor4<T>)> {
        let mut out = Vec::new();
        self.map_named(&mut |n, p| out.push((n.to_string(), p.clone())));
        out
    }

    /// Same architecture with parameters replaced, in canonical order.
    pub fn with_parameters(&self, params: &[Tensor4<T>]) -> Result<Self, TensorError> {
        let mut it = params.iter();
        let mut err = None;
        let m = self.map(&mut |p| match it.next() {
            Some(t) if t.shape() == p.shape() => t.clone(),
            other => {
                err.get_or_insert_with(|| match other {
                    Some(t) => TensorError::ShapeMismatch {
                        op: "with_parameters",
                        expected: p.shape(),
                        got: t.shape(),
                    },
                    None => TensorError::LengthMismatch {
                        what: "parameter list",
                        expected: 0,
                        got: params.len(),
                    },
                });
                p.clone()
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if it.next().is_some() {
            return Err(TensorError::LengthMismatch {
                what: "parameter list",
                expected: m.parameters().len(),
                got: params.len(),
            });
        }
        Ok(m)
    }

    pub fn cast<U: Real>(&self) -> EraNetModel<U> {
        self.map(&mut |p| p.cast())
    }

    pub fn param_report(&self) -> ParamReport {
        let mut layers: Vec<LayerParams> = Vec::new();
        self.map_named(&mut |name, p| {
            let group = layer_group(name);
            match layers.last_mut() {
                Some(l) if l.name == group => l.params += p.numel(),
                _ => layers.push(LayerParams {
                    name: group.to_string(),
                    params: p.numel(),
                }),
            }
        });
        let total = layers.iter().map(|l| l.params).sum();
        ParamReport { layers, total }
    }

    pub fn param_count(&self) -> usize {
        self.param_report().total
    }

    /// Inference forward: output clamped to `[0, 1]`.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>, ModelError> {
        eranet_forward(x, self)
    }
}

/// Analytic multiply count of one forward pass on an `h × w` image:
/// convolutions, the attention MLP and 7×7 map, and the two attention
/// gating products. Normalization and activations are not counted.
pub fn forward_macs(config: &ModelConfig, mode: Mode, h: usize, w: usize) -> u64 {
    let hw = (h * w) as u64;
    let c = config.channels as u64;
    let conv3 = |o: u64, i: u64| 9 * o * i * hw;
    let total = conv3(c, IMAGE_CHANNELS as u64) + conv3(IMAGE_CHANNELS as u64, c);
    let block_conv = match (config.block_kind, mode) {
        (BlockKind::Reparam, Mode::Training) => {
            krm_training_macs_per_pixel(
                config.channels,
                config.expansion,
                config.operator.branch_count(),
            ) * hw
        }
        _ => fused_macs_per_pixel(config.channels) * hw,
    };
    let mut block = block_conv + conv3(c, c);
    if config.use_cam {
        let hidden = c / config.reduction.max(1) as u64;
        block += 2 * 2 * hidden * c + c * hw;
    }
    if config.use_sam {
        block += 2 * (SPATIAL_KERNEL * SPATIAL_KERNEL) as u64 * hw + c * hw;
    }
    total + config.blocks as u64 * block
}

/// `PReLU(LN(Conv(x)))` on any backend.
pub fn convl_forward_with<T: Real, B: Backend<T>>(
    b: &mut B,
    x: &B::V,
    w: &ConvL<B::V>,
    norm: NormGroup,
) -> Result<B::V, TensorError> {
    let margin = b.value(&w.conv.weight).h() / 2;
    let y = b.conv2d(x, &w.conv.weight, w.conv.bias.as_ref(), margin)?;
    let y = b.layer_norm(&y, &w.gain, &w.shift, LAYER_NORM_EPS, norm)?;
    b.prelu(&y, &w.slopes)
}

/// One residual block; `index` only labels errors.
pub fn earb_forward_with<T: Real, B: Backend<T>>(
    b: &mut B,
    x: &B::V,
    w: &Earb<B::V>,
    norm: NormGroup,
    mode: Mode,
    index: usize,
) -> Result<B::V, ModelError> {
    let t = match (&w.conv, mode) {
        (BlockConv::Reparam(k), Mode::Training) => krm_forward_training(b, x, k)?,
        (BlockConv::Reparam(_), Mode::Fused) => return Err(ModelError::MissingFusedCache(index)),
        (BlockConv::Fused(_), Mode::Training) => {
            return Err(ModelError::MissingTrainingWeights(index))
        }
        (BlockConv::Fused(c), Mode::Fused) | (BlockConv::Plain(c), _) => {
            b.conv2d(x, &c.weight, c.bias.as_ref(), 1)?
        }
    };
    let t = b.prelu(&t, &w.act)?;
    let mut u = convl_forward_with(b, &t, &w.convl, norm)?;
    if let Some(cam) = &w.cam {
        let a = channel_attention_with(b, &u, cam)?;
        u = b.mul(&u, &a)?;
    }
    if let Some(sam) = &w.sam {
        let s = spatial_attention_with(b, &u, sam)?;
        u = b.mul(&u, &s)?;
    }
    Ok(b.add(x, &u)?)
}

/// Whole network without the output clamp (the training objective sees this).
pub fn forward_with<T: Real, B: Backend<T>>(
    b: &mut B,
    x: &B::V,
    m: &Model<B::V>,
) -> Result<B::V, ModelError> {
    let got = b.value(x).c();
    if got != IMAGE_CHANNELS {
        return Err(TensorError::ChannelMismatch {
            op: "eranet_forward",
            expected: IMAGE_CHANNELS,
            got,
        }
        .into());
    }
    let mut h = convl_forward_with(b, x, &m.head, m.config.norm)?;
    for (i, block) in m.blocks.iter().enumerate() {
        h = earb_forward_with(b, &h, block, m.config.norm, m.mode, i)?;
    }
    let mut y = b.conv2d(&h, &m.tail.weight, m.tail.bias.as_ref(), 1)?;
    if m.config.global_residual {
        y = b.add(&y, x)?;
    }
    Ok(y)
}

pub fn convl_forward<T: Real>(
    x: &Tensor4<T>,
    w: &ConvLWeights<T>,
    norm: NormGroup,
) -> Result<Tensor4<T>, TensorError> {
    convl_forward_with(&mut Eager, x, w, norm)
}

pub fn earb_forward<T: Real>(
    x: &Tensor4<T>,
    w: &EarbWeights<T>,
    norm: NormGroup,
    mode: Mode,
) -> Result<Tensor4<T>, ModelError> {
    earb_forward_with(&mut Eager, x, w, norm, mode, 0)
}

/// Inference forward, clamped to `[0, 1]`.
pub fn eranet_forward<T: Real>(
    x: &Tensor4<T>,
    m: &EraNetModel<T>,
) -> Result<Tensor4<T>, ModelError> {
    let y = forward_with(&mut Eager, x, m)?;
    Ok(Backend::<T>::unary(&mut Eager, Unary::Clamp(0.0, 1.0), &y))
}

/// Replaces every reparameterization block by its single fused convolution.
pub fn fuse_model<T: Real>(m: &EraNetModel<T>) -> Result<EraNetModel<T>, ModelError> {
    if m.mode == Mode::Fused {
        return Err(ModelError::AlreadyFused);
    }
    let blocks = m
        .blocks
        .iter()
        .map(|b| -> Result<EarbWeights<T>, ModelError> {
            let conv = match &b.conv {
                BlockConv::Reparam(k) => BlockConv::Fused(fuse_krm(k)?.kernel),
                other => other.clone(),
            };
            Ok(Earb { conv, ..b.clone() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Model {
        blocks,
        mode: Mode::Fused,
        ..m.clone()
    })
}
