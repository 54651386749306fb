//! Network building blocks: convolutions, the double-conv level block, the
//! pre-activation residual block, down/up transitions and the fused
//! sigmoid + binary cross-entropy loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Element, GradFn, Tensor};

/// What a [`LayerSpec`] builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    /// Two `conv -> (norm) -> ReLU` stages.
    ConvBlock,
    /// `x + F(x)` with a pre-activation branch, projecting the shortcut when
    /// the channel count changes.
    ResidualBlock,
    /// Max pooling.
    Down,
    /// Transposed convolution.
    Up,
    /// A single convolution followed by ReLU.
    Conv,
    /// Pointwise convolution to one logit channel.
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Optional normalization inside conv stages.
///
/// With one volume per batch, batch statistics reduce to per-channel
/// statistics over the spatial extent, so the only variant offered is
/// instance normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    #[default]
    None,
    Instance,
}

/// Declarative description of one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    /// Stride for `Down`/`Up`; ignored elsewhere (stride 1).
    pub stride: [usize; 3],
    /// Zero padding for `Conv`; `ConvBlock`/`ResidualBlock` always use
    /// `kernel / 2`.
    pub padding: [usize; 3],
    pub activation: Activation,
}

/// Shape and initialization scale of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `+-sqrt(6 / fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        let (kernel, stride) = match kind {
            LayerKind::Down | LayerKind::Up => ([2; 3], [2; 3]),
            LayerKind::Head => ([1; 3], [1; 3]),
            _ => ([3; 3], [1; 3]),
        };
        Self {
            name: name.into(),
            kind,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: [0; 3],
            activation: match kind {
                LayerKind::Head | LayerKind::Down | LayerKind::Up => Activation::Identity,
                _ => Activation::Relu,
            },
        }
    }

    pub fn with_kernel(mut self, kernel: [usize; 3]) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    fn same_padding(&self) -> [usize; 3] {
        self.kernel.map(|k| k / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("layer `{}` has a zero channel count", self.name)));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::Config(format!("layer `{}` has a zero kernel or stride", self.name)));
        }
        if matches!(self.kind, LayerKind::ConvBlock | LayerKind::ResidualBlock) && self.kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "layer `{}`: extent-preserving blocks need odd kernels, got {:?}",
                self.name, self.kernel
            )));
        }
        if self.kind == LayerKind::Down && self.in_channels != self.out_channels {
            return Err(Error::Config(format!("pooling layer `{}` cannot change channels", self.name)));
        }
        Ok(())
    }

    /// Parameter tensors this layer owns, in a stable order.
    pub fn params(&self, norm: Norm) -> Vec<ParamSpec> {
        let k = self.kernel;
        let kvol: usize = k.iter().product();
        let conv = |name: String, cin: usize, cout: usize, kernel: [usize; 3]| {
            let kv: usize = kernel.iter().product();
            vec![
                ParamSpec {
                    name: format!("{name}.weight"),
                    shape: vec![cout, cin, kernel[0], kernel[1], kernel[2]],
                    init: Init::FanIn(cin * kv),
                },
                ParamSpec {
                    name: format!("{name}.bias"),
                    shape: vec![cout],
                    init: Init::Zeros,
                },
            ]
        };
        let norm_params = |name: String, c: usize| match norm {
            Norm::None => vec![],
            Norm::Instance => vec![
                ParamSpec {
                    name: format!("{name}.gamma"),
                    shape: vec![c],
                    init: Init::Ones,
                },
                ParamSpec {
                    name: format!("{name}.beta"),
                    shape: vec![c],
                    init: Init::Zeros,
                },
            ],
        };
        let n = &self.name;
        let (cin, cout) = (self.in_channels, self.out_channels);
        match self.kind {
            LayerKind::ConvBlock => {
                let mut v = conv(format!("{n}.conv1"), cin, cout, k);
                v.extend(norm_params(format!("{n}.norm1"), cout));
                v.extend(conv(format!("{n}.conv2"), cout, cout, k));
                v.extend(norm_params(format!("{n}.norm2"), cout));
                v
            }
            LayerKind::ResidualBlock => {
                let mut v = norm_params(format!("{n}.norm1"), cin);
                v.extend(conv(format!("{n}.conv1"), cin, cout, k));
                v.extend(norm_params(format!("{n}.norm2"), cout));
                v.extend(conv(format!("{n}.conv2"), cout, cout, k));
                if cin != cout {
                    v.extend(conv(format!("{n}.proj"), cin, cout, [1; 3]));
                }
                v
            }
            LayerKind::Down => vec![],
            LayerKind::Up => {
                // each output voxel receives cin * kvol / prod(stride) terms
                let fan_in = (cin * kvol / self.stride.iter().product::<usize>()).max(1);
                vec![
                    ParamSpec {
                        name: format!("{n}.weight"),
                        shape: vec![cin, cout, k[0], k[1], k[2]],
                        init: Init::FanIn(fan_in),
                    },
                    ParamSpec {
                        name: format!("{n}.bias"),
                        shape: vec![cout],
                        init: Init::Zeros,
                    },
                ]
            }
            LayerKind::Conv | LayerKind::Head => conv(n.clone(), cin, cout, k),
        }
    }
}

// ---------------------------------------------------------------------------
// instantiated layers

/// Looks up parameters by name while instantiating layers.
pub trait ParamLookup<T: Element> {
    fn param(&self, name: &str) -> Result<Tensor<T>>;
}

#[derive(Clone, Debug)]
pub struct Conv3d<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl<T: Element> Conv3d<T> {
    fn load(params: &impl ParamLookup<T>, name: &str, stride: [usize; 3], padding: [usize; 3]) -> Result<Self> {
        Ok(Self {
            weight: params.param(&format!("{name}.weight"))?,
            bias: Some(params.param(&format!("{name}.bias"))?),
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::conv3d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm<T: Element> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
}

impl<T: Element> InstanceNorm<T> {
    fn load(params: &impl ParamLookup<T>, name: &str, norm: Norm) -> Result<Option<Self>> {
        Ok(match norm {
            Norm::None => None,
            Norm::Instance => Some(Self {
                gamma: params.param(&format!("{name}.gamma"))?,
                beta: params.param(&format!("{name}.beta"))?,
            }),
        })
    }
}

fn maybe_norm<T: Element>(norm: &Option<InstanceNorm<T>>, x: Tensor<T>) -> Result<Tensor<T>> {
    match norm {
        Some(n) => instance_norm(&x, &n.gamma, &n.beta),
        None => Ok(x),
    }
}

/// One instantiated layer from a [`LayerSpec`].
#[derive(Clone, Debug)]
pub enum Layer<T: Element> {
    ConvBlock {
        conv1: Conv3d<T>,
        norm1: Option<InstanceNorm<T>>,
        conv2: Conv3d<T>,
        norm2: Option<InstanceNorm<T>>,
    },
    Residual(ResidualBlock<T>),
    Down {
        kernel: [usize; 3],
        stride: [usize; 3],
    },
    Up(UpConv<T>),
    Conv {
        conv: Conv3d<T>,
        activation: Activation,
    },
}

#[derive(Clone, Debug)]
pub struct ResidualBlock<T: Element> {
    norm1: Option<InstanceNorm<T>>,
    conv1: Conv3d<T>,
    norm2: Option<InstanceNorm<T>>,
    conv2: Conv3d<T>,
    proj: Option<Conv3d<T>>,
}

impl<T: Element> ResidualBlock<T> {
    /// `shortcut(x) + conv2(relu(norm2(conv1(relu(norm1(x))))))`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = maybe_norm(&self.norm1, x.clone())?.relu();
        let h = self.conv1.forward(&h)?;
        let h = maybe_norm(&self.norm2, h)?.relu();
        let h = self.conv2.forward(&h)?;
        let shortcut = match &self.proj {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        shortcut.add(&h)
    }

    pub fn has_projection(&self) -> bool {
        self.proj.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct UpConv<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: [usize; 3],
}

impl<T: Element> UpConv<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::conv3d_transposed(x, &self.weight, Some(&self.bias), self.stride)
    }
}

impl<T: Element> Layer<T> {
    pub fn build(spec: &LayerSpec, norm: Norm, params: &impl ParamLookup<T>) -> Result<Self> {
        spec.validate()?;
        let n = &spec.name;
        let same = spec.same_padding();
        Ok(match spec.kind {
            LayerKind::ConvBlock => Layer::ConvBlock {
                conv1: Conv3d::load(params, &format!("{n}.conv1"), [1; 3], same)?,
                norm1: InstanceNorm::load(params, &format!("{n}.norm1"), norm)?,
                conv2: Conv3d::load(params, &format!("{n}.conv2"), [1; 3], same)?,
                norm2: InstanceNorm::load(params, &format!("{n}.norm2"), norm)?,
            },
            LayerKind::ResidualBlock => Layer::Residual(ResidualBlock {
                norm1: InstanceNorm::load(params, &format!("{n}.norm1"), norm)?,
                conv1: Conv3d::load(params, &format!("{n}.conv1"), [1; 3], same)?,
                norm2: InstanceNorm::load(params, &format!("{n}.norm2"), norm)?,
                conv2: Conv3d::load(params, &format!("{n}.conv2"), [1; 3], same)?,
                proj: if spec.in_channels != spec.out_channels {
                    Some(Conv3d::load(params, &format!("{n}.proj"), [1; 3], [0; 3])?)
                } else {
                    None
                },
            }),
            LayerKind::Down => Layer::Down {
                kernel: spec.kernel,
                stride: spec.stride,
            },
            LayerKind::Up => Layer::Up(UpConv {
                weight: params.param(&format!("{n}.weight"))?,
                bias: params.param(&format!("{n}.bias"))?,
                stride: spec.stride,
            }),
            LayerKind::Conv | LayerKind::Head => Layer::Conv {
                conv: Conv3d::load(params, n, [1; 3], spec.padding)?,
                activation: spec.activation,
            },
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::ConvBlock {
                conv1,
                norm1,
                conv2,
                norm2,
            } => {
                let h = maybe_norm(norm1, conv1.forward(x)?)?.relu();
                Ok(maybe_norm(norm2, conv2.forward(&h)?)?.relu())
            }
            Layer::Residual(block) => block.forward(x),
            Layer::Down { kernel, stride } => Ok(tensor::maxpool3d(x, *kernel, *stride)?.0),
            Layer::Up(up) => up.forward(x),
            Layer::Conv { conv, activation } => {
                let y = conv.forward(x)?;
                Ok(match activation {
                    Activation::Relu => y.relu(),
                    Activation::Identity => y,
                })
            }
        }
    }
}

/// A run of layers applied in order.
#[derive(Clone, Debug)]
pub struct Sequential<T: Element> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Element> Sequential<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }
}

// ---------------------------------------------------------------------------
// U-Net levels

/// One level of the contracting path: a feature stack whose output is kept
/// for the skip connection, then an optional pooling step.
#[derive(Clone, Debug)]
pub struct EncoderLevel<T: Element> {
    pub features: Sequential<T>,
    pub pool: Option<([usize; 3], [usize; 3])>,
}

impl<T: Element> EncoderLevel<T> {
    /// Returns `(next-level input, skip activation)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let skip = self.features.forward(x)?;
        let down = match self.pool {
            Some((k, s)) => tensor::maxpool3d(&skip, k, s)?.0,
            None => skip.clone(),
        };
        Ok((down, skip))
    }
}

/// One level of the expansive path: upsample, concatenate the skip, then a
/// feature stack.
#[derive(Clone, Debug)]
pub struct DecoderLevel<T: Element> {
    pub up: UpConv<T>,
    pub features: Sequential<T>,
}

impl<T: Element> DecoderLevel<T> {
    pub fn forward(&self, x: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
        let up = self.up.forward(x)?;
        if up.shape()[2..] != skip.shape()[2..] {
            return Err(Error::dim(
                "unet_level_forward",
                format!(
                    "upsampled extents {:?} do not match skip extents {:?}",
                    &up.shape()[2..],
                    &skip.shape()[2..]
                ),
            ));
        }
        let h = tensor::concat_channels(&up, skip)?;
        self.features.forward(&h)
    }
}

// ---------------------------------------------------------------------------
// instance normalization

struct InstanceNormBackward<T: Element> {
    input: Tensor<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

const NORM_EPS: f64 = 1e-5;

impl<T: Element> GradFn<T> for InstanceNormBackward<T> {
    fn name(&self) -> &'static str {
        "instance_norm"
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone(), self.gamma.clone(), self.beta.clone()]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T]) {
        let s = self.input.shape();
        let (c, vol) = (s[1], s[2..].iter().product::<usize>());
        let planes = s[0] * c;
        let gamma = self.gamma.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); self.input.numel()];
        let m = T::from_f64_lossy(vol as f64);
        for p in 0..planes {
            let ch = p % c;
            let r = p * vol..(p + 1) * vol;
            let (g, xh) = (&grad[r.clone()], &self.xhat[r.clone()]);
            let sum_g: T = g.iter().copied().sum();
            let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            dgamma[ch] = dgamma[ch] + sum_gx;
            dbeta[ch] = dbeta[ch] + sum_g;
            let k = gamma[ch] * self.inv_std[p];
            for ((d, &gi), &xi) in dx[r].iter_mut().zip(g).zip(xh) {
                *d = k * (gi - sum_g / m - xi * sum_gx / m);
            }
        }
        self.input.accumulate_grad(&dx);
        self.gamma.accumulate_grad(&dgamma);
        self.beta.accumulate_grad(&dbeta);
    }
}

/// Per-sample, per-channel normalization over the spatial extent with a
/// learned affine transform.
pub fn instance_norm<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 3 || gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
        return Err(Error::shape(
            "instance_norm",
            format!("input {s:?} with gamma {:?} and beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let (c, vol) = (s[1], s[2..].iter().product::<usize>());
    let planes = s[0] * c;
    let m = T::from_f64_lossy(vol as f64);
    let eps = T::from_f64_lossy(NORM_EPS);
    let data = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut xhat = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(planes);
    for p in 0..planes {
        let ch = p % c;
        let r = p * vol..(p + 1) * vol;
        let xs = &data[r.clone()];
        let mean = xs.iter().copied().sum::<T>() / m;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r]).zip(xs) {
            *h = (v - mean) * is;
            *o = gd[ch] * *h + bd[ch];
        }
    }
    drop(data);
    Ok(Tensor::from_op(
        s.to_vec(),
        out,
        InstanceNormBackward {
            input: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat,
            inv_std,
        },
    ))
}

// ---------------------------------------------------------------------------
// loss

struct BceBackward<T: Element> {
    logits: Tensor<T>,
    targets: Vec<T>,
}

impl<T: Element> GradFn<T> for BceBackward<T> {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.logits.clone()]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T]) {
        let scale = grad[0] / T::from_f64_lossy(self.targets.len() as f64);
        let z = self.logits.data();
        self.logits.with_grad_mut(|gz| {
            for ((g, &zi), &p) in gz.iter_mut().zip(z.iter()).zip(&self.targets) {
                *g = *g + (tensor::sigmoid_scalar(zi) - p) * scale;
            }
        });
    }
}

/// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
///
/// Evaluated as `max(z, 0) - z p + log(1 + exp(-|z|))`, which never
/// overflows. Targets may be fractional (averaged annotations) but must lie
/// in `[0, 1]`.
pub fn bce_with_logits<T: Element>(logits: &Tensor<T>, targets: &[T]) -> Result<Tensor<T>> {
    if targets.len() != logits.numel() {
        return Err(Error::shape(
            "bce_with_logits",
            format!("{} targets for logits of shape {:?}", targets.len(), logits.shape()),
        ));
    }
    if let Some(bad) = targets.iter().find(|&&p| !(p >= T::zero() && p <= T::one())) {
        return Err(Error::InvalidValue(format!("target {bad} outside [0, 1]")));
    }
    let sum: T = logits
        .data()
        .iter()
        .zip(targets)
        .map(|(&z, &p)| z.max(T::zero()) - z * p + (-z.abs()).exp().ln_1p())
        .sum();
    let loss = sum / T::from_f64_lossy(targets.len() as f64);
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        BceBackward {
            logits: logits.clone(),
            targets: targets.to_vec(),
        },
    ))
}
