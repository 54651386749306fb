//! The three network variants and their parameter bookkeeping.
//!
//! * [`Variant::M1`]: a small 3D U-Net. Each level is a double
//!   `conv -> ReLU` block; levels are joined by 2x max pooling on the way
//!   down and by 2x transposed convolution plus skip concatenation on the
//!   way up.
//! * [`Variant::M2`]: the same network with a residual block appended to
//!   every level.
//! * [`Variant::M3`]: a residual encoder-decoder over a stack of nine
//!   adjacent slices that pools only in-plane, collapses the slice axis with
//!   a `9x1x1` convolution and emits logits for the centre slice.
//!
//! A [`ModelConfig`] expands into an [`Architecture`] (a tree of
//! [`LayerSpec`]s), the architecture into an ordered parameter layout, and
//! the layout plus a seed into a [`Model`].

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    DecoderLevel, EncoderLevel, Init, Layer, LayerKind, LayerSpec, Norm, ParamLookup, ParamSpec, Sequential,
};
use crate::tensor::{self, Element, Tensor};

/// Number of adjacent slices the slice-stack model consumes.
pub const SLICE_STACK: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    M1,
    M2,
    M3,
}

impl Variant {
    /// Whether the model segments a whole volume in one pass (as opposed to
    /// one slice per pass).
    pub fn is_volumetric(self) -> bool {
        !matches!(self, Variant::M3)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::M1 => "m1",
            Variant::M2 => "m2",
            Variant::M3 => "m3",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(Variant::M1),
            "m2" => Ok(Variant::M2),
            "m3" => Ok(Variant::M3),
            other => Err(Error::Config(format!("unknown model variant `{other}` (expected m1, m2 or m3)"))),
        }
    }
}

/// Architecture hyperparameters.
///
/// `input_extents` follows the volume convention `[X, Y, Z]` (X fastest); for
/// [`Variant::M3`] the Z extent is the slice stack and must equal
/// [`SLICE_STACK`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub levels: usize,
    pub base_channels: usize,
    pub growth: usize,
    pub kernel: usize,
    pub input_extents: [usize; 3],
    #[serde(default)]
    pub norm: Norm,
    /// Start the logit head at exactly zero (all logits 0 before training).
    #[serde(default)]
    pub zero_head: bool,
}

impl ModelConfig {
    /// Three levels, 3x3x3 kernels, channels doubling per level.
    pub fn new(variant: Variant, base_channels: usize, input_extents: [usize; 3]) -> Self {
        Self {
            variant,
            levels: 3,
            base_channels,
            growth: 2,
            kernel: 3,
            input_extents,
            norm: Norm::None,
            zero_head: false,
        }
    }

    /// Defaults at the reference input size: 160x188x49 volumes for M1/M2,
    /// 321x376 nine-slice stacks for M3.
    pub fn default_for(variant: Variant) -> Self {
        match variant {
            Variant::M1 | Variant::M2 => Self::new(variant, 8, [160, 188, 49]),
            Variant::M3 => Self::new(variant, 8, [321, 376, SLICE_STACK]),
        }
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        self.levels = levels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("levels must be at least 2, got {}", self.levels)));
        }
        if self.base_channels == 0 || self.growth == 0 {
            return Err(Error::Config("base_channels and growth must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.input_extents.contains(&0) {
            return Err(Error::Config(format!("input extents must be positive, got {:?}", self.input_extents)));
        }
        if self.variant == Variant::M3 && self.input_extents[2] != SLICE_STACK {
            return Err(Error::Config(format!(
                "the slice-stack model takes exactly {SLICE_STACK} slices, got {}",
                self.input_extents[2]
            )));
        }
        if self.levels > 16 || self.channels(self.levels - 1).is_none() {
            return Err(Error::Config("channel schedule overflows".into()));
        }
        Ok(())
    }

    /// `base * growth^level`.
    pub fn channels(&self, level: usize) -> Option<usize> {
        self.growth
            .checked_pow(level as u32)
            .and_then(|g| g.checked_mul(self.base_channels))
    }

    fn ch(&self, level: usize) -> usize {
        self.channels(level).expect("validated channel schedule")
    }

    /// Pooling window per tensor axis `[D, H, W]`.
    pub fn pool(&self) -> [usize; 3] {
        match self.variant {
            Variant::M3 => [1, 2, 2],
            _ => [2, 2, 2],
        }
    }

    /// Tensor-axis extents `[D, H, W]` the input is zero-padded to so every
    /// pooling step divides evenly.
    pub fn padded_extents(&self) -> [usize; 3] {
        let [x, y, z] = self.input_extents;
        let pool = self.pool();
        let ext = [z, y, x];
        std::array::from_fn(|ax| {
            let m = pool[ax].pow(self.levels as u32 - 1);
            ext[ax].div_ceil(m) * m
        })
    }

    /// Input tensor shape `[1, 1, Z, Y, X]`.
    pub fn input_shape(&self) -> [usize; 5] {
        let [x, y, z] = self.input_extents;
        [1, 1, z, y, x]
    }

    /// Logit tensor shape: the input shape for volumetric models, a single
    /// slice for the slice-stack model.
    pub fn output_shape(&self) -> [usize; 5] {
        let [x, y, z] = self.input_extents;
        match self.variant {
            Variant::M3 => [1, 1, 1, y, x],
            _ => [1, 1, z, y, x],
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        self.validate()?;
        let k = [self.kernel; 3];
        let pool = self.pool();
        let levels = self.levels;
        let res = |name: String, cin, cout| LayerSpec::new(name, LayerKind::ResidualBlock, cin, cout).with_kernel(k);
        let block = |name: String, cin, cout| LayerSpec::new(name, LayerKind::ConvBlock, cin, cout).with_kernel(k);
        let up = |l: usize| {
            LayerSpec::new(format!("dec{l}.up"), LayerKind::Up, self.ch(l + 1), self.ch(l))
                .with_kernel(pool)
                .with_stride(pool)
        };
        let mut encoder = Vec::with_capacity(levels);
        let mut decoder = Vec::with_capacity(levels - 1);
        let mut tail = Vec::new();
        match self.variant {
            Variant::M1 | Variant::M2 => {
                let residual = self.variant == Variant::M2;
                let mut cin = 1;
                for l in 0..levels {
                    let c = self.ch(l);
                    let mut layers = vec![block(format!("enc{l}.block"), cin, c)];
                    if residual {
                        layers.push(res(format!("enc{l}.res"), c, c));
                    }
                    encoder.push(layers);
                    cin = c;
                }
                for l in (0..levels - 1).rev() {
                    let c = self.ch(l);
                    let mut layers = vec![block(format!("dec{l}.block"), 2 * c, c)];
                    if residual {
                        layers.push(res(format!("dec{l}.res"), c, c));
                    }
                    decoder.push((up(l), layers));
                }
            }
            Variant::M3 => {
                let c0 = self.ch(0);
                let stem = LayerSpec::new("stem", LayerKind::Conv, 1, c0)
                    .with_kernel(k)
                    .with_padding([self.kernel / 2; 3]);
                encoder.push(vec![stem, res("enc0.res".into(), c0, c0)]);
                for l in 1..levels {
                    encoder.push(vec![res(format!("enc{l}.res"), self.ch(l - 1), self.ch(l))]);
                }
                for l in (0..levels - 1).rev() {
                    let c = self.ch(l);
                    decoder.push((up(l), vec![res(format!("dec{l}.res"), 2 * c, c)]));
                }
                tail.push(LayerSpec::new("collapse", LayerKind::Conv, c0, c0).with_kernel([SLICE_STACK, 1, 1]));
            }
        }
        tail.push(LayerSpec::new("head", LayerKind::Head, self.ch(0), 1));
        Ok(Architecture {
            encoder,
            pool,
            decoder,
            tail,
        })
    }

    /// Ordered parameter layout without allocating any weights.
    pub fn param_layout(&self) -> Result<Vec<ParamSpec>> {
        let arch = self.architecture()?;
        let mut specs: Vec<ParamSpec> = arch.layers().flat_map(|l| l.params(self.norm)).collect();
        if self.zero_head {
            for p in specs.iter_mut().filter(|p| p.name.starts_with("head.")) {
                p.init = Init::Zeros;
            }
        }
        Ok(specs)
    }

    /// Parameter total implied by the configuration.
    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.param_layout()?.iter().map(ParamSpec::numel).sum())
    }
}

/// Layer tree of one configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Feature layers of each contracting level, shallowest first. Every
    /// level but the last is followed by pooling.
    pub encoder: Vec<Vec<LayerSpec>>,
    pub pool: [usize; 3],
    /// Expansive levels, deepest first: the up-convolution and the layers
    /// applied after skip concatenation.
    pub decoder: Vec<(LayerSpec, Vec<LayerSpec>)>,
    /// Layers after the last expansive level, ending in the logit head.
    pub tail: Vec<LayerSpec>,
}

impl Architecture {
    /// Every layer in forward order.
    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.encoder
            .iter()
            .flatten()
            .chain(self.decoder.iter().flat_map(|(up, rest)| std::iter::once(up).chain(rest)))
            .chain(&self.tail)
    }
}

/// Named parameter tensors in layout order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Element> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    fn new(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (name, _)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate parameter name `{name}`")));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }
}

impl<T: Element> ParamLookup<T> for ParamStore<T> {
    fn param(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }
}

/// An instantiated network.
#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: Vec<EncoderLevel<T>>,
    decoder: Vec<DecoderLevel<T>>,
    tail: Sequential<T>,
}

impl<T: Element> Model<T> {
    /// Builds the network with fan-in scaled uniform weights
    /// (`+-sqrt(6 / fan_in)`) and zero biases drawn from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let layout = config.param_layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = layout
            .iter()
            .map(|p| {
                let data: Vec<T> = match p.init {
                    Init::Zeros => vec![T::zero(); p.numel()],
                    Init::Ones => vec![T::one(); p.numel()],
                    Init::FanIn(fan_in) => {
                        let bound = (6.0 / fan_in as f64).sqrt();
                        (0..p.numel())
                            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                            .collect()
                    }
                };
                Ok((p.name.clone(), Tensor::parameter(&p.shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(config.clone(), entries)
    }

    /// Rebuilds a model from stored parameter values, checking that names
    /// and shapes match the configuration's layout exactly.
    pub fn from_parameters(config: &ModelConfig, values: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<Self> {
        let layout = config.param_layout()?;
        if layout.len() != values.len() {
            return Err(Error::Config(format!(
                "configuration expects {} parameter tensors, got {}",
                layout.len(),
                values.len()
            )));
        }
        let entries = layout
            .iter()
            .zip(values)
            .map(|(spec, (name, shape, data))| {
                if spec.name != name || spec.shape != shape {
                    return Err(Error::Config(format!(
                        "parameter `{name}` {shape:?} does not match expected `{}` {:?}",
                        spec.name, spec.shape
                    )));
                }
                Ok((name, Tensor::parameter(&shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(config.clone(), entries)
    }

    fn assemble(config: ModelConfig, entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let params = ParamStore::new(entries)?;
        let arch = config.architecture()?;
        let seq = |specs: &[LayerSpec]| -> Result<Sequential<T>> {
            Ok(Sequential {
                layers: specs
                    .iter()
                    .map(|s| Layer::build(s, config.norm, &params))
                    .collect::<Result<_>>()?,
            })
        };
        let last = arch.encoder.len() - 1;
        let encoder = arch
            .encoder
            .iter()
            .enumerate()
            .map(|(l, specs)| {
                Ok(EncoderLevel {
                    features: seq(specs)?,
                    pool: (l < last).then_some((arch.pool, arch.pool)),
                })
            })
            .collect::<Result<_>>()?;
        let decoder = arch
            .decoder
            .iter()
            .map(|(up, specs)| {
                let Layer::Up(up) = Layer::build(up, config.norm, &params)? else {
                    unreachable!("decoder levels start with an up-convolution")
                };
                Ok(DecoderLevel::<T> {
                    up,
                    features: seq(specs)?,
                })
            })
            .collect::<Result<_>>()?;
        let tail = seq(&arch.tail)?;
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            tail,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        count_parameters(self)
    }

    /// Logits for an input of shape [`ModelConfig::input_shape`].
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let expect = self.config.input_shape();
        if input.shape() != expect {
            return Err(Error::shape(
                "forward",
                format!("model expects input {expect:?}, got {:?}", input.shape()),
            ));
        }
        let mut h = tensor::pad_spatial(input, self.config.padded_extents())?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            let (down, skip) = level.forward(&h)?;
            skips.push(skip);
            h = down;
        }
        for (level, skip) in self.decoder.iter().zip(skips.iter().rev().skip(1)) {
            h = level.forward(&h, skip)?;
        }
        let h = self.tail.forward(&h)?;
        let out = self.config.output_shape();
        tensor::crop_spatial(&h, [out[2], out[3], out[4]])
    }

    /// Plain-text ledger: one line per parameter tensor with its shape and
    /// element count, then the total.
    pub fn describe(&self) -> String {
        describe_layout(
            &self.config,
            self.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())),
        )
    }
}

/// Total number of scalar parameters.
pub fn count_parameters<T: Element>(model: &Model<T>) -> usize {
    model.params.iter().map(|(_, t)| t.numel()).sum()
}

fn describe_layout(config: &ModelConfig, entries: impl Iterator<Item = (String, Vec<usize>)>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# model {} levels={} base={} growth={} kernel={} norm={:?} input={}x{}x{}",
        config.variant,
        config.levels,
        config.base_channels,
        config.growth,
        config.kernel,
        config.norm,
        config.input_extents[0],
        config.input_extents[1],
        config.input_extents[2],
    );
    let mut total = 0;
    for (name, shape) in entries {
        let n: usize = shape.iter().product();
        total += n;
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{name}\t{}\t{n}", dims.join("x"));
    }
    let _ = writeln!(out, "total\t\t{total}");
    out
}

/// The `describe` ledger straight from a configuration, without building
/// weights (usable at full scale).
pub fn describe_config(config: &ModelConfig) -> Result<String> {
    let layout = config.param_layout()?;
    Ok(describe_layout(config, layout.into_iter().map(|p| (p.name, p.shape))))
}

/// One candidate found by [`search_parameter_count`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SearchHit {
    pub config: ModelConfig,
    pub count: usize,
    pub gap: i64,
}

/// Enumerates `levels x base_channels x norm` for a variant and returns the
/// configurations whose parameter count is nearest `target`, best first.
pub fn search_parameter_count(
    variant: Variant,
    target: usize,
    levels: std::ops::RangeInclusive<usize>,
    base_channels: std::ops::RangeInclusive<usize>,
    keep: usize,
) -> Vec<SearchHit> {
    let mut hits = Vec::new();
    for l in levels {
        for base in base_channels.clone() {
            for norm in [Norm::None, Norm::Instance] {
                let mut cfg = ModelConfig::default_for(variant).with_levels(l);
                cfg.base_channels = base;
                cfg.norm = norm;
                if let Ok(count) = cfg.parameter_count() {
                    hits.push(SearchHit {
                        gap: count as i64 - target as i64,
                        config: cfg,
                        count,
                    });
                }
            }
        }
    }
    hits.sort_by_key(|h| (h.gap.unsigned_abs(), h.config.levels, h.config.base_channels));
    hits.truncate(keep);
    hits
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(config: &ModelConfig, seed: u64) -> Tensor<f64> {
        let shape = config.input_shape();
        let n = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn m1_preserves_spatial_extent() {
        let cfg = ModelConfig::new(Variant::M1, 4, [32, 32, 16]);
        let m = Model::<f32>::build(&cfg, 0).unwrap();
        let x = Tensor::zeros(&cfg.input_shape());
        assert_eq!(m.forward(&x).unwrap().shape(), &[1, 1, 16, 32, 32]);
    }

    #[test]
    fn non_divisible_extents_are_padded_and_cropped() {
        let cfg = ModelConfig::new(Variant::M2, 2, [13, 10, 7]);
        assert_eq!(cfg.padded_extents(), [8, 12, 16]);
        let m = Model::<f64>::build(&cfg, 1).unwrap();
        assert_eq!(m.forward(&input(&cfg, 0)).unwrap().shape(), &[1, 1, 7, 10, 13]);
    }

    #[test]
    fn m3_emits_one_slice() {
        let cfg = ModelConfig::new(Variant::M3, 2, [20, 18, 9]);
        let m = Model::<f64>::build(&cfg, 1).unwrap();
        assert_eq!(m.forward(&input(&cfg, 0)).unwrap().shape(), &[1, 1, 1, 18, 20]);
        let bad = ModelConfig::new(Variant::M3, 2, [20, 18, 7]);
        assert!(matches!(Model::<f64>::build(&bad, 1), Err(Error::Config(_))));
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let cfg = ModelConfig::new(Variant::M1, 2, [8, 8, 4]);
        let m = Model::<f64>::build(&cfg, 1).unwrap();
        let x = Tensor::zeros(&[1, 1, 4, 8, 9]);
        assert!(matches!(m.forward(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::new(Variant::M2, 3, [8, 8, 8]);
        let a = Model::<f32>::build(&cfg, 42).unwrap();
        let b = Model::<f32>::build(&cfg, 42).unwrap();
        let c = Model::<f32>::build(&cfg, 43).unwrap();
        let flat = |m: &Model<f32>| m.params().iter().flat_map(|(_, t)| t.to_vec()).collect::<Vec<_>>();
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::new(Variant::M1, 2, [8, 8, 8]);
        cfg.levels = 1;
        assert!(cfg.validate().is_err());
        cfg.levels = 3;
        cfg.base_channels = 0;
        assert!(cfg.validate().is_err());
        cfg.base_channels = 2;
        cfg.kernel = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn layout_and_built_model_agree() {
        for variant in [Variant::M1, Variant::M2, Variant::M3] {
            let mut cfg = ModelConfig::default_for(variant);
            cfg.base_channels = 2;
            cfg.input_extents = [8, 8, if variant == Variant::M3 { 9 } else { 8 }];
            let m = Model::<f32>::build(&cfg, 0).unwrap();
            assert_eq!(m.parameter_count(), cfg.parameter_count().unwrap());
            assert_eq!(m.describe(), describe_config(&cfg).unwrap());
        }
    }

    #[test]
    fn parameter_names_are_unique() {
        let cfg = ModelConfig::default_for(Variant::M3);
        let layout = cfg.param_layout().unwrap();
        let mut names: Vec<_> = layout.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), layout.len());
    }

    #[test]
    fn m2_with_silent_residuals_matches_m1() {
        let c1 = ModelConfig::new(Variant::M1, 2, [8, 8, 4]);
        let c2 = ModelConfig { variant: Variant::M2, ..c1.clone() };
        let m1 = Model::<f64>::build(&c1, 5).unwrap();
        let m2 = Model::<f64>::build(&c2, 6).unwrap();
        for (name, t) in m2.params().iter() {
            let mut d = t.data_mut();
            match m1.params().get(name) {
                Some(src) => d.copy_from_slice(&src.data()),
                None if name.contains(".res.conv2.") => d.fill(0.0),
                None => {}
            }
        }
        let x = input(&c1, 3);
        assert_eq!(m1.forward(&x).unwrap().to_vec(), m2.forward(&x).unwrap().to_vec());
    }

    #[test]
    fn hand_audited_ledger_for_tiny_unet() {
        // base 2, two levels, 3x3x3 kernels; weight + bias per conv
        let expected = [
            ("enc0.block.conv1.weight", 2 * 1 * 27),
            ("enc0.block.conv1.bias", 2),
            ("enc0.block.conv2.weight", 2 * 2 * 27),
            ("enc0.block.conv2.bias", 2),
            ("enc1.block.conv1.weight", 4 * 2 * 27),
            ("enc1.block.conv1.bias", 4),
            ("enc1.block.conv2.weight", 4 * 4 * 27),
            ("enc1.block.conv2.bias", 4),
            ("dec0.up.weight", 4 * 2 * 8),
            ("dec0.up.bias", 2),
            ("dec0.block.conv1.weight", 2 * 4 * 27),
            ("dec0.block.conv1.bias", 2),
            ("dec0.block.conv2.weight", 2 * 2 * 27),
            ("dec0.block.conv2.bias", 2),
            ("head.weight", 2),
            ("head.bias", 1),
        ];
        let cfg = ModelConfig::new(Variant::M1, 2, [8, 8, 8]).with_levels(2);
        let layout = cfg.param_layout().unwrap();
        let got: Vec<_> = layout.iter().map(|p| (p.name.as_str(), p.numel())).collect();
        assert_eq!(got, expected);
        assert_eq!(cfg.parameter_count().unwrap(), 1219);
        let ledger = describe_config(&cfg).unwrap();
        assert!(ledger.ends_with("total\t\t1219\n"), "{ledger}");

        // the residual variant adds two 3x3x3 convs per level
        let m2 = ModelConfig { variant: Variant::M2, ..cfg };
        assert_eq!(m2.parameter_count().unwrap(), 1219 + 2 * 110 + 2 * 436 + 2 * 110);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut cfg = ModelConfig::new(Variant::M1, 2, [8, 8, 4]);
        cfg.zero_head = true;
        let m = Model::<f64>::build(&cfg, 0).unwrap();
        assert!(m.forward(&input(&cfg, 1)).unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_base_roughly_quadruples_weights() {
        let a = ModelConfig::new(Variant::M1, 16, [8, 8, 8]);
        let b = ModelConfig::new(Variant::M1, 32, [8, 8, 8]);
        let split = |cfg: &ModelConfig| {
            let layout = cfg.param_layout().unwrap();
            let w: usize = layout.iter().filter(|p| p.name.ends_with("weight")).map(ParamSpec::numel).sum();
            let bias: usize = layout.iter().filter(|p| p.name.ends_with("bias")).map(ParamSpec::numel).sum();
            (w as f64, bias as f64)
        };
        let ((wa, ba), (wb, bb)) = (split(&a), split(&b));
        // the first conv (1 input channel) and the head (1 output) scale by 2
        assert!((wb / wa - 4.0).abs() < 0.05, "{}", wb / wa);
        // every bias doubles except the head's single logit bias
        assert_eq!(bb - 1.0, 2.0 * (ba - 1.0));
    }
}
