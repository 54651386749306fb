//! Run configuration and its TOML file format.
//!
//! A config file is a flat table of keys; any key left out takes the
//! default for the chosen variant. Command-line flags produce the same
//! [`RunOverrides`] and are layered on top of the file.
//!
//! ```toml
//! variant = "m1"
//! base_channels = 8
//! input_extents = [80, 94, 24]
//! epochs = 200
//! dataset = "phantoms"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::nn::Norm;
use crate::optim::AdamConfig;

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Volumes drawn per epoch.
    pub epoch_size: usize,
    pub seed: u64,
    /// Foreground when the probability exceeds this value.
    pub threshold: f32,
    /// Validate (and consider a new best checkpoint) every this many epochs.
    pub val_every: usize,
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl RunConfig {
    /// Learning rate and weight decay per variant, with everything else at
    /// its default.
    pub fn for_variant(variant: Variant) -> Self {
        let (lr, weight_decay) = match variant {
            Variant::M1 => (1e-4, 1e-6),
            Variant::M2 => (1e-4, 1e-5),
            Variant::M3 => (7.5e-5, 0.0),
        };
        Self {
            model: ModelConfig::default_for(variant),
            lr,
            weight_decay,
            epochs: 500,
            epoch_size: 10,
            seed: 0,
            threshold: 0.5,
            val_every: 1,
            dataset: PathBuf::from("data"),
            checkpoints: PathBuf::from("run/checkpoints"),
            reports: PathBuf::from("run/reports"),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.weight_decay)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.epoch_size == 0 || self.val_every == 0 {
            return bad("epochs, epoch_size and val_every must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        Ok(())
    }

    /// Reads a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        RunOverrides::load(path)?.resolve()
    }

    /// Flat TOML with every key spelled out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&RunOverrides::from(self)).map_err(|e| Error::Config(format!("toml: {e}")))
    }
}

/// A partial [`RunConfig`]: the on-disk format and the shape of
/// command-line overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOverrides {
    pub variant: Option<Variant>,
    pub levels: Option<usize>,
    pub base_channels: Option<usize>,
    pub growth: Option<usize>,
    pub kernel: Option<usize>,
    pub input_extents: Option<[usize; 3]>,
    pub norm: Option<Norm>,
    pub zero_head: Option<bool>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub epochs: Option<usize>,
    pub epoch_size: Option<usize>,
    pub seed: Option<u64>,
    pub threshold: Option<f32>,
    pub val_every: Option<usize>,
    pub dataset: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

impl RunOverrides {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fields set in `other` win.
    pub fn merge(self, other: Self) -> Self {
        macro_rules! pick {
            ($($f:ident),*) => { Self { $($f: other.$f.or(self.$f)),* } };
        }
        pick!(
            variant, levels, base_channels, growth, kernel, input_extents, norm, zero_head, lr, weight_decay,
            epochs, epoch_size, seed, threshold, val_every, dataset, checkpoints, reports
        )
    }

    /// Fills unset fields from the variant defaults (M1 when no variant is
    /// given) and validates the result.
    pub fn resolve(self) -> Result<RunConfig> {
        let mut c = RunConfig::for_variant(self.variant.unwrap_or(Variant::M1));
        let m = &mut c.model;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(m.levels, self.levels);
        set!(m.base_channels, self.base_channels);
        set!(m.growth, self.growth);
        set!(m.kernel, self.kernel);
        set!(m.input_extents, self.input_extents);
        set!(m.norm, self.norm);
        set!(m.zero_head, self.zero_head);
        set!(c.lr, self.lr);
        set!(c.weight_decay, self.weight_decay);
        set!(c.epochs, self.epochs);
        set!(c.epoch_size, self.epoch_size);
        set!(c.seed, self.seed);
        set!(c.threshold, self.threshold);
        set!(c.val_every, self.val_every);
        set!(c.dataset, self.dataset);
        set!(c.checkpoints, self.checkpoints);
        set!(c.reports, self.reports);
        c.validate()?;
        Ok(c)
    }
}

impl From<&RunConfig> for RunOverrides {
    fn from(c: &RunConfig) -> Self {
        let m = &c.model;
        Self {
            variant: Some(m.variant),
            levels: Some(m.levels),
            base_channels: Some(m.base_channels),
            growth: Some(m.growth),
            kernel: Some(m.kernel),
            input_extents: Some(m.input_extents),
            norm: Some(m.norm),
            zero_head: Some(m.zero_head),
            lr: Some(c.lr),
            weight_decay: Some(c.weight_decay),
            epochs: Some(c.epochs),
            epoch_size: Some(c.epoch_size),
            seed: Some(c.seed),
            threshold: Some(c.threshold),
            val_every: Some(c.val_every),
            dataset: Some(c.dataset.clone()),
            checkpoints: Some(c.checkpoints.clone()),
            reports: Some(c.reports.clone()),
        }
    }
}
