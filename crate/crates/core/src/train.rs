//! The training loop.
//!
//! Each epoch draws [`RunConfig::epoch_size`] training volumes (see
//! [`epoch_sampler`]). A volumetric model takes one optimizer step per drawn
//! volume; the slice-stack model takes one step per slice of each drawn
//! volume, in slice order. Batches hold a single volume or slice stack.
//! After an epoch the model is scored on the validation volumes at their
//! native extents, and the epoch with the highest mean validation Jaccard
//! is kept as the best checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{Checkpoint, HistoryRow};
use crate::config::RunConfig;
use crate::data::{epoch_sampler, Volume};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{Model, Variant};
use crate::nn::bce_with_logits;
use crate::optim::Adam;
use crate::phantom::Split;
use crate::tensor::flush_denormals;
use crate::pipeline::{self, input_tensor, load_split, target_values, Labeled};

/// Mixed into the run seed for the volume sampler, so that sampling and
/// weight initialization draw from unrelated streams.
const SAMPLER_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

/// A training volume already on the network grid.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub input: Volume,
    pub target: Volume,
}

impl Prepared {
    pub fn new(config: &crate::model::ModelConfig, item: &Labeled) -> Result<Self> {
        Ok(Self {
            id: item.id.clone(),
            input: pipeline::network_input(config, &item.volume)?,
            target: pipeline::network_target(config, &item.mask)?,
        })
    }

    /// Optimizer steps one visit of this volume takes.
    fn passes(&self, variant: Variant) -> usize {
        match variant {
            Variant::M3 => self.input.extents()[2],
            _ => 1,
        }
    }
}

/// Model, optimizer and data of a run in progress.
pub struct Trainer {
    config: RunConfig,
    model: Model<f32>,
    opt: Adam<f32>,
    train: Vec<Prepared>,
    val: Vec<Labeled>,
    epoch: u64,
    total_steps: u64,
    sampler_seed: u64,
    history: Vec<HistoryRow>,
    best: Option<(u64, f64)>,
}

impl Trainer {
    /// Fresh run: weights drawn from the config seed.
    pub fn new(config: RunConfig, train: &[Labeled], val: Vec<Labeled>) -> Result<Self> {
        config.validate()?;
        let model = Model::build(&config.model, config.seed)?;
        let opt = Adam::new(config.adam(), model.params().iter());
        let sampler_seed = config.seed ^ SAMPLER_SALT;
        Self::assemble(config, model, opt, train, val, sampler_seed)
    }

    /// Continues the run stored in `ckpt`.
    pub fn resume(ckpt: Checkpoint, train: &[Labeled], val: Vec<Labeled>) -> Result<Self> {
        let model = ckpt.model()?;
        let mut opt = Adam::new(ckpt.config.adam(), model.params().iter());
        opt.set_state(ckpt.adam)?;
        let mut t = Self::assemble(ckpt.config, model, opt, train, val, ckpt.sampler_seed)?;
        if ckpt.sampler_stream != ckpt.epoch {
            return Err(Error::Data(format!(
                "checkpoint sampler stream {} does not follow epoch {}",
                ckpt.sampler_stream, ckpt.epoch
            )));
        }
        t.epoch = ckpt.epoch;
        t.total_steps = ckpt.total_steps;
        t.history = ckpt.history;
        t.best = ckpt.best;
        Ok(t)
    }

    fn assemble(
        config: RunConfig,
        model: Model<f32>,
        opt: Adam<f32>,
        train: &[Labeled],
        val: Vec<Labeled>,
        sampler_seed: u64,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("no training volumes".into()));
        }
        let train = train.iter().map(|t| Prepared::new(&config.model, t)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            model,
            opt,
            train,
            val,
            epoch: 0,
            total_steps: 0,
            sampler_seed,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Optimizer steps taken so far, counted as they happen.
    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn best(&self) -> Option<(u64, f64)> {
        self.best
    }

    /// One optimizer step on a single input; returns the loss. Runs with
    /// subnormals flushed to zero (see [`flush_denormals`]).
    fn step(&mut self, sample: usize, z: usize) -> Result<f64> {
        flush_denormals(|| self.step_inner(sample, z))
    }

    fn step_inner(&mut self, sample: usize, z: usize) -> Result<f64> {
        let p = &self.train[sample];
        let cfg = &self.config.model;
        let input = input_tensor(cfg, &p.input, z)?;
        let targets = target_values(cfg, &p.target, z);
        let logits = self.model.forward(&input)?;
        let loss = bce_with_logits(&logits, &targets)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "loss is {value} at epoch {}, step {} (volume `{}`, pass {z})",
                self.epoch + 1,
                self.total_steps + 1,
                p.id
            )));
        }
        self.opt.zero_grads();
        loss.backward()?;
        self.opt.step()?;
        self.total_steps += 1;
        Ok(f64::from(value))
    }

    /// Trains for one epoch without validating; returns `(steps, mean loss)`.
    pub fn train_epoch(&mut self) -> Result<(u64, f64)> {
        let order = epoch_sampler(self.train.len(), self.config.epoch_size, self.sampler_seed, self.epoch)?;
        let before = self.total_steps;
        let mut loss_sum = 0.0;
        for i in order {
            for z in 0..self.train[i].passes(self.config.model.variant) {
                loss_sum += self.step(i, z)?;
            }
        }
        let steps = self.total_steps - before;
        Ok((steps, loss_sum / steps as f64))
    }

    /// Per-volume scores on the validation set.
    pub fn validate(&self) -> Result<Vec<(String, MetricsReport)>> {
        pipeline::evaluate(&self.model, &self.val, self.config.threshold)
    }

    /// Trains one epoch, validates when due, and records the history row.
    /// Returns the row and whether this epoch is the new best.
    pub fn run_epoch(&mut self) -> Result<(HistoryRow, bool)> {
        let (steps, train_loss) = self.train_epoch()?;
        self.epoch += 1;
        let due = self.epoch % self.config.val_every as u64 == 0 || self.epoch == self.config.epochs as u64;
        let val = if due && !self.val.is_empty() {
            let reports = self.validate()?;
            let n = reports.len() as f64;
            let j = reports.iter().map(|r| r.1.jaccard).sum::<f64>() / n;
            let d = reports.iter().map(|r| r.1.dsc).sum::<f64>() / n;
            Some((j, d))
        } else {
            None
        };
        let row = HistoryRow { epoch: self.epoch, steps, train_loss, val };
        self.history.push(row);
        let improved = match (val, self.best) {
            (Some((j, _)), Some((_, b))) => j > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            self.best = val.map(|(j, _)| (self.epoch, j));
        }
        Ok((row, improved))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            total_steps: self.total_steps,
            sampler_seed: self.sampler_seed,
            sampler_stream: self.epoch,
            params: Checkpoint::params_of(&self.model),
            adam: self.opt.state().clone(),
            history: self.history.clone(),
            best: self.best,
        }
    }
}

#[derive(Serialize)]
struct CsvRow {
    epoch: u64,
    steps: u64,
    train_loss: f64,
    val_jaccard: Option<f64>,
    val_dsc: Option<f64>,
}

/// Writes the metric history as CSV.
pub fn write_history(path: impl AsRef<Path>, history: &[HistoryRow]) -> Result<()> {
    let path = path.as_ref();
    let data_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(data_err)?;
    for r in history {
        let row = CsvRow {
            epoch: r.epoch,
            steps: r.steps,
            train_loss: r.train_loss,
            val_jaccard: r.val.map(|v| v.0),
            val_dsc: r.val.map(|v| v.1),
        };
        w.serialize(row).map_err(data_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Where a finished run left its files.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub latest: PathBuf,
    pub best: Option<PathBuf>,
    pub history: PathBuf,
    pub checkpoint: Checkpoint,
}

/// Trains from the dataset named in the config (or resumes `resume`) until
/// `config.epochs` epochs are complete. After every epoch the latest
/// checkpoint and the history CSV are rewritten, and the best checkpoint
/// when validation improved. `progress` sees every history row.
pub fn train(config: &RunConfig, resume: Option<Checkpoint>, mut progress: impl FnMut(&HistoryRow)) -> Result<TrainOutcome> {
    config.validate()?;
    let train = load_split(&config.dataset, Split::Train)?;
    let val = load_split(&config.dataset, Split::Val)?;
    let mut trainer = match resume {
        Some(ckpt) => {
            if ckpt.config.model != config.model {
                return Err(Error::Config("checkpoint model does not match the configured model".into()));
            }
            let mut ckpt = ckpt;
            ckpt.config = config.clone();
            Trainer::resume(ckpt, &train, val)?
        }
        None => Trainer::new(config.clone(), &train, val)?,
    };
    for dir in [&config.checkpoints, &config.reports] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let latest = config.checkpoints.join(LATEST_CHECKPOINT);
    let best = config.checkpoints.join(BEST_CHECKPOINT);
    let history = config.reports.join(HISTORY_FILE);
    while trainer.epoch() < config.epochs as u64 {
        let (row, improved) = trainer.run_epoch()?;
        let ckpt = trainer.checkpoint();
        ckpt.save(&latest)?;
        if improved {
            ckpt.save(&best)?;
        }
        write_history(&history, trainer.history())?;
        progress(&row);
    }
    Ok(TrainOutcome {
        latest,
        best: trainer.best().map(|_| best),
        history,
        checkpoint: trainer.checkpoint(),
    })
}
