//! Plateau-driven schedule: validate after every epoch, decay the learning rate
//! on each non-improvement, stop after `patience` non-improvements in a row or
//! at the epoch cap.

use std::fmt::Write as _;
use std::path::Path;

use super::weights::{ClassWeights, WeightsMode};
use crate::error::{OsdError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub weights_mode: WeightsMode,
    /// Weight for a class with no training frames under inverse-frequency weighting.
    pub zero_class_fallback: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-3,
            lr_decay: 0.1,
            early_stop_patience: 6,
            max_epochs: 100,
            batch_size: 32,
            weights_mode: WeightsMode::InverseFrequency,
            zero_class_fallback: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OsdError::Config(m));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial learning rate must be positive, got {}", self.initial_lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad(format!("lr decay must be in (0, 1), got {}", self.lr_decay));
        }
        if self.early_stop_patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("patience, batch size and max epochs must be at least 1".into());
        }
        if let Some(f) = self.zero_class_fallback {
            if !(f > 0.0 && f.is_finite()) {
                return bad(format!("fallback weight must be positive, got {f}"));
            }
        }
        Ok(())
    }

    /// Learning rate after `k` decay events.
    pub fn lr_after(&self, k: u32) -> f64 {
        self.initial_lr * self.lr_decay.powi(k as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxEpochs => "max_epochs",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub best_validation_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub decay_events: u32,
    pub current_lr: f64,
    pub rng_digest: String,
}

/// What the schedule needs from a trainer. Stubbed in tests.
pub trait EpochRunner {
    /// Run one epoch at `lr` and return the mean training loss.
    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<f64>;
    fn validate(&mut self) -> Result<f64>;
    /// Called when `epoch` produced the best validation loss so far.
    fn mark_best(&mut self, epoch: usize);
    fn rng_digest(&self) -> String {
        String::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub weights_mode: String,
    pub weights: ClassWeights,
    pub config_digest: String,
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: Option<StopReason>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn new(weights_mode: WeightsMode, weights: ClassWeights, config_digest: impl Into<String>) -> Self {
        TrainLog {
            weights_mode: weights_mode.name().to_string(),
            weights,
            config_digest: config_digest.into(),
            epochs: Vec::new(),
            stop_reason: None,
            best_epoch: 0,
        }
    }

    /// The loss columns only; timing varies between runs.
    pub fn loss_sequence(&self) -> Vec<(f64, f64)> {
        self.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# config_digest={}", self.config_digest);
        let _ = writeln!(s, "# weights_mode={}", self.weights_mode);
        let _ = writeln!(s, "# weights={}", self.weights);
        s.push_str("epoch\ttrain_loss\tval_loss\tlr\tseconds\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{}\t{:.17e}\t{:.17e}\t{:e}\t{:.3}", e.epoch, e.train_loss, e.val_loss, e.lr, e.seconds);
        }
        if let Some(r) = self.stop_reason {
            let _ = writeln!(s, "# stop_reason={}", r.name());
        }
        let _ = writeln!(s, "# best_epoch={}", self.best_epoch);
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| OsdError::io(format!("writing {}", path.display()), e))
    }
}

#[derive(Debug, Clone)]
pub struct ScheduleOutcome {
    pub state: TrainState,
    pub stop_reason: StopReason,
    pub epochs: Vec<EpochRecord>,
}

pub fn run_schedule(cfg: &TrainConfig, runner: &mut dyn EpochRunner) -> Result<ScheduleOutcome> {
    cfg.validate()?;
    let mut state = TrainState {
        epoch: 0,
        best_validation_loss: f64::INFINITY,
        best_epoch: 0,
        epochs_since_improvement: 0,
        decay_events: 0,
        current_lr: cfg.initial_lr,
        rng_digest: runner.rng_digest(),
    };
    let mut epochs = Vec::new();
    loop {
        if state.epoch == cfg.max_epochs {
            return Ok(ScheduleOutcome {
                state,
                stop_reason: StopReason::MaxEpochs,
                epochs,
            });
        }
        state.epoch += 1;
        let started = std::time::Instant::now();
        let lr = state.current_lr;
        let train_loss = runner.train_epoch(state.epoch, lr)?;
        let val_loss = runner.validate()?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(OsdError::Divergence(format!(
                "epoch {}: train loss {train_loss}, validation loss {val_loss} at lr {lr:e}",
                state.epoch
            )));
        }
        epochs.push(EpochRecord {
            epoch: state.epoch,
            train_loss,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        state.rng_digest = runner.rng_digest();
        if val_loss < state.best_validation_loss {
            state.best_validation_loss = val_loss;
            state.best_epoch = state.epoch;
            state.epochs_since_improvement = 0;
            runner.mark_best(state.epoch);
        } else {
            state.epochs_since_improvement += 1;
            if state.epochs_since_improvement >= cfg.early_stop_patience {
                return Ok(ScheduleOutcome {
                    state,
                    stop_reason: StopReason::EarlyStop,
                    epochs,
                });
            }
            state.decay_events += 1;
            state.current_lr = cfg.lr_after(state.decay_events);
        }
        debug_assert!(state.epochs_since_improvement <= cfg.early_stop_patience);
    }
}

/// Replays a fixed validation-loss sequence; the last value repeats.
#[derive(Debug, Clone)]
pub struct ScriptedRunner {
    pub val_losses: Vec<f64>,
    pub seen_lrs: Vec<f64>,
    pub best_marks: Vec<usize>,
}

impl ScriptedRunner {
    pub fn new(val_losses: Vec<f64>) -> Self {
        ScriptedRunner {
            val_losses,
            seen_lrs: Vec::new(),
            best_marks: Vec::new(),
        }
    }
}

impl EpochRunner for ScriptedRunner {
    fn train_epoch(&mut self, _epoch: usize, lr: f64) -> Result<f64> {
        self.seen_lrs.push(lr);
        Ok(1.0)
    }

    fn validate(&mut self) -> Result<f64> {
        let i = (self.seen_lrs.len() - 1).min(self.val_losses.len() - 1);
        Ok(self.val_losses[i])
    }

    fn mark_best(&mut self, epoch: usize) {
        self.best_marks.push(epoch);
    }
}
