//! Mini-batch training of a [`Model`] under the plateau schedule.
//!
//! Per-segment forward/backward passes run in parallel chunks; their gradients
//! are summed in segment order so a run is bit-reproducible whatever the
//! thread count. Parameter updates are sequential.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::loss::{segment_loss_grad, segment_loss_parts, LossParts};
use super::schedule::{run_schedule, EpochRunner, StopReason, TrainConfig, TrainLog};
use super::weights::ClassWeights;
use crate::annotations::FrameLabels;
use crate::audio::{AudioClip, SampleSpan, Segment};
use crate::augment::{augment_batch, AugmentPolicy};
use crate::error::{OsdError, Result};
use crate::exec::Execution;
use crate::features::{short_digest, FbankExtractor, FeatureMatrix};
use crate::nn::{Ctx, Grads, Model};

/// Cached features and labels of one split, plus the segment audio when
/// on-the-fly augmentation is wanted.
#[derive(Debug, Clone, Default)]
pub struct TrainSet {
    pub features: Vec<FeatureMatrix>,
    pub labels: Vec<FrameLabels>,
    pub audio: Option<Vec<AudioClip>>,
}

impl TrainSet {
    pub fn new(features: Vec<FeatureMatrix>, labels: Vec<FrameLabels>) -> Result<Self> {
        let set = TrainSet {
            features,
            labels,
            audio: None,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.labels.len() {
            return Err(OsdError::Shape {
                expected: format!("{} label sequences", self.features.len()),
                actual: self.labels.len().to_string(),
            });
        }
        for (f, l) in self.features.iter().zip(&self.labels) {
            if f.segment_id != l.segment_id || f.frame_count() != l.len() || f.valid_frames != l.valid_frames {
                return Err(OsdError::Data(format!(
                    "features '{}' ({} frames, {} valid) do not match labels '{}' ({} frames, {} valid)",
                    f.segment_id,
                    f.frame_count(),
                    f.valid_frames,
                    l.segment_id,
                    l.len(),
                    l.valid_frames
                )));
            }
        }
        if let Some(audio) = &self.audio {
            if audio.len() != self.features.len() {
                return Err(OsdError::Data("segment audio does not match features".into()));
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent seeds from counters.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Sum of loss weights over the valid frames of `labels`.
fn weight_total<'l>(labels: impl Iterator<Item = &'l FrameLabels>, weights: &ClassWeights) -> f64 {
    labels
        .flat_map(|l| l.valid().iter())
        .map(|&c| weights.of(c))
        .sum()
}

fn segment_step(
    model: &Model,
    features: &FeatureMatrix,
    labels: &FrameLabels,
    weights: &ClassWeights,
    norm: f64,
    dropout_seed: u64,
) -> Result<(Grads, LossParts)> {
    let x = Model::input_frames(features);
    let mut ctx = Ctx::train(dropout_seed);
    let (logits, cache) = model.forward_frames(&x, &mut ctx);
    let targets = labels.valid();
    let mask = vec![true; targets.len()];
    let parts = segment_loss_parts(logits.view(), targets, &mask, weights)?;
    let dlogits = segment_loss_grad(logits.view(), targets, &mask, weights, norm)?;
    let mut grads = Grads::zeros_like(model.params());
    model.backward(&cache, &dlogits, &mut grads);
    Ok((grads, parts))
}

/// Weighted loss of `model` on a whole split in evaluation mode.
pub fn evaluate_loss(model: &Model, set: &TrainSet, weights: &ClassWeights, exec: Execution) -> Result<f64> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let parts = exec.map(&idx, |&i| -> Result<LossParts> {
        let f = &set.features[i];
        let l = &set.labels[i];
        let (logits, _) = model.forward_frames(&Model::input_frames(f), &mut Ctx::eval());
        let targets = l.valid();
        segment_loss_parts(logits.view(), targets, &vec![true; targets.len()], weights)
    });
    parts
        .into_iter()
        .try_fold(LossParts::default(), |acc, p| p.map(|p| acc.merge(p)))?
        .mean()
}

/// Fraction of valid frames whose argmax matches the reference.
pub fn frame_accuracy(model: &Model, set: &TrainSet, exec: Execution) -> Result<f64> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let counts = exec.map(&idx, |&i| -> Result<(usize, usize)> {
        let pred = model.forward(&set.features[i])?.argmax();
        let l = &set.labels[i];
        let hits = (0..l.valid_frames)
            .filter(|&t| pred[t] == l.labels[t] as u8)
            .count();
        Ok((hits, l.valid_frames))
    });
    let (hits, total) = counts
        .into_iter()
        .try_fold((0, 0), |(h, n), c| c.map(|(a, b)| (h + a, n + b)))?;
    if total == 0 {
        return Err(OsdError::InvalidInput("no valid frames".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// On-the-fly augmentation: segment audio is augmented and re-featurized each step.
#[derive(Debug, Clone, Copy)]
pub struct OnlineAugment<'a> {
    pub policy: &'a AugmentPolicy,
    pub extractor: &'a FbankExtractor,
}

pub struct Trainer<'a> {
    model: Model,
    best: Option<Vec<f64>>,
    adam: Adam,
    cfg: TrainConfig,
    weights: ClassWeights,
    train: &'a TrainSet,
    val: &'a TrainSet,
    exec: Execution,
    augment: Option<OnlineAugment<'a>>,
    step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: Model,
        cfg: TrainConfig,
        weights: ClassWeights,
        train: &'a TrainSet,
        val: &'a TrainSet,
        exec: Execution,
    ) -> Result<Self> {
        cfg.validate()?;
        train.validate()?;
        val.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(OsdError::Data("training and validation sets must be non-empty".into()));
        }
        Ok(Trainer {
            adam: Adam::new(model.param_count()),
            model,
            best: None,
            cfg,
            weights,
            train,
            val,
            exec,
            augment: None,
            step: 0,
        })
    }

    pub fn with_augmentation(mut self, augment: OnlineAugment<'a>) -> Result<Self> {
        augment.policy.validate()?;
        if !augment.policy.is_identity() && self.train.audio.is_none() {
            return Err(OsdError::Config("augmentation needs the training segment audio".into()));
        }
        self.augment = Some(augment);
        Ok(self)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// The best-validation model, or the current one if no epoch finished.
    pub fn into_best_model(self) -> Model {
        let mut model = self.model;
        if let Some(best) = self.best {
            model.params_mut().load_flat(&best);
        }
        model
    }

    fn batch_features(&self, batch: &[usize], epoch: usize) -> Result<Option<Vec<FeatureMatrix>>> {
        let Some(aug) = self.augment else { return Ok(None) };
        if aug.policy.is_identity() {
            return Ok(None);
        }
        let audio = self.train.audio.as_ref().expect("checked in with_augmentation");
        let clips: Vec<AudioClip> = batch.iter().map(|&i| audio[i].clone()).collect();
        let seed = mix_seed(&[aug.policy.seed, self.cfg.seed, epoch as u64, self.step]);
        let augmented = augment_batch(&clips, aug.policy, seed, self.exec)?;
        let nominal = aug.extractor.config().segment_samples();
        let out = self.exec.map_indexed(&augmented, |k, (clip, _)| {
            let seg = Segment {
                segment_id: self.train.features[batch[k]].segment_id.clone(),
                span: SampleSpan {
                    start: 0,
                    end: clip.len(),
                },
                nominal_len: nominal,
            };
            aug.extractor.segment_features(clip, &seg)
        });
        out.into_iter().collect::<Result<Vec<_>>>().map(Some)
    }

    fn train_batch(&mut self, batch: &[usize], epoch: usize, lr: f64) -> Result<LossParts> {
        let norm = weight_total(batch.iter().map(|&i| &self.train.labels[i]), &self.weights);
        if norm <= 0.0 {
            return Err(OsdError::Data("batch has no valid frames".into()));
        }
        let augmented = self.batch_features(batch, epoch)?;
        let positions: Vec<usize> = (0..batch.len()).collect();
        let mut total = Grads::zeros_like(self.model.params());
        let mut parts = LossParts::default();
        for chunk in positions.chunks(self.exec.chunk_width()) {
            let results = self.exec.map(chunk, |&k| {
                let i = batch[k];
                let features = augmented.as_ref().map_or(&self.train.features[i], |a| &a[k]);
                let seed = mix_seed(&[self.cfg.seed, epoch as u64, self.step, i as u64]);
                segment_step(&self.model, features, &self.train.labels[i], &self.weights, norm, seed)
            });
            for r in results {
                let (g, p) = r?;
                total.add_assign(&g);
                parts = parts.merge(p);
            }
        }
        if !parts.weighted_nll.is_finite() || total.data().iter().any(|g| !g.is_finite()) {
            return Err(OsdError::Divergence(format!(
                "non-finite loss or gradient at epoch {epoch}, step {}",
                self.step
            )));
        }
        self.adam.update(self.model.params_mut(), &total, lr);
        self.step += 1;
        Ok(parts)
    }
}

impl EpochRunner for Trainer<'_> {
    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.seed, epoch as u64])));
        let mut parts = LossParts::default();
        for batch in order.chunks(self.cfg.batch_size) {
            parts = parts.merge(self.train_batch(batch, epoch, lr)?);
        }
        parts.mean()
    }

    fn validate(&mut self) -> Result<f64> {
        evaluate_loss(&self.model, self.val, &self.weights, self.exec)
    }

    fn mark_best(&mut self, _epoch: usize) {
        self.best = Some(self.model.params().data().to_vec());
    }

    fn rng_digest(&self) -> String {
        short_digest(format!("{}:{}", self.cfg.seed, self.step).as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub stop_reason: StopReason,
}

/// Train until the schedule stops and return the best-validation model.
pub fn train_model(
    trainer: Trainer<'_>,
    config_digest: &str,
) -> Result<TrainOutcome> {
    let mut trainer = trainer;
    let cfg = trainer.cfg.clone();
    let mut log = TrainLog::new(cfg.weights_mode, trainer.weights, config_digest);
    let outcome = run_schedule(&cfg, &mut trainer)?;
    log.epochs = outcome.epochs;
    log.stop_reason = Some(outcome.stop_reason);
    log.best_epoch = outcome.state.best_epoch;
    Ok(TrainOutcome {
        model: trainer.into_best_model(),
        log,
        stop_reason: outcome.stop_reason,
    })
}

/// Gradient of the batch loss for a fixed set of segments in evaluation mode
/// (no dropout). Used by gradient checks.
pub fn batch_gradient(
    model: &Model,
    features: &[FeatureMatrix],
    labels: &[FrameLabels],
    weights: &ClassWeights,
) -> Result<(f64, Grads)> {
    let norm = weight_total(labels.iter(), weights);
    let mut total = Grads::zeros_like(model.params());
    let mut parts = LossParts::default();
    for (f, l) in features.iter().zip(labels) {
        let x = Model::input_frames(f);
        let (logits, cache) = model.forward_frames(&x, &mut Ctx::eval());
        let targets = l.valid();
        let mask = vec![true; targets.len()];
        parts = parts.merge(segment_loss_parts(logits.view(), targets, &mask, weights)?);
        let d: Array2<f64> = segment_loss_grad(logits.view(), targets, &mask, weights, norm)?;
        model.backward(&cache, &d, &mut total);
    }
    Ok((parts.mean()?, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::FrameClass;
    use crate::nn::{build_model, Family, ModelConfig};
    use rand::Rng;

    fn toy_set(n: usize, frames: usize, seed: u64) -> TrainSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for s in 0..n {
            let cls: Vec<FrameClass> = (0..frames).map(|t| FrameClass::ALL[(t / 4 + s) % 3]).collect();
            let values = Array2::from_shape_fn((64, frames), |(m, t)| {
                let c = cls[t].index();
                (if m % 3 == c { 2.0 } else { 0.0 }) + rng.gen_range(-0.1f32..0.1)
            });
            let id = format!("seg{s}");
            features.push(FeatureMatrix {
                values,
                valid_frames: frames,
                hop_seconds: 0.01,
                window_seconds: 0.025,
                segment_id: id.clone(),
            });
            labels.push(FrameLabels::new(id, cls, frames, 0.01).unwrap());
        }
        TrainSet::new(features, labels).unwrap()
    }

    #[test]
    fn seed_mixing_separates_counters() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_eq!(mix_seed(&[7, 8, 9]), mix_seed(&[7, 8, 9]));
    }

    #[test]
    fn training_lowers_the_loss() {
        let set = toy_set(4, 24, 1);
        let model = build_model(&ModelConfig::toy(Family::Tcn)).unwrap();
        let w = ClassWeights::uniform();
        let before = evaluate_loss(&model, &set, &w, Execution::Sequential).unwrap();
        let cfg = TrainConfig {
            max_epochs: 30,
            batch_size: 2,
            initial_lr: 1e-2,
            ..Default::default()
        };
        let trainer = Trainer::new(model, cfg, w, &set, &set, Execution::Parallel).unwrap();
        let out = train_model(trainer, "x").unwrap();
        let after = evaluate_loss(&out.model, &set, &w, Execution::Sequential).unwrap();
        assert!(after < before * 0.5, "{before} -> {after}");
        assert_eq!(out.log.epochs.len(), out.log.stop_reason.map(|_| out.log.epochs.len()).unwrap());
    }

    #[test]
    fn sequential_and_parallel_runs_agree_bitwise() {
        let set = toy_set(5, 16, 2);
        let run = |exec| {
            let mut mc = ModelConfig::toy(Family::Cf);
            mc.dropout = 0.1;
            let model = build_model(&mc).unwrap();
            let cfg = TrainConfig {
                max_epochs: 3,
                batch_size: 2,
                ..Default::default()
            };
            let t = Trainer::new(model, cfg, ClassWeights::uniform(), &set, &set, exec).unwrap();
            let out = train_model(t, "x").unwrap();
            (out.log.loss_sequence(), out.model.params().data().to_vec())
        };
        assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
    }

    #[test]
    fn mismatched_sets_rejected() {
        let mut set = toy_set(2, 8, 3);
        set.labels.pop();
        assert!(set.validate().is_err());
    }
}
