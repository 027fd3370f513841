//! Loss, weighting, optimizer and schedule properties.

mod common;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use osd::annotations::{ClassFrameCounts, FrameClass};
use osd::nn::{build_model, Family, Grads, ModelConfig, PredictionMatrix};
use osd::train::{
    batch_gradient, inverse_frequency, run_schedule, segment_loss_grad, segment_loss_parts, weighted_ce, Adam,
    ClassWeights, EpochRunner, ScriptedRunner, StopReason, TrainConfig, Trainer,
};
use osd::Execution;

fn random_logits(frames: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((frames, 3), |_| rng.gen_range(-4.0..4.0))
}

fn random_targets(frames: usize, rng: &mut impl Rng) -> Vec<FrameClass> {
    (0..frames).map(|_| FrameClass::ALL[rng.gen_range(0..3)]).collect()
}

fn weights_strategy() -> impl Strategy<Value = ClassWeights> {
    (0.1f64..10.0, 0.1f64..10.0, 0.1f64..10.0).prop_map(|(a, b, c)| ClassWeights::new([a, b, c]).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_frames_do_not_contribute(seed in 0u64..10_000, frames in 2usize..40, w in weights_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_logits(frames, &mut rng);
        let targets = random_targets(frames, &mut rng);
        let mut mask: Vec<bool> = (0..frames).map(|_| rng.gen_bool(0.6)).collect();
        mask[0] = true;
        let mut scrambled = logits.clone();
        for t in 0..frames {
            if !mask[t] {
                for c in 0..3 {
                    scrambled[[t, c]] = rng.gen_range(-50.0..50.0);
                }
            }
        }
        let a = segment_loss_parts(logits.view(), &targets, &mask, &w).unwrap();
        let b = segment_loss_parts(scrambled.view(), &targets, &mask, &w).unwrap();
        prop_assert_eq!(a, b);
        let g = segment_loss_grad(scrambled.view(), &targets, &mask, &w, a.weight_sum).unwrap();
        for t in 0..frames {
            if !mask[t] {
                prop_assert!(g.row(t).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn loss_is_invariant_to_weight_scale(seed in 0u64..10_000, w in weights_strategy(), c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<_> = (0..3).map(|i| common::random_labels(&format!("s{i}"), 20, 15, &mut rng)).collect();
        let preds: Vec<PredictionMatrix> = labels
            .iter()
            .map(|l| PredictionMatrix {
                logits: random_logits(20, &mut rng).reversed_axes(),
                valid_frames: 15,
                segment_id: l.segment_id.clone(),
            })
            .collect();
        let masks: Vec<Vec<bool>> = labels.iter().map(|l| l.mask()).collect();
        let a = weighted_ce(&preds, &labels, &w, &masks).unwrap();
        let b = weighted_ce(&preds, &labels, &w.scaled(c).unwrap(), &masks).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        let oracle = common::loss_oracle(&preds, &labels, w.values(), &masks);
        prop_assert!((a - oracle).abs() <= 1e-10 * oracle.abs().max(1.0));
    }

    #[test]
    fn logit_gradient_matches_finite_differences(seed in 0u64..10_000, frames in 1usize..12, w in weights_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_logits(frames, &mut rng);
        let targets = random_targets(frames, &mut rng);
        let mask = vec![true; frames];
        let norm = segment_loss_parts(logits.view(), &targets, &mask, &w).unwrap().weight_sum;
        let loss = |x: &Array2<f64>| segment_loss_parts(x.view(), &targets, &mask, &w).unwrap().weighted_nll / norm;
        let g = segment_loss_grad(logits.view(), &targets, &mask, &w, norm).unwrap();
        let h = 1e-6;
        for t in 0..frames {
            for c in 0..3 {
                let mut up = logits.clone();
                up[[t, c]] += h;
                let mut down = logits.clone();
                down[[t, c]] -= h;
                let fd = (loss(&up) - loss(&down)) / (2.0 * h);
                prop_assert!((fd - g[[t, c]]).abs() < 1e-7, "frame {} class {}: {} vs {}", t, c, fd, g[[t, c]]);
            }
            // softmax minus one-hot sums to zero per frame
            prop_assert!(g.row(t).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_invariants(vals in prop::collection::vec(0.0f64..10.0, 1..40), patience in 1usize..8, max in 1usize..30) {
        let cfg = TrainConfig { early_stop_patience: patience, max_epochs: max, ..TrainConfig::default() };
        let mut runner = ScriptedRunner::new(vals.clone());
        let out = run_schedule(&cfg, &mut runner).unwrap();
        let n = out.epochs.len();
        prop_assert!(n >= 1 && n <= max);
        prop_assert_eq!(runner.seen_lrs.len(), n);
        let val_at = |e: usize| vals[(e - 1).min(vals.len() - 1)];
        let mut best = f64::INFINITY;
        let mut misses = 0usize;
        let mut decays = 0i32;
        for (i, rec) in out.epochs.iter().enumerate() {
            prop_assert_eq!(rec.epoch, i + 1);
            prop_assert_eq!(rec.lr, 1e-3 * 0.1f64.powi(decays));
            prop_assert_eq!(rec.val_loss, val_at(rec.epoch));
            if rec.val_loss < best {
                best = rec.val_loss;
                misses = 0;
            } else {
                misses += 1;
                decays += 1;
            }
            prop_assert!(misses <= patience);
            if i + 1 < n {
                prop_assert!(misses < patience);
            }
        }
        match out.stop_reason {
            StopReason::EarlyStop => prop_assert_eq!(misses, patience),
            StopReason::MaxEpochs => prop_assert_eq!(n, max),
        }
        prop_assert_eq!(out.state.best_validation_loss, best);
        prop_assert_eq!(runner.best_marks.last().copied(), Some(out.state.best_epoch));
        for w in runner.best_marks.windows(2) {
            prop_assert!(val_at(w[1]) < val_at(w[0]));
        }
    }

    #[test]
    fn inverse_frequency_weights_order_and_floor(counts in prop::array::uniform3(1u64..100_000)) {
        let w = inverse_frequency(&ClassFrameCounts(counts), None).unwrap().values();
        let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!((min - 1.0).abs() < 1e-12);
        for a in 0..3 {
            for b in 0..3 {
                if counts[a] < counts[b] {
                    prop_assert!(w[a] > w[b]);
                }
                let ratio = w[a] / w[b];
                prop_assert!((ratio - counts[b] as f64 / counts[a] as f64).abs() < 1e-9 * ratio);
            }
        }
    }
}

#[test]
fn adam_first_step_moves_each_parameter_by_lr() {
    let model_cfg = ModelConfig::toy(Family::Tcn);
    let mut model = build_model(&model_cfg).unwrap();
    let before = model.params().data().to_vec();
    let mut g = Grads::zeros_like(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for v in g.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut adam = Adam::new(model.param_count());
    adam.update(model.params_mut(), &g, 1e-3);
    assert_eq!(adam.steps(), 1);
    for ((b, a), gv) in before.iter().zip(model.params().data()).zip(g.data()) {
        let step = b - a;
        assert!(step * gv > 0.0, "step must oppose the gradient");
        assert!((step.abs() - 1e-3).abs() < 1e-5 * (1.0 + 1e-8 / gv.abs()));
    }
}

#[test]
fn batch_gradient_matches_finite_differences_on_a_few_parameters() {
    let set = common::fixture_set(1, 4, 2);
    let mut model = build_model(&ModelConfig::toy(Family::Rosd)).unwrap();
    let w = ClassWeights::new([2.0, 1.0, 5.0]).unwrap();
    let feats: Vec<_> = set
        .features
        .iter()
        .map(|f| {
            let mut f = f.clone();
            f.values = f.values.slice(ndarray::s![.., ..20]).to_owned();
            f.valid_frames = 20;
            f
        })
        .collect();
    let labels: Vec<_> = set
        .labels
        .iter()
        .map(|l| osd::annotations::FrameLabels::new(l.segment_id.clone(), l.labels[..20].to_vec(), 20, 0.01).unwrap())
        .collect();
    let (_, grads) = batch_gradient(&model, &feats, &labels, &w).unwrap();
    let n = model.param_count();
    for i in (0..n).step_by(n / 40) {
        let orig = model.params().data()[i];
        model.params_mut().data_mut()[i] = orig + 1e-6;
        let up = common::model_loss(&model, &feats, &labels, &w);
        model.params_mut().data_mut()[i] = orig - 1e-6;
        let down = common::model_loss(&model, &feats, &labels, &w);
        model.params_mut().data_mut()[i] = orig;
        let fd = (up - down) / 2e-6;
        assert!((fd - grads.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grads.data()[i]);
    }
}

#[test]
fn training_epochs_are_reproducible_across_execution_modes() {
    let set = common::fixture_set(2, 8, 4);
    let cfg = TrainConfig {
        batch_size: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let model_cfg = ModelConfig {
        dropout: 0.2,
        ..ModelConfig::toy(Family::Cf)
    };
    let run = |exec: Execution| {
        let model = build_model(&model_cfg).unwrap();
        let mut t = Trainer::new(model, cfg.clone(), ClassWeights::uniform(), &set, &set, exec).unwrap();
        let losses: Vec<f64> = (1..=2).map(|e| t.train_epoch(e, 1e-3).unwrap()).collect();
        (losses, t.model().params().data().to_vec())
    };
    let a = run(Execution::Sequential);
    let b = run(Execution::Sequential);
    let c = run(Execution::Parallel);
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn training_reduces_loss_on_a_tiny_set() {
    let set = common::fixture_set(1, 8, 6);
    let cfg = TrainConfig {
        batch_size: 2,
        initial_lr: 5e-3,
        ..TrainConfig::default()
    };
    let model = build_model(&ModelConfig::toy(Family::Tcn)).unwrap();
    let mut t = Trainer::new(model, cfg, ClassWeights::uniform(), &set, &set, Execution::Parallel).unwrap();
    let first = t.validate().unwrap();
    for e in 1..=15 {
        t.train_epoch(e, 5e-3).unwrap();
    }
    let last = t.validate().unwrap();
    assert!(last < first, "validation loss {first} -> {last}");
}

#[test]
fn invalid_schedule_settings_are_rejected() {
    for cfg in [
        TrainConfig { lr_decay: 1.0, ..TrainConfig::default() },
        TrainConfig { initial_lr: 0.0, ..TrainConfig::default() },
        TrainConfig { early_stop_patience: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
    ] {
        assert!(matches!(cfg.validate(), Err(osd::OsdError::Config(_))));
    }
}
