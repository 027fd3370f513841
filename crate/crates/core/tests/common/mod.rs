//! Shared fixtures and reference implementations for the integration tests.
//! The references are written from the definitions, independently of the
//! library code they check.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use osd::annotations::{rasterize_labels, FrameClass, FrameLabels, SpeakerTurn};
use osd::audio::{segment_range, AudioClip, SampleSpan};
use osd::features::{FbankExtractor, FeatureConfig, FeatureMatrix};
use osd::fixtures::{synth_recording, FixtureSpec};
use osd::nn::{Model, PredictionMatrix};
use osd::train::{weighted_ce_valid, ClassWeights, TrainSet};

pub const SR: f64 = 16_000.0;

/// In-memory segmented fixture: `recordings` synthetic recordings of
/// `seconds` each, cut into 4 s segments with features and labels.
pub fn fixture_set(recordings: usize, seconds: usize, seed: u64) -> TrainSet {
    let spec = FixtureSpec {
        seed,
        recording_seconds: seconds,
        ..FixtureSpec::default()
    };
    let ex = FbankExtractor::new(FeatureConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut audio = Vec::new();
    for r in 0..recordings {
        let rec = synth_recording(&format!("rec{r}"), "fixture", &spec, 0.003, &mut rng);
        let clip = AudioClip::new(rec.recording_id.clone(), rec.samples.clone());
        let span = SampleSpan { start: 0, end: clip.len() };
        for seg in segment_range(&rec.recording_id, span, 4.0).unwrap() {
            features.push(ex.segment_features(&clip, &seg).unwrap());
            labels.push(rasterize_labels(&rec.turns, &seg, 0.01).unwrap());
            audio.push(AudioClip::new(seg.segment_id.clone(), clip.slice(&seg.span).to_vec()));
        }
    }
    let mut set = TrainSet::new(features, labels).unwrap();
    set.audio = Some(audio);
    set
}

/// Random features with `valid` leading frames and zero padding after.
pub fn random_features(frames: usize, valid: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Array2::from_shape_fn((64, frames), |(_, t)| if t < valid { rng.gen_range(-2.0f32..2.0) } else { 0.0 });
    FeatureMatrix {
        values,
        valid_frames: valid,
        hop_seconds: 0.01,
        window_seconds: 0.025,
        segment_id: format!("rand{seed}"),
    }
}

pub fn random_labels(id: &str, frames: usize, valid: usize, rng: &mut impl Rng) -> FrameLabels {
    let labels = (0..frames)
        .map(|t| if t < valid { FrameClass::ALL[rng.gen_range(0..3)] } else { FrameClass::Silence })
        .collect();
    FrameLabels::new(id, labels, valid, 0.01).unwrap()
}

/// Per-frame count of distinct speakers whose turn covers the frame centre.
pub fn brute_force_labels(turns: &[SpeakerTurn], start_sample: usize, frames: usize, valid: usize) -> Vec<FrameClass> {
    (0..frames)
        .map(|i| {
            if i >= valid {
                return FrameClass::Silence;
            }
            let c = (start_sample + i * 160) as f64 / SR;
            let mut speakers: Vec<&str> = turns
                .iter()
                .filter(|t| t.onset <= c && c < t.onset + t.duration)
                .map(|t| t.speaker_id.as_str())
                .collect();
            speakers.sort_unstable();
            speakers.dedup();
            match speakers.len() {
                0 => FrameClass::Silence,
                1 => FrameClass::Single,
                _ => FrameClass::Overlap,
            }
        })
        .collect()
}

/// `y[n] = sum_k h[k] x[n + shift - k]`, truncated to `x.len()` outputs.
pub fn direct_convolution(x: &[f32], h: &[f32], shift: usize) -> Vec<f64> {
    (0..x.len())
        .map(|n| {
            let mut acc = 0.0f64;
            for (k, &hk) in h.iter().enumerate() {
                let j = n as isize + shift as isize - k as isize;
                if j >= 0 && (j as usize) < x.len() {
                    acc += hk as f64 * x[j as usize] as f64;
                }
            }
            acc
        })
        .collect()
}

/// Compensated (Neumaier) sum.
pub fn neumaier(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Weighted cross-entropy evaluated term by term:
/// `-log p_y = log(1 + sum_{c != y} exp(x_c - x_y))`, sums compensated.
pub fn loss_oracle(logits: &[PredictionMatrix], labels: &[FrameLabels], w: [f64; 3], masks: &[Vec<bool>]) -> f64 {
    let mut num = Vec::new();
    let mut den = Vec::new();
    for ((p, l), m) in logits.iter().zip(labels).zip(masks) {
        for t in 0..l.labels.len() {
            if !m[t] {
                continue;
            }
            let y = l.labels[t].index();
            let rest = neumaier((0..3).filter(|&c| c != y).map(|c| (p.logits[[c, t]] - p.logits[[y, t]]).exp()));
            num.push(w[y] * rest.ln_1p());
            den.push(w[y]);
        }
    }
    neumaier(num) / neumaier(den)
}

/// Relative error of two vectors, `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Evaluation-mode loss via the public prediction path.
pub fn model_loss(model: &Model, features: &[FeatureMatrix], labels: &[FrameLabels], weights: &ClassWeights) -> f64 {
    let preds: Vec<PredictionMatrix> = features.iter().map(|f| model.forward(f).unwrap()).collect();
    weighted_ce_valid(&preds, labels, weights).unwrap()
}

/// Central finite-difference gradient over every parameter.
pub fn numeric_gradient(
    model: &mut Model,
    features: &[FeatureMatrix],
    labels: &[FrameLabels],
    weights: &ClassWeights,
    h: f64,
) -> Vec<f64> {
    let n = model.param_count();
    let mut g = vec![0.0; n];
    for (i, gi) in g.iter_mut().enumerate() {
        let orig = model.params().data()[i];
        model.params_mut().data_mut()[i] = orig + h;
        let up = model_loss(model, features, labels, weights);
        model.params_mut().data_mut()[i] = orig - h;
        let down = model_loss(model, features, labels, weights);
        model.params_mut().data_mut()[i] = orig;
        *gi = (up - down) / (2.0 * h);
    }
    g
}

pub fn osd_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_osd"))
}

pub fn recipe(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes").join(name)
}

/// Every regular file under `dir`, relative path and contents, sorted.
pub fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
