use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use osd::annotations::{FrameClass, FrameLabels};
use osd::audio::AudioClip;
use osd::augment::{augment_batch, AugmentPolicy};
use osd::features::{FbankExtractor, FeatureConfig, FeatureMatrix};
use osd::nn::{build_model, Family, ModelConfig};
use osd::train::{ClassWeights, EpochRunner, TrainConfig, TrainSet, Trainer};
use osd::Execution;

const SEGMENTS: usize = 16;
const SEGMENT_SAMPLES: usize = 64_000;

fn clips(seed: u64, n: usize, len: usize, amp: f32) -> Vec<AudioClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| AudioClip::new(format!("c{i}"), (0..len).map(|_| rng.gen_range(-amp..amp)).collect()))
        .collect()
}

fn features(ex: &FbankExtractor, segs: &[AudioClip]) -> Vec<FeatureMatrix> {
    segs.iter()
        .map(|c| {
            let v = ex.compute(&c.samples).unwrap();
            let n = v.ncols();
            FeatureMatrix::from_f64(c.source_id.clone(), &v, n, ex.config())
        })
        .collect()
}

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench_fbank(c: &mut Criterion) {
    let segs = clips(1, SEGMENTS, SEGMENT_SAMPLES, 0.3);
    let ex = FbankExtractor::new(FeatureConfig::default()).unwrap();
    let mut g = c.benchmark_group("fbank");
    g.throughput(Throughput::Elements(SEGMENTS as u64));
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| exec.map(&segs, |s| ex.compute(&s.samples).unwrap()))
        });
    }
    g.finish();
}

fn bench_forward(c: &mut Criterion) {
    let ex = FbankExtractor::new(FeatureConfig::default()).unwrap();
    let feats = features(&ex, &clips(2, SEGMENTS, SEGMENT_SAMPLES, 0.3));
    let mut g = c.benchmark_group("forward");
    g.sample_size(10);
    g.throughput(Throughput::Elements(SEGMENTS as u64));
    for family in Family::ALL {
        let model = build_model(&ModelConfig::toy(family)).unwrap();
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(family.name(), name), &exec, |b, &exec| {
                b.iter(|| exec.map(&feats, |f| model.forward(f).unwrap()))
            });
        }
    }
    g.finish();
}

fn bench_augment(c: &mut Criterion) {
    let segs = clips(3, SEGMENTS, SEGMENT_SAMPLES, 0.3);
    let policy = AugmentPolicy {
        p_noise: 1.0,
        p_rir: 1.0,
        noise_corpus: Arc::new(clips(4, 3, 32_000, 0.1)),
        rir_corpus: Arc::new(clips(5, 3, 2_000, 0.05)),
        ..AugmentPolicy::default()
    };
    let mut g = c.benchmark_group("augment");
    g.sample_size(10);
    g.throughput(Throughput::Elements(SEGMENTS as u64));
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| augment_batch(&segs, &policy, 11, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_epoch(c: &mut Criterion) {
    let ex = FbankExtractor::new(FeatureConfig::default()).unwrap();
    let feats = features(&ex, &clips(6, SEGMENTS, SEGMENT_SAMPLES, 0.3));
    let labels: Vec<FrameLabels> = feats
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let n = f.frame_count();
            let codes = (0..n).map(|t| FrameClass::ALL[(t / 40 + i) % 3]).collect();
            FrameLabels::new(f.segment_id.clone(), codes, n, 0.01).unwrap()
        })
        .collect();
    let set = TrainSet::new(feats, labels).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("train_epoch");
    g.sample_size(10);
    for (name, exec) in MODES {
        let model = build_model(&ModelConfig::toy(Family::Cf)).unwrap();
        let mut trainer = Trainer::new(model, cfg.clone(), ClassWeights::uniform(), &set, &set, exec).unwrap();
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| trainer.train_epoch(1, 1e-4).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_fbank, bench_forward, bench_augment, bench_epoch);
criterion_main!(benches);
