//! Augmentation contracts: SNR, energy, label alignment, random-stream use.

mod common;

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use osd::audio::AudioClip;
use osd::augment::{add_noise_at, apply_rir, augment_batch, AugmentPolicy, RirAlign};
use osd::features::{FbankExtractor, FeatureConfig};
use osd::Execution;

fn noise_clip(id: &str, seed: u64, n: usize, amp: f32) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioClip::new(id, (0..n).map(|_| rng.gen_range(-amp..amp)).collect())
}

/// Bursty test speech: loud and quiet stretches, with some near-silent 10 ms blocks.
fn speechlike(seed: u64, n: usize) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = 0.3f32;
    let samples = (0..n)
        .map(|i| {
            if i % 1600 == 0 {
                env = [0.0, 0.001, 0.05, 0.3, 0.6][rng.gen_range(0..5)];
            }
            env * rng.gen_range(-1.0f32..1.0)
        })
        .collect();
    AudioClip::new(format!("sp{seed}"), samples)
}

fn oracle_mask(x: &[f32]) -> Vec<bool> {
    let power: Vec<f64> =
        x.chunks(160).map(|b| b.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / b.len() as f64).collect();
    let top = power.iter().cloned().fold(0.0, f64::max);
    let mut m = Vec::new();
    for (p, b) in power.iter().zip(x.chunks(160)) {
        let on = 10.0 * (p / top).log10() >= -40.0;
        m.extend(std::iter::repeat(on).take(b.len()));
    }
    m
}

fn masked_power(x: &[f64], m: &[bool]) -> f64 {
    let (s, n) = x.iter().zip(m).filter(|(_, &k)| k).fold((0.0, 0), |(s, n), (v, _)| (s + v * v, n + 1));
    s / n as f64
}

fn policy(p_noise: f64, p_rir: f64) -> AugmentPolicy {
    AugmentPolicy {
        p_noise,
        p_rir,
        snr_range: (5.0, 20.0),
        noise_corpus: Arc::new(vec![noise_clip("n0", 100, 24_000, 0.2), noise_clip("n1", 101, 7_000, 0.05)]),
        rir_corpus: Arc::new(vec![noise_clip("r0", 200, 800, 0.1), noise_clip("r1", 201, 3000, 0.02)]),
        seed: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn measured_snr_hits_the_request(seed in 0u64..10_000, snr in -5.0f64..30.0, offset in 0usize..50_000) {
        let speech = speechlike(seed, 32_000);
        let noise = noise_clip("n", seed + 1, 9_000, 0.4);
        let mix = add_noise_at(&speech, &noise, snr, offset).unwrap();
        let m = oracle_mask(&speech.samples);
        let s: Vec<f64> = speech.samples.iter().map(|&v| v as f64).collect();
        let n: Vec<f64> = mix
            .clip
            .samples
            .iter()
            .zip(&s)
            .map(|(&y, x)| y as f64 / mix.peak_scale - x)
            .collect();
        let measured = 10.0 * (masked_power(&s, &m) / masked_power(&n, &m)).log10();
        prop_assert!((measured - snr).abs() < 0.05, "asked {} got {}", snr, measured);
        prop_assert!(mix.clip.samples.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn reverberation_keeps_length_and_rms(seed in 0u64..10_000, rir_len in 1usize..2000) {
        let speech = speechlike(seed, 16_000);
        let rir = noise_clip("r", seed + 7, rir_len, 0.5);
        for align in [RirAlign::None, RirAlign::Peak] {
            let out = apply_rir(&speech, &rir, align).unwrap();
            prop_assert_eq!(out.len(), speech.len());
            prop_assert_eq!(&out.source_id, &speech.source_id);
            let rms = |x: &[f32]| (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
            let (a, b) = (rms(&speech.samples), rms(&out.samples));
            prop_assert!((a - b).abs() <= 1e-6 * a, "rms {} -> {}", a, b);
        }
    }

    #[test]
    fn peak_aligned_reverb_matches_direct_convolution(seed in 0u64..10_000, len in 1usize..300, peak in 0usize..300) {
        let speech = speechlike(seed, 4000);
        let mut rir = noise_clip("r", seed + 3, len.max(peak + 1), 0.1);
        rir.samples[peak] = 1.0;
        let out = apply_rir(&speech, &rir, RirAlign::Peak).unwrap();
        let direct = common::direct_convolution(&speech.samples, &rir.samples, peak);
        let scale = {
            let e = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
            let s: Vec<f64> = speech.samples.iter().map(|&v| v as f64).collect();
            (e(&s) / e(&direct)).sqrt()
        };
        let expected: Vec<f64> = direct.iter().map(|v| v * scale).collect();
        let got: Vec<f64> = out.samples.iter().map(|&v| v as f64).collect();
        prop_assert!(common::relative_error(&got, &expected) < 1e-6);
    }

    #[test]
    fn augmentation_preserves_segment_shape(seed in 0u64..1000, p_noise in 0.0f64..=1.0, p_rir in 0.0f64..=1.0) {
        let segs: Vec<AudioClip> = (0..6).map(|i| speechlike(seed * 10 + i, 8_000 + 160 * i as usize)).collect();
        let out = augment_batch(&segs, &policy(p_noise, p_rir), seed, Execution::Sequential).unwrap();
        let ex = FbankExtractor::new(FeatureConfig::default()).unwrap();
        for ((a, _), s) in out.iter().zip(&segs) {
            prop_assert_eq!(a.len(), s.len());
            prop_assert_eq!(&a.source_id, &s.source_id);
            prop_assert_eq!(ex.compute(&a.samples).unwrap().ncols(), ex.compute(&s.samples).unwrap().ncols());
        }
    }
}

#[test]
fn snr_draws_are_uniform_over_the_range() {
    // Pearson chi-square over five equal bins, 4 degrees of freedom, 5% critical value.
    let segs: Vec<AudioClip> = (0..1000).map(|i| speechlike(i, 1600)).collect();
    let out = augment_batch(&segs, &policy(1.0, 0.0), 42, Execution::Parallel).unwrap();
    let mut bins = [0usize; 5];
    for (_, d) in &out {
        let (_, snr, _) = d.noise.expect("p_noise = 1 always adds noise");
        assert!((5.0..=20.0).contains(&snr));
        bins[(((snr - 5.0) / 3.0) as usize).min(4)] += 1;
    }
    let expected = 200.0;
    let chi2: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 9.488, "chi-square {chi2:.3} for bins {bins:?}");
}

#[test]
fn application_rates_follow_probabilities() {
    let segs: Vec<AudioClip> = (0..2000).map(|i| speechlike(i, 800)).collect();
    let out = augment_batch(&segs, &policy(0.3, 0.7), 5, Execution::Parallel).unwrap();
    let n = out.len() as f64;
    let noise = out.iter().filter(|(_, d)| d.noise.is_some()).count() as f64;
    let rir = out.iter().filter(|(_, d)| d.rir.is_some()).count() as f64;
    // four standard deviations of a binomial proportion
    for (got, p) in [(noise / n, 0.3), (rir / n, 0.7)] {
        let sd = (p * (1.0 - p) / n).sqrt();
        assert!((got - p).abs() < 4.0 * sd, "rate {got} vs {p}");
    }
}

#[test]
fn decisions_are_reproducible_and_schedule_free() {
    let segs: Vec<AudioClip> = (0..12).map(|i| speechlike(i, 4000)).collect();
    let p = policy(0.5, 0.5);
    let a = augment_batch(&segs, &p, 77, Execution::Sequential).unwrap();
    let b = augment_batch(&segs, &p, 77, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    // segment i's draws do not depend on how many segments follow it
    let prefix = augment_batch(&segs[..5], &p, 77, Execution::Parallel).unwrap();
    assert_eq!(&a[..5], prefix.as_slice());
    let other = augment_batch(&segs, &p, 78, Execution::Parallel).unwrap();
    assert_ne!(a, other);
}

#[test]
fn identity_policy_leaves_audio_untouched() {
    let segs: Vec<AudioClip> = (0..4).map(|i| speechlike(i, 4000)).collect();
    let out = augment_batch(&segs, &AugmentPolicy::identity(), 1, Execution::Parallel).unwrap();
    for ((a, d), s) in out.iter().zip(&segs) {
        assert_eq!(a, s);
        assert!(d.rir.is_none() && d.noise.is_none());
    }
}

#[test]
fn policy_without_corpus_is_rejected() {
    let p = AugmentPolicy {
        p_noise: 0.5,
        ..AugmentPolicy::identity()
    };
    assert!(matches!(p.validate(), Err(osd::OsdError::Config(_))));
    let bad = AugmentPolicy {
        snr_range: (20.0, 5.0),
        ..policy(0.5, 0.5)
    };
    assert!(bad.validate().is_err());
}
