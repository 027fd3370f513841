//! Training-time augmentation: reverberation with a room impulse response, then
//! additive noise at a random SNR. Labels are never touched.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::annotations::SegmentManifest;
use crate::audio::{load_audio, AudioClip, LoadOptions, SAMPLE_RATE};
use crate::error::{OsdError, Result};
use crate::exec::Execution;

/// Length of the blocks used to find active speech (10 ms).
const ACTIVITY_BLOCK: usize = 160;
/// Blocks more than 40 dB below the loudest block are inactive.
const ACTIVITY_FLOOR: f64 = 1e-4;
/// Above this many multiply-adds the convolution goes through the FFT.
const DIRECT_CONV_LIMIT: usize = 1 << 22;

#[derive(Debug, Clone)]
pub struct AugmentPolicy {
    pub p_noise: f64,
    pub p_rir: f64,
    pub snr_range: (f64, f64),
    pub noise_corpus: Arc<Vec<AudioClip>>,
    pub rir_corpus: Arc<Vec<AudioClip>>,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            p_noise: 0.5,
            p_rir: 0.5,
            snr_range: (5.0, 20.0),
            noise_corpus: Arc::default(),
            rir_corpus: Arc::default(),
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// A policy that never changes its input.
    pub fn identity() -> Self {
        AugmentPolicy {
            p_noise: 0.0,
            p_rir: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_noise", self.p_noise), ("p_rir", self.p_rir)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(OsdError::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        let (lo, hi) = self.snr_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(OsdError::Config(format!("bad SNR range [{lo}, {hi}]")));
        }
        if self.p_noise > 0.0 && self.noise_corpus.is_empty() {
            return Err(OsdError::Config("p_noise > 0 needs a non-empty noise corpus".into()));
        }
        if self.p_rir > 0.0 && self.rir_corpus.is_empty() {
            return Err(OsdError::Config("p_rir > 0 needs a non-empty RIR corpus".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.p_noise == 0.0 && self.p_rir == 0.0
    }
}

/// Load every span listed in a manifest as a separate clip.
pub fn load_corpus(manifest: &SegmentManifest) -> Result<Vec<AudioClip>> {
    let mut cache: std::collections::HashMap<std::path::PathBuf, AudioClip> = Default::default();
    let mut out = Vec::with_capacity(manifest.len());
    for rec in &manifest.records {
        let path = manifest.resolve_audio(rec);
        if !cache.contains_key(&path) {
            let clip = load_audio(&path, LoadOptions::default())?;
            cache.insert(path.clone(), clip);
        }
        let clip = &cache[&path];
        if rec.span.end > clip.len() {
            return Err(OsdError::Data(format!(
                "{}: span {}..{} beyond {} samples",
                rec.segment_id,
                rec.span.start,
                rec.span.end,
                clip.len()
            )));
        }
        out.push(AudioClip::new(rec.segment_id.clone(), clip.slice(&rec.span).to_vec()));
    }
    Ok(out)
}

fn check_clip(clip: &AudioClip, what: &str) -> Result<()> {
    if clip.sample_rate != SAMPLE_RATE || clip.channel_count != 1 {
        return Err(OsdError::InvalidInput(format!(
            "{what} '{}' must be 16 kHz mono",
            clip.source_id
        )));
    }
    if clip.samples.iter().any(|v| !v.is_finite()) {
        return Err(OsdError::InvalidInput(format!("{what} '{}' has non-finite samples", clip.source_id)));
    }
    Ok(())
}

/// Samples belonging to 10 ms blocks within 40 dB of the loudest block.
pub fn active_mask(samples: &[f32]) -> Vec<bool> {
    let block_power: Vec<f64> = samples
        .chunks(ACTIVITY_BLOCK)
        .map(|b| b.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / b.len() as f64)
        .collect();
    let max = block_power.iter().cloned().fold(0.0, f64::max);
    let mut mask = Vec::with_capacity(samples.len());
    for (b, chunk) in block_power.iter().zip(samples.chunks(ACTIVITY_BLOCK)) {
        let on = max > 0.0 && *b >= max * ACTIVITY_FLOOR;
        mask.extend(std::iter::repeat(on).take(chunk.len()));
    }
    mask
}

fn masked_power(x: impl Iterator<Item = f64>, mask: &[bool]) -> f64 {
    let (sum, n) = x
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Noise looped (or cropped) to `len` samples starting at `offset`.
pub fn tile_noise(noise: &[f32], len: usize, offset: usize) -> Vec<f32> {
    (0..len).map(|i| noise[(offset + i) % noise.len()]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMix {
    pub clip: AudioClip,
    /// Gain applied to the noise before mixing.
    pub gain: f64,
    /// Scale applied to the mixture to avoid clipping (1 when none was needed).
    pub peak_scale: f64,
}

pub fn add_noise(speech: &AudioClip, noise: &AudioClip, snr_db: f64) -> Result<NoiseMix> {
    add_noise_at(speech, noise, snr_db, 0)
}

/// Mix `noise` (looped from `offset`) into `speech` so that the power ratio over
/// the active part of `speech` equals `snr_db`. `+inf` returns the input as is.
pub fn add_noise_at(speech: &AudioClip, noise: &AudioClip, snr_db: f64, offset: usize) -> Result<NoiseMix> {
    check_clip(speech, "speech")?;
    check_clip(noise, "noise")?;
    if snr_db == f64::INFINITY {
        return Ok(NoiseMix {
            clip: speech.clone(),
            gain: 0.0,
            peak_scale: 1.0,
        });
    }
    if snr_db.is_nan() {
        return Err(OsdError::InvalidInput("SNR is NaN".into()));
    }
    if noise.is_empty() {
        return Err(OsdError::InvalidInput(format!("noise '{}' is empty", noise.source_id)));
    }
    let mask = active_mask(&speech.samples);
    let p_speech = masked_power(speech.samples.iter().map(|&v| v as f64), &mask);
    if p_speech == 0.0 {
        return Err(OsdError::InvalidInput(format!("speech '{}' has zero power", speech.source_id)));
    }
    let tiled = tile_noise(&noise.samples, speech.len(), offset % noise.len());
    let p_noise = masked_power(tiled.iter().map(|&v| v as f64), &mask);
    if p_noise == 0.0 {
        return Err(OsdError::InvalidInput(format!(
            "noise '{}' has zero power over the speech region",
            noise.source_id
        )));
    }
    let gain = (p_speech / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mixed: Vec<f64> = speech
        .samples
        .iter()
        .zip(&tiled)
        .map(|(&s, &n)| s as f64 + gain * n as f64)
        .collect();
    let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let peak_scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    let mut clip = speech.clone();
    clip.samples = mixed.iter().map(|&v| (v * peak_scale) as f32).collect();
    Ok(NoiseMix { clip, gain, peak_scale })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RirAlign {
    /// Keep the convolution as is; a delayed impulse delays the output.
    None,
    /// Shift the output so the impulse response's peak lands at sample 0.
    #[default]
    Peak,
}

fn peak_index(h: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in h.iter().enumerate() {
        if v.abs() > h[best].abs() {
            best = i;
        }
    }
    best
}

/// `y[n] = sum_k h[k] x[n + shift - k]` for `n in 0..x.len()`.
pub fn convolve_truncated(x: &[f32], h: &[f32], shift: usize) -> Vec<f64> {
    let n = x.len();
    if n * h.len() <= DIRECT_CONV_LIMIT {
        let mut y = vec![0.0f64; n];
        for (k, &hk) in h.iter().enumerate() {
            if hk == 0.0 {
                continue;
            }
            let hk = hk as f64;
            // output index o reads x[o + shift - k]
            let lo = k.saturating_sub(shift);
            for o in lo..n {
                let src = o + shift - k;
                if src >= n {
                    break;
                }
                y[o] += hk * x[src] as f64;
            }
        }
        return y;
    }
    let full = n + h.len() - 1;
    let size = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |v: &[f32]| -> Vec<Complex<f64>> {
        let mut out: Vec<Complex<f64>> = v.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
        out.resize(size, Complex::new(0.0, 0.0));
        out
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    let scale = 1.0 / size as f64;
    (0..n)
        .map(|o| {
            let i = o + shift;
            if i < full {
                a[i].re * scale
            } else {
                0.0
            }
        })
        .collect()
}

fn rms(x: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = x.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

/// Reverberate `speech` with `rir`, keep the input length and restore the input RMS.
pub fn apply_rir(speech: &AudioClip, rir: &AudioClip, align: RirAlign) -> Result<AudioClip> {
    check_clip(speech, "speech")?;
    if rir.is_empty() {
        return Err(OsdError::InvalidInput(format!("impulse response '{}' is empty", rir.source_id)));
    }
    if rir.samples.iter().any(|v| !v.is_finite()) || rir.samples.iter().all(|&v| v == 0.0) {
        return Err(OsdError::InvalidInput(format!(
            "impulse response '{}' must be finite and nonzero",
            rir.source_id
        )));
    }
    let shift = match align {
        RirAlign::None => 0,
        RirAlign::Peak => peak_index(&rir.samples),
    };
    let y = convolve_truncated(&speech.samples, &rir.samples, shift);
    let target = rms(speech.samples.iter().map(|&v| v as f64));
    let got = rms(y.iter().cloned());
    let scale = if got > 0.0 { target / got } else { 0.0 };
    let mut out = speech.clone();
    out.samples = y.iter().map(|&v| (v * scale) as f32).collect();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDecision {
    pub rir: Option<usize>,
    /// Noise clip index, SNR, loop offset.
    pub noise: Option<(usize, f64, usize)>,
    pub noise_gain: f64,
    pub peak_scale: f64,
}

fn substream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draw the decisions for one segment. Every draw happens regardless of the
/// outcome so later draws do not depend on earlier ones.
fn decide(policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> (Option<usize>, Option<(usize, f64, usize)>) {
    let use_rir = rng.gen::<f64>() < policy.p_rir;
    let rir_pick = rng.gen::<u64>();
    let use_noise = rng.gen::<f64>() < policy.p_noise;
    let noise_pick = rng.gen::<u64>();
    let (lo, hi) = policy.snr_range;
    let snr = lo + (hi - lo) * rng.gen::<f64>();
    let offset = rng.gen::<u64>();
    let rir = use_rir.then(|| (rir_pick % policy.rir_corpus.len() as u64) as usize);
    let noise = use_noise.then(|| {
        let k = (noise_pick % policy.noise_corpus.len() as u64) as usize;
        let off = (offset % policy.noise_corpus[k].len().max(1) as u64) as usize;
        (k, snr, off)
    });
    (rir, noise)
}

/// Augment each segment independently: RIR with probability `p_rir`, then
/// noise with probability `p_noise`. Segment `i` draws from substream `i` of
/// `step_seed`, so results do not depend on scheduling.
pub fn augment_batch(
    segments: &[AudioClip],
    policy: &AugmentPolicy,
    step_seed: u64,
    exec: Execution,
) -> Result<Vec<(AudioClip, AugmentDecision)>> {
    policy.validate()?;
    exec.map_indexed(segments, |i, seg| {
        let mut rng = substream(step_seed, i);
        let (rir, noise) = decide(policy, &mut rng);
        let mut clip = seg.clone();
        if let Some(r) = rir {
            clip = apply_rir(&clip, &policy.rir_corpus[r], RirAlign::Peak)?;
        }
        let mut decision = AugmentDecision {
            rir,
            noise,
            noise_gain: 0.0,
            peak_scale: 1.0,
        };
        if let Some((k, snr, off)) = noise {
            // a silent segment has no active region to set an SNR against
            if clip.samples.iter().any(|&v| v != 0.0) {
                let mix = add_noise_at(&clip, &policy.noise_corpus[k], snr, off)?;
                decision.noise_gain = mix.gain;
                decision.peak_scale = mix.peak_scale;
                clip = mix.clip;
            }
        }
        Ok((clip, decision))
    })
    .into_iter()
    .collect()
}
