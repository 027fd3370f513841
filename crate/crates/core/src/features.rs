//! Log-mel filterbank features: 25 ms Hann windows every 10 ms, 64 HTK-style
//! triangular filters between 0 and 8 kHz, `ln(max(power, floor))`.
//!
//! Framing is pad-to-center: frame `i` is centred on sample `i * hop` and samples
//! outside the span read as zero, so a span of `n` samples yields `n / hop` frames
//! (400 for a 4 s span).

use std::fmt::Write as _;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use sha2::{Digest, Sha256};

use crate::audio::{AudioClip, Segment, SAMPLE_RATE};
use crate::error::{OsdError, Result};

pub const MEL_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub hop_seconds: f64,
    pub window_seconds: f64,
    pub mel_bins: usize,
    pub n_fft: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub floor: f64,
    pub segment_seconds: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: SAMPLE_RATE,
            hop_seconds: 0.010,
            window_seconds: 0.025,
            mel_bins: MEL_BINS,
            n_fft: 512,
            fmin: 0.0,
            fmax: 8000.0,
            floor: 1e-10,
            segment_seconds: 4.0,
        }
    }
}

impl FeatureConfig {
    pub fn hop_samples(&self) -> usize {
        (self.hop_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn window_samples(&self) -> usize {
        (self.window_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn segment_samples(&self) -> usize {
        (self.segment_seconds * self.sample_rate as f64).round() as usize
    }

    /// Frames per full segment (400 at the defaults).
    pub fn frames_per_segment(&self) -> usize {
        self.segment_samples() / self.hop_samples()
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        n_samples / self.hop_samples()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OsdError::Config(m));
        if self.sample_rate != SAMPLE_RATE {
            return bad(format!("feature sample rate must be 16000, got {}", self.sample_rate));
        }
        if self.mel_bins != MEL_BINS {
            return bad(format!("mel_bins must be 64, got {}", self.mel_bins));
        }
        if self.hop_samples() == 0 || self.window_samples() == 0 {
            return bad("hop and window must span at least one sample".into());
        }
        if self.window_samples() > self.n_fft {
            return bad(format!(
                "window of {} samples exceeds n_fft {}",
                self.window_samples(),
                self.n_fft
            ));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0)
        {
            return bad(format!("bad mel range {}..{}", self.fmin, self.fmax));
        }
        if !(self.floor > 0.0) {
            return bad("floor must be positive".into());
        }
        if !(self.segment_seconds > 0.0) {
            return bad("segment length must be positive".into());
        }
        Ok(())
    }

    /// Self-describing key-value text stored next to cached features.
    pub fn digest_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sample_rate={}", self.sample_rate);
        let _ = writeln!(s, "hop={}", self.hop_seconds);
        let _ = writeln!(s, "window={}", self.window_seconds);
        let _ = writeln!(s, "window_fn=hann_periodic");
        let _ = writeln!(s, "framing=pad_to_center");
        let _ = writeln!(s, "bins={}", self.mel_bins);
        let _ = writeln!(s, "n_fft={}", self.n_fft);
        let _ = writeln!(s, "fmin={}", self.fmin);
        let _ = writeln!(s, "fmax={}", self.fmax);
        let _ = writeln!(s, "mel=htk_triangular_unnormalized");
        let _ = writeln!(s, "energy=power");
        let _ = writeln!(s, "floor={:e}", self.floor);
        let _ = writeln!(s, "segment_seconds={}", self.segment_seconds);
        s
    }

    pub fn digest(&self) -> String {
        short_digest(self.digest_text().as_bytes())
    }
}

/// First 16 hex chars of SHA-256.
pub fn short_digest(bytes: &[u8]) -> String {
    let hash = Sha256::digest(bytes);
    hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the triangular filters.
pub fn mel_center_frequencies(cfg: &FeatureConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.mel_bins].to_vec()
}

fn mel_edges(cfg: &FeatureConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let n = cfg.mel_bins + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// One triangular filter stored as its first nonzero FFT bin plus weights.
#[derive(Debug, Clone)]
struct MelFilter {
    first_bin: usize,
    weights: Vec<f64>,
}

#[derive(Clone)]
pub struct FbankExtractor {
    cfg: FeatureConfig,
    window: Vec<f64>,
    filters: Vec<MelFilter>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FbankExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FbankExtractor").field("cfg", &self.cfg).finish()
    }
}

impl FbankExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let win = cfg.window_samples();
        let window = (0..win)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
            .collect();
        let edges = mel_edges(&cfg);
        let n_bins = cfg.n_fft / 2 + 1;
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let filters = (0..cfg.mel_bins)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                let dense: Vec<f64> = (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        let up = (f - l) / (c - l);
                        let down = (r - f) / (r - c);
                        up.min(down).max(0.0)
                    })
                    .collect();
                let first = dense.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last = dense.iter().rposition(|&w| w > 0.0).unwrap_or(0);
                MelFilter {
                    first_bin: first,
                    weights: dense[first..=last.max(first)].to_vec(),
                }
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(FbankExtractor {
            cfg,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Dense `mel_bins x (n_fft/2+1)` filter matrix.
    pub fn filter_matrix(&self) -> Array2<f64> {
        let n_bins = self.cfg.n_fft / 2 + 1;
        let mut m = Array2::zeros((self.cfg.mel_bins, n_bins));
        for (i, f) in self.filters.iter().enumerate() {
            for (j, &w) in f.weights.iter().enumerate() {
                m[[i, f.first_bin + j]] = w;
            }
        }
        m
    }

    /// Log-mel energies of `samples`, shape `mel_bins x (len / hop)`.
    pub fn compute(&self, samples: &[f32]) -> Result<Array2<f64>> {
        let win = self.cfg.window_samples();
        if samples.len() < win {
            return Err(OsdError::InvalidInput(format!(
                "span of {} samples is shorter than one {win}-sample analysis window",
                samples.len()
            )));
        }
        let hop = self.cfg.hop_samples();
        let frames = self.cfg.frame_count(samples.len());
        let n_fft = self.cfg.n_fft;
        let half = win / 2;
        let log_floor = self.cfg.floor.ln();
        let mut out = Array2::zeros((self.cfg.mel_bins, frames));
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_fft / 2 + 1];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            let origin = (t * hop) as isize - half as isize;
            for (i, w) in self.window.iter().enumerate() {
                let idx = origin + i as isize;
                if idx >= 0 && (idx as usize) < samples.len() {
                    buf[i].re = samples[idx as usize] as f64 * w;
                }
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, filt) in self.filters.iter().enumerate() {
                let energy: f64 = filt
                    .weights
                    .iter()
                    .zip(&power[filt.first_bin..])
                    .map(|(w, p)| w * p)
                    .sum();
                out[[m, t]] = if energy > self.cfg.floor {
                    energy.ln()
                } else {
                    log_floor
                };
            }
        }
        Ok(out)
    }

    /// Features of one segment, zero-padded to the nominal segment length so that
    /// every matrix has `frames_per_segment` columns.
    pub fn segment_features(&self, clip: &AudioClip, seg: &Segment) -> Result<FeatureMatrix> {
        let nominal = self.cfg.segment_samples();
        let span = clip.slice(&seg.span);
        if span.len() > nominal {
            return Err(OsdError::InvalidInput(format!(
                "segment {} longer than nominal length",
                seg.segment_id
            )));
        }
        let valid = self.cfg.frame_count(span.len());
        if valid == 0 {
            return Err(OsdError::InvalidInput(format!(
                "segment {} has no complete frame",
                seg.segment_id
            )));
        }
        let values = if span.len() == nominal {
            self.compute(span)?
        } else {
            let mut padded = span.to_vec();
            padded.resize(nominal, 0.0);
            self.compute(&padded)?
        };
        Ok(FeatureMatrix::from_f64(
            seg.segment_id.clone(),
            &values,
            valid,
            &self.cfg,
        ))
    }
}

/// `mel_bins x frame_count` log-mel matrix for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f32>,
    pub valid_frames: usize,
    pub hop_seconds: f64,
    pub window_seconds: f64,
    pub segment_id: String,
}

impl FeatureMatrix {
    pub fn from_f64(
        segment_id: String,
        values: &Array2<f64>,
        valid_frames: usize,
        cfg: &FeatureConfig,
    ) -> Self {
        FeatureMatrix {
            values: values.mapv(|v| v as f32),
            valid_frames,
            hop_seconds: cfg.hop_seconds,
            window_seconds: cfg.window_seconds,
            segment_id,
        }
    }

    pub fn mel_bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn frame_count(&self) -> usize {
        self.values.ncols()
    }

    /// Frames-major `frame_count x mel_bins` copy in f64, the layout the models consume.
    pub fn frames_major(&self) -> Array2<f64> {
        self.values.t().mapv(|v| v as f64)
    }
}
