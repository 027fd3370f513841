//! 16 kHz mono audio ingestion and fixed-length segmentation.

use std::path::Path;

use crate::error::{OsdError, Result};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub channel_count: u16,
    pub source_id: String,
}

impl AudioClip {
    pub fn new(source_id: impl Into<String>, samples: Vec<f32>) -> Self {
        AudioClip {
            samples,
            sample_rate: SAMPLE_RATE,
            channel_count: 1,
            source_id: source_id.into(),
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn slice(&self, span: &SampleSpan) -> &[f32] {
        &self.samples[span.start..span.end]
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Average channels of multi-channel files instead of rejecting them.
    pub downmix: bool,
    /// Linearly resample other rates to 16 kHz instead of rejecting them.
    pub resample: bool,
}

pub fn load_audio(path: &Path, opts: LoadOptions) -> Result<AudioClip> {
    let corrupt = |reason: String| OsdError::CorruptAudio {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => OsdError::io(format!("opening {}", path.display()), io),
        other => corrupt(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels == 0 {
        return Err(corrupt("zero channels".into()));
    }
    if spec.channels > 1 && !opts.downmix {
        return Err(OsdError::MultiChannel {
            path: path.to_path_buf(),
            channels: spec.channels,
        });
    }
    if spec.sample_rate != SAMPLE_RATE && !opts.resample {
        return Err(OsdError::UnsupportedSampleRate {
            path: path.to_path_buf(),
            rate: spec.sample_rate,
        });
    }

    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| corrupt(e.to_string()))?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| corrupt(e.to_string()))?
        }
    };
    if interleaved.iter().any(|s| !s.is_finite()) {
        return Err(corrupt("non-finite sample".into()));
    }

    let channels = spec.channels as usize;
    let mono = if channels == 1 {
        interleaved
    } else {
        downmix(&interleaved, channels)
    };
    let samples = if spec.sample_rate == SAMPLE_RATE {
        mono
    } else {
        resample_linear(&mono, spec.sample_rate, SAMPLE_RATE)
    };

    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(AudioClip::new(source_id, samples))
}

fn downmix(interleaved: &[f32], channels: usize) -> Vec<f32> {
    interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().map(|&s| s as f64).sum::<f64>() as f32 / channels as f32)
        .collect()
}

fn resample_linear(samples: &[f32], from: u32, to: u32) -> Vec<f32> {
    if samples.is_empty() {
        return Vec::new();
    }
    let out_len = (samples.len() as u64 * to as u64 / from as u64) as usize;
    let ratio = from as f64 / to as f64;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let left = pos.floor() as usize;
            let frac = pos - left as f64;
            let a = samples[left.min(samples.len() - 1)] as f64;
            let b = samples[(left + 1).min(samples.len() - 1)] as f64;
            (a + (b - a) * frac) as f32
        })
        .collect()
}

/// Write a 16-bit PCM mono WAV. Samples are clamped to [-1, 1].
pub fn write_wav_i16(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => OsdError::io(format!("writing {}", path.display()), io),
        other => OsdError::Data(format!("writing {}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// Half-open sample range `[start, end)` within a recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleSpan {
    pub start: usize,
    pub end: usize,
}

impl SampleSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub segment_id: String,
    pub span: SampleSpan,
    /// Nominal length in samples; `span.len() < nominal_len` marks a partial segment.
    pub nominal_len: usize,
}

impl Segment {
    pub fn is_partial(&self) -> bool {
        self.span.len() < self.nominal_len
    }
}

pub fn segment_id(source_id: &str, index: usize) -> String {
    format!("{source_id}_{index:04}")
}

/// Tile `total_samples` left to right into spans of `seg_seconds`; the last span
/// may be shorter and keeps its true length.
pub fn segment_range(
    source_id: &str,
    range: SampleSpan,
    seg_seconds: f64,
) -> Result<Vec<Segment>> {
    if !(seg_seconds > 0.0) || !seg_seconds.is_finite() {
        return Err(OsdError::InvalidInput(format!(
            "segment length must be positive, got {seg_seconds}"
        )));
    }
    if range.is_empty() {
        return Err(OsdError::InvalidInput(format!(
            "cannot segment empty audio '{source_id}'"
        )));
    }
    let seg_len = (seg_seconds * SAMPLE_RATE as f64).round() as usize;
    if seg_len == 0 {
        return Err(OsdError::InvalidInput("segment shorter than one sample".into()));
    }
    let mut out = Vec::new();
    let mut start = range.start;
    while start < range.end {
        let end = (start + seg_len).min(range.end);
        out.push(Segment {
            segment_id: segment_id(source_id, out.len()),
            span: SampleSpan { start, end },
            nominal_len: seg_len,
        });
        start = end;
    }
    Ok(out)
}

pub fn segment(clip: &AudioClip, seg_seconds: f64) -> Result<Vec<Segment>> {
    segment_range(
        &clip.source_id,
        SampleSpan {
            start: 0,
            end: clip.len(),
        },
        seg_seconds,
    )
}
