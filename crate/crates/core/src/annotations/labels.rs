use std::collections::BTreeMap;

use crate::annotations::rttm::SpeakerTurn;
use crate::audio::{Segment, SAMPLE_RATE};
use crate::error::{OsdError, Result};

/// Frame class coding, fixed project-wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum FrameClass {
    Silence = 0,
    Single = 1,
    Overlap = 2,
}

pub const CLASS_COUNT: usize = 3;
pub const CLASS_CODING: &str = "silence:0,single:1,overlap:2";

impl FrameClass {
    pub const ALL: [FrameClass; 3] = [FrameClass::Silence, FrameClass::Single, FrameClass::Overlap];

    pub fn from_speaker_count(n: usize) -> Self {
        match n {
            0 => FrameClass::Silence,
            1 => FrameClass::Single,
            _ => FrameClass::Overlap,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FrameClass::Silence),
            1 => Some(FrameClass::Single),
            2 => Some(FrameClass::Overlap),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameClass::Silence => "silence",
            FrameClass::Single => "single",
            FrameClass::Overlap => "overlap",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    pub labels: Vec<FrameClass>,
    pub hop_seconds: f64,
    pub segment_id: String,
    /// Frames at or beyond this index are padding: SILENCE and ignored by loss and metrics.
    pub valid_frames: usize,
}

impl FrameLabels {
    pub fn new(
        segment_id: impl Into<String>,
        labels: Vec<FrameClass>,
        valid_frames: usize,
        hop_seconds: f64,
    ) -> Result<Self> {
        if valid_frames > labels.len() {
            return Err(OsdError::InvalidInput(format!(
                "valid_frames {valid_frames} exceeds label length {}",
                labels.len()
            )));
        }
        if labels[valid_frames..].iter().any(|&l| l != FrameClass::Silence) {
            return Err(OsdError::InvalidInput(
                "padding frames must be SILENCE".to_string(),
            ));
        }
        Ok(FrameLabels {
            labels,
            hop_seconds,
            segment_id: segment_id.into(),
            valid_frames,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn valid(&self) -> &[FrameClass] {
        &self.labels[..self.valid_frames]
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.labels.len()).map(|i| i < self.valid_frames).collect()
    }

    pub fn class_counts(&self) -> [usize; CLASS_COUNT] {
        let mut counts = [0usize; CLASS_COUNT];
        for l in self.valid() {
            counts[l.index()] += 1;
        }
        counts
    }

    pub fn codes(&self) -> Vec<u8> {
        self.labels.iter().map(|&l| l as u8).collect()
    }
}

/// Merge each speaker's overlapping or touching turns into disjoint intervals.
pub fn merge_speaker_turns(turns: &[SpeakerTurn]) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut by_speaker: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for t in turns {
        by_speaker
            .entry(t.speaker_id.clone())
            .or_default()
            .push((t.onset, t.offset()));
    }
    for intervals in by_speaker.values_mut() {
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(intervals.len());
        for &(s, e) in intervals.iter() {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        *intervals = merged;
    }
    by_speaker
}

/// Frame layout of one segment on the recording's timeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameGrid {
    pub start_sample: usize,
    pub hop_samples: usize,
    pub frames: usize,
    pub valid_frames: usize,
}

impl FrameGrid {
    pub fn for_segment(seg: &Segment, hop_seconds: f64) -> Result<Self> {
        let hop_samples = (hop_seconds * SAMPLE_RATE as f64).round() as usize;
        if !(hop_seconds > 0.0) || hop_samples == 0 {
            return Err(OsdError::InvalidInput(format!("hop must be positive, got {hop_seconds}")));
        }
        Ok(FrameGrid {
            start_sample: seg.span.start,
            hop_samples,
            frames: seg.nominal_len / hop_samples,
            valid_frames: (seg.span.len() / hop_samples).min(seg.nominal_len / hop_samples),
        })
    }

    /// Centre time of frame `i` in seconds from the recording start.
    pub fn center(&self, i: usize) -> f64 {
        (self.start_sample + i * self.hop_samples) as f64 / SAMPLE_RATE as f64
    }

    /// Frames whose centre lies in `[a, b)`, limited to valid frames.
    fn frame_range(&self, a: f64, b: f64) -> std::ops::Range<usize> {
        let n = self.valid_frames;
        let per_frame = self.hop_samples as f64 / SAMPLE_RATE as f64;
        let origin = self.start_sample as f64 / SAMPLE_RATE as f64;
        let estimate = |t: f64| -> usize {
            let x = ((t - origin) / per_frame).ceil();
            if x <= 0.0 {
                0
            } else {
                (x as usize).min(n)
            }
        };
        // first i with center(i) >= t; the estimate is off by at most one ulp-step
        let first_at_or_after = |t: f64| -> usize {
            let mut i = estimate(t);
            while i > 0 && self.center(i - 1) >= t {
                i -= 1;
            }
            while i < n && self.center(i) < t {
                i += 1;
            }
            i
        };
        let lo = first_at_or_after(a);
        let hi = first_at_or_after(b);
        lo..hi.max(lo)
    }
}

/// Rasterize speaker turns into per-frame SILENCE/SINGLE/OVERLAP labels by
/// counting distinct active speakers at each frame centre.
pub fn rasterize_labels(
    turns: &[SpeakerTurn],
    segment: &Segment,
    hop_seconds: f64,
) -> Result<FrameLabels> {
    let grid = FrameGrid::for_segment(segment, hop_seconds)?;
    Ok(FrameLabels {
        labels: rasterize_on_grid(turns, &grid),
        hop_seconds,
        segment_id: segment.segment_id.clone(),
        valid_frames: grid.valid_frames,
    })
}

pub fn rasterize_on_grid(turns: &[SpeakerTurn], grid: &FrameGrid) -> Vec<FrameClass> {
    let mut delta = vec![0i64; grid.frames + 1];
    for intervals in merge_speaker_turns(turns).values() {
        for &(a, b) in intervals {
            let r = grid.frame_range(a, b);
            if !r.is_empty() {
                delta[r.start] += 1;
                delta[r.end] -= 1;
            }
        }
    }
    let mut active = 0i64;
    (0..grid.frames)
        .map(|i| {
            active += delta[i];
            if i < grid.valid_frames {
                FrameClass::from_speaker_count(active as usize)
            } else {
                FrameClass::Silence
            }
        })
        .collect()
}

/// OVERLAP -> 1, SILENCE and SINGLE -> 0.
pub fn collapse_to_binary(labels: &FrameLabels) -> Vec<u8> {
    labels
        .labels
        .iter()
        .map(|&l| u8::from(l == FrameClass::Overlap))
        .collect()
}
