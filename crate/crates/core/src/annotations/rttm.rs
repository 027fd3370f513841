use std::fmt::Write as _;
use std::path::Path;

use crate::error::{OsdError, Result};

/// One speaker turn `[onset, onset + duration)` in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerTurn {
    pub recording_id: String,
    pub onset: f64,
    pub duration: f64,
    pub speaker_id: String,
}

impl SpeakerTurn {
    pub fn new(
        recording_id: impl Into<String>,
        onset: f64,
        duration: f64,
        speaker_id: impl Into<String>,
    ) -> Result<Self> {
        if !(onset >= 0.0 && onset.is_finite()) {
            return Err(OsdError::InvalidInput(format!("turn onset {onset} must be >= 0")));
        }
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(OsdError::InvalidInput(format!(
                "turn duration {duration} must be > 0"
            )));
        }
        Ok(SpeakerTurn {
            recording_id: recording_id.into(),
            onset,
            duration,
            speaker_id: speaker_id.into(),
        })
    }

    pub fn offset(&self) -> f64 {
        self.onset + self.duration
    }
}

pub fn parse_rttm(path: &Path) -> Result<Vec<SpeakerTurn>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| OsdError::io(format!("reading {}", path.display()), e))?;
    parse_rttm_str(&text, path)
}

/// Parse RTTM text. `SPEAKER <rec> <chan> <onset> <dur> <NA> <NA> <spk> ...`;
/// every other line type is skipped.
pub fn parse_rttm_str(text: &str, origin: &Path) -> Result<Vec<SpeakerTurn>> {
    let mut turns = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() != Some(&"SPEAKER") {
            continue;
        }
        let err = |reason: String| OsdError::Parse {
            path: origin.to_path_buf(),
            line: idx + 1,
            reason,
        };
        if fields.len() < 8 {
            return Err(err(format!(
                "SPEAKER line has {} fields, expected at least 8",
                fields.len()
            )));
        }
        let number = |i: usize, name: &str| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| err(format!("invalid {name} '{}'", fields[i])))
        };
        let onset = number(3, "onset")?;
        let duration = number(4, "duration")?;
        let turn = SpeakerTurn::new(fields[1], onset, duration, fields[7])
            .map_err(|e| err(e.to_string()))?;
        turns.push(turn);
    }
    Ok(turns)
}

pub fn format_rttm(turns: &[SpeakerTurn]) -> String {
    let mut out = String::new();
    for t in turns {
        let _ = writeln!(
            out,
            "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
            t.recording_id, t.onset, t.duration, t.speaker_id
        );
    }
    out
}
