use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::audio::SampleSpan;
use crate::error::{OsdError, Result};

/// One manifest line: `segment_id  audio_path  start_sample  end_sample  recording_id  dataset_tag`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub segment_id: String,
    pub audio_path: PathBuf,
    pub span: SampleSpan,
    pub recording_id: String,
    pub dataset_tag: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative audio paths are resolved against.
    pub base_dir: PathBuf,
}

impl SegmentManifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = SegmentManifest {
            records,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OsdError::io(format!("reading manifest {}", path.display()), e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, path, base)
    }

    pub fn parse(text: &str, origin: &Path, base_dir: PathBuf) -> Result<Self> {
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| OsdError::Parse {
                path: origin.to_path_buf(),
                line: idx + 1,
                reason,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(err(format!("expected 6 tab-separated fields, found {}", f.len())));
            }
            let sample = |s: &str, name: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| err(format!("invalid {name} '{s}'")))
            };
            let start = sample(f[2], "start_sample")?;
            let end = sample(f[3], "end_sample")?;
            records.push(ManifestRecord {
                segment_id: f[0].to_string(),
                audio_path: PathBuf::from(f[1]),
                span: SampleSpan { start, end },
                recording_id: f[4].to_string(),
                dataset_tag: f[5].to_string(),
            });
        }
        let m = SegmentManifest { records, base_dir };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.segment_id.as_str()) {
                return Err(OsdError::Data(format!("duplicate segment_id '{}'", r.segment_id)));
            }
            if r.span.is_empty() {
                return Err(OsdError::Data(format!(
                    "segment '{}' has empty span {}..{}",
                    r.segment_id, r.span.start, r.span.end
                )));
            }
            for (name, v) in [
                ("segment_id", &r.segment_id),
                ("recording_id", &r.recording_id),
                ("dataset_tag", &r.dataset_tag),
            ] {
                if v.is_empty() || v.contains(['\t', '\n']) {
                    return Err(OsdError::Data(format!("invalid {name} '{v}'")));
                }
            }
        }
        Ok(())
    }

    pub fn resolve_audio(&self, record: &ManifestRecord) -> PathBuf {
        if record.audio_path.is_absolute() {
            record.audio_path.clone()
        } else {
            self.base_dir.join(&record.audio_path)
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("#segment_id\taudio_path\tstart_sample\tend_sample\trecording_id\tdataset_tag\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.segment_id,
                r.audio_path.display(),
                r.span.start,
                r.span.end,
                r.recording_id,
                r.dataset_tag
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())
            .map_err(|e| OsdError::io(format!("writing manifest {}", path.display()), e))
    }

    pub fn tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = self.records.iter().map(|r| r.dataset_tag.clone()).collect();
        tags.sort();
        tags.dedup();
        tags
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_write_round_trip() {
        let text = "rec_0000\taudio/rec.wav\t0\t64000\trec\tali\n\
                    rec_0001\taudio/rec.wav\t64000\t96000\trec\tali\n";
        let m = SegmentManifest::parse(text, Path::new("m.tsv"), PathBuf::from("/data")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.records[1].span, SampleSpan { start: 64000, end: 96000 });
        assert_eq!(m.resolve_audio(&m.records[0]), PathBuf::from("/data/audio/rec.wav"));
        let again = SegmentManifest::parse(&m.to_tsv(), Path::new("m.tsv"), PathBuf::from("/data")).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn duplicate_ids_and_bad_fields_rejected() {
        let dup = "a\tx.wav\t0\t10\tr\tt\na\tx.wav\t10\t20\tr\tt\n";
        assert!(SegmentManifest::parse(dup, Path::new("m"), PathBuf::new()).is_err());
        let short = "a\tx.wav\t0\t10\tr\n";
        assert!(matches!(
            SegmentManifest::parse(short, Path::new("m"), PathBuf::new()),
            Err(OsdError::Parse { line: 1, .. })
        ));
        let empty_span = "a\tx.wav\t10\t10\tr\tt\n";
        assert!(SegmentManifest::parse(empty_span, Path::new("m"), PathBuf::new()).is_err());
    }
}
