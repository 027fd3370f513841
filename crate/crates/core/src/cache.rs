//! On-disk feature and label cache.
//!
//! Each file is a short `key=value` text header ending in `end\n`, followed by
//! raw little-endian data: `f32` mel-major values for features, one code byte per
//! frame for labels. Headers carry the feature-config digest and a digest of the
//! source material so stale entries are detected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::annotations::{FrameClass, FrameLabels, CLASS_CODING};
use crate::error::{OsdError, Result};
use crate::features::FeatureMatrix;

const FEATURE_MAGIC: &str = "OSDFBANK1";
const LABEL_MAGIC: &str = "OSDLAB1";

pub fn feature_path(cache_dir: &Path, segment_id: &str) -> PathBuf {
    cache_dir.join("features").join(format!("{segment_id}.fbank"))
}

pub fn label_path(cache_dir: &Path, segment_id: &str) -> PathBuf {
    cache_dir.join("labels").join(format!("{segment_id}.lab"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheMeta {
    pub feature_digest: String,
    pub source_digest: String,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> OsdError {
    OsdError::Data(format!("cache file {}: {}", path.display(), reason.into()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| OsdError::io(format!("creating {}", dir.display()), e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| OsdError::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| OsdError::io(format!("renaming to {}", path.display()), e))
}

fn split_header<'b>(path: &Path, bytes: &'b [u8], magic: &str) -> Result<(BTreeMap<String, String>, &'b [u8])> {
    let marker = b"\nend\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| corrupt(path, "missing header terminator"))?
        + marker.len();
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt(path, "header is not UTF-8"))?;
    Ok((parse_header(path, text.lines(), magic)?, &bytes[end..]))
}

fn parse_header<'a>(path: &Path, mut lines: impl Iterator<Item = &'a str>, magic: &str) -> Result<BTreeMap<String, String>> {
    if lines.next() != Some(magic) {
        return Err(corrupt(path, format!("not a {magic} file")));
    }
    let mut kv = BTreeMap::new();
    for line in lines {
        if line == "end" {
            return Ok(kv);
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(path, format!("bad header line '{line}'")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    Err(corrupt(path, "missing header terminator"))
}

fn field<'m>(path: &Path, kv: &'m BTreeMap<String, String>, k: &str) -> Result<&'m str> {
    kv.get(k)
        .map(String::as_str)
        .ok_or_else(|| corrupt(path, format!("missing '{k}'")))
}

fn number<T: std::str::FromStr>(path: &Path, kv: &BTreeMap<String, String>, k: &str) -> Result<T> {
    field(path, kv, k)?
        .parse()
        .map_err(|_| corrupt(path, format!("bad '{k}'")))
}

fn meta(path: &Path, kv: &BTreeMap<String, String>) -> Result<CacheMeta> {
    Ok(CacheMeta {
        feature_digest: field(path, kv, "feature_digest")?.to_string(),
        source_digest: field(path, kv, "source_digest")?.to_string(),
    })
}

/// Header of a cache file without reading its payload; `None` if absent or unreadable.
pub fn read_meta(path: &Path) -> Option<CacheMeta> {
    let f = std::fs::File::open(path).ok()?;
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .map_while(|l| l.ok())
        .take_while(|l| l != "end")
        .take(64)
        .collect();
    let magic = lines.first()?.clone();
    if magic != FEATURE_MAGIC && magic != LABEL_MAGIC {
        return None;
    }
    let kv = parse_header(path, lines.iter().map(String::as_str).chain(["end"]), &magic).ok()?;
    meta(path, &kv).ok()
}

pub fn write_features(path: &Path, fm: &FeatureMatrix, meta: &CacheMeta) -> Result<()> {
    let mut h = String::new();
    let _ = writeln!(h, "{FEATURE_MAGIC}");
    let _ = writeln!(h, "segment_id={}", fm.segment_id);
    let _ = writeln!(h, "feature_digest={}", meta.feature_digest);
    let _ = writeln!(h, "source_digest={}", meta.source_digest);
    let _ = writeln!(h, "mel_bins={}", fm.mel_bins());
    let _ = writeln!(h, "frames={}", fm.frame_count());
    let _ = writeln!(h, "valid={}", fm.valid_frames);
    let _ = writeln!(h, "hop={}", fm.hop_seconds);
    let _ = writeln!(h, "window={}", fm.window_seconds);
    let _ = writeln!(h, "dtype=f32le");
    h.push_str("end\n");
    let mut bytes = h.into_bytes();
    bytes.reserve(fm.values.len() * 4);
    for v in fm.values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_features(path: &Path) -> Result<(FeatureMatrix, CacheMeta)> {
    let bytes = std::fs::read(path).map_err(|e| OsdError::io(format!("reading {}", path.display()), e))?;
    let (kv, body) = split_header(path, &bytes, FEATURE_MAGIC)?;
    if field(path, &kv, "dtype")? != "f32le" {
        return Err(corrupt(path, "unsupported dtype"));
    }
    let bins: usize = number(path, &kv, "mel_bins")?;
    let frames: usize = number(path, &kv, "frames")?;
    let valid: usize = number(path, &kv, "valid")?;
    if body.len() != bins * frames * 4 || valid > frames {
        return Err(corrupt(path, "payload size does not match header"));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    let values = Array2::from_shape_vec((bins, frames), data).map_err(|e| corrupt(path, e.to_string()))?;
    let fm = FeatureMatrix {
        values,
        valid_frames: valid,
        hop_seconds: number(path, &kv, "hop")?,
        window_seconds: number(path, &kv, "window")?,
        segment_id: field(path, &kv, "segment_id")?.to_string(),
    };
    Ok((fm, meta(path, &kv)?))
}

pub fn write_labels(path: &Path, labels: &FrameLabels, meta: &CacheMeta) -> Result<()> {
    let mut h = String::new();
    let _ = writeln!(h, "{LABEL_MAGIC}");
    let _ = writeln!(h, "segment_id={}", labels.segment_id);
    let _ = writeln!(h, "feature_digest={}", meta.feature_digest);
    let _ = writeln!(h, "source_digest={}", meta.source_digest);
    let _ = writeln!(h, "hop={}", labels.hop_seconds);
    let _ = writeln!(h, "frames={}", labels.len());
    let _ = writeln!(h, "valid={}", labels.valid_frames);
    let _ = writeln!(h, "coding={CLASS_CODING}");
    h.push_str("end\n");
    let mut bytes = h.into_bytes();
    bytes.extend(labels.codes());
    write_atomic(path, &bytes)
}

pub fn read_labels(path: &Path) -> Result<(FrameLabels, CacheMeta)> {
    let bytes = std::fs::read(path).map_err(|e| OsdError::io(format!("reading {}", path.display()), e))?;
    let (kv, body) = split_header(path, &bytes, LABEL_MAGIC)?;
    if field(path, &kv, "coding")? != CLASS_CODING {
        return Err(corrupt(path, "unknown label coding"));
    }
    let frames: usize = number(path, &kv, "frames")?;
    if body.len() != frames {
        return Err(corrupt(path, "payload size does not match header"));
    }
    let labels = body
        .iter()
        .map(|&c| FrameClass::from_code(c).ok_or_else(|| corrupt(path, format!("bad label code {c}"))))
        .collect::<Result<Vec<_>>>()?;
    let fl = FrameLabels::new(
        field(path, &kv, "segment_id")?,
        labels,
        number(path, &kv, "valid")?,
        number(path, &kv, "hop")?,
    )?;
    Ok((fl, meta(path, &kv)?))
}

/// Load features and labels and check both were produced under `feature_digest`.
pub fn load_segment(cache_dir: &Path, segment_id: &str, feature_digest: &str) -> Result<(FeatureMatrix, FrameLabels)> {
    let (fm, fmeta) = read_features(&feature_path(cache_dir, segment_id))?;
    let (fl, lmeta) = read_labels(&label_path(cache_dir, segment_id))?;
    for (what, m) in [("cached features", &fmeta), ("cached labels", &lmeta)] {
        if m.feature_digest != feature_digest {
            return Err(OsdError::DigestMismatch {
                what: format!("{what} of '{segment_id}'"),
                expected: feature_digest.to_string(),
                found: m.feature_digest.clone(),
            });
        }
    }
    Ok((fm, fl))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CacheMeta {
        CacheMeta {
            feature_digest: "fd".into(),
            source_digest: "sd".into(),
        }
    }

    #[test]
    fn features_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let fm = FeatureMatrix {
            values: Array2::from_shape_fn((64, 7), |(m, t)| (m * 7 + t) as f32 * -0.37),
            valid_frames: 5,
            hop_seconds: 0.01,
            window_seconds: 0.025,
            segment_id: "rec_0001".into(),
        };
        let p = feature_path(dir.path(), "rec_0001");
        write_features(&p, &fm, &meta()).unwrap();
        let (back, m) = read_features(&p).unwrap();
        assert_eq!(back, fm);
        assert_eq!(m, meta());
        assert_eq!(read_meta(&p), Some(meta()));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let l = FrameLabels::new(
            "s",
            vec![FrameClass::Single, FrameClass::Overlap, FrameClass::Silence],
            2,
            0.01,
        )
        .unwrap();
        let p = label_path(dir.path(), "s");
        write_labels(&p, &l, &meta()).unwrap();
        assert_eq!(read_labels(&p).unwrap().0, l);
    }

    #[test]
    fn digest_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let fm = FeatureMatrix {
            values: Array2::zeros((64, 2)),
            valid_frames: 2,
            hop_seconds: 0.01,
            window_seconds: 0.025,
            segment_id: "s".into(),
        };
        let l = FrameLabels::new("s", vec![FrameClass::Silence; 2], 2, 0.01).unwrap();
        write_features(&feature_path(dir.path(), "s"), &fm, &meta()).unwrap();
        write_labels(&label_path(dir.path(), "s"), &l, &meta()).unwrap();
        assert!(load_segment(dir.path(), "s", "fd").is_ok());
        assert!(matches!(
            load_segment(dir.path(), "s", "other"),
            Err(OsdError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.fbank");
        std::fs::write(&p, b"OSDFBANK1\nmel_bins=64\n").unwrap();
        assert!(read_features(&p).is_err());
        assert_eq!(read_meta(&p), None);
    }
}
