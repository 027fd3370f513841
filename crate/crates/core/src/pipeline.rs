//! End-to-end operations behind the command-line tool.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::annotations::{
    dataset_stats_by_tag, rasterize_labels, DatasetStats, FrameLabels, ManifestRecord, SegmentManifest,
};
use crate::audio::{load_audio, segment_range, AudioClip, LoadOptions};
use crate::augment::{load_corpus, AugmentPolicy};
use crate::cache::{self, CacheMeta};
use crate::config::RunConfig;
use crate::error::{OsdError, Result};
use crate::exec::Execution;
use crate::features::{short_digest, FbankExtractor, FeatureConfig};
use crate::metrics::{evaluate, EvalReport, TaggedData};
use crate::nn::{build_model, Checkpoint};
use crate::train::{
    derive_weights, train_model, OnlineAugment, TrainOutcome, TrainSet, Trainer,
};

pub const FEATURE_CONFIG_FILE: &str = "feature_config.txt";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| OsdError::io(format!("reading {}", path.display()), e))
}

#[derive(Debug, Default)]
pub struct PrepareReport {
    pub recordings: usize,
    pub segments_written: usize,
    pub segments_skipped: usize,
    /// Recording id and the error that stopped it.
    pub failures: Vec<(String, String)>,
    pub manifest_path: PathBuf,
}

struct RecordingResult {
    records: Vec<ManifestRecord>,
    written: usize,
    skipped: usize,
}

fn prepare_recording(
    manifest: &SegmentManifest,
    rec: &ManifestRecord,
    rttm_dir: &Path,
    out_dir: &Path,
    extractor: &FbankExtractor,
) -> Result<RecordingResult> {
    let cfg = extractor.config();
    let feature_digest = cfg.digest();
    let audio_path = manifest.resolve_audio(rec);
    let audio_path = std::fs::canonicalize(&audio_path)
        .map_err(|e| OsdError::io(format!("resolving {}", audio_path.display()), e))?;
    let rttm_path = rttm_dir.join(format!("{}.rttm", rec.recording_id));
    let rttm_bytes = read_bytes(&rttm_path)?;
    let audio_digest = short_digest(&read_bytes(&audio_path)?);
    let rttm_digest = short_digest(&rttm_bytes);

    let segments = segment_range(&rec.recording_id, rec.span, cfg.segment_seconds)?;
    let mut clip: Option<AudioClip> = None;
    let mut turns = None;
    let mut out = RecordingResult {
        records: Vec::new(),
        written: 0,
        skipped: 0,
    };
    for seg in segments {
        if cfg.frame_count(seg.span.len()) == 0 {
            // a tail shorter than one hop carries no frames
            continue;
        }
        let span_key = format!("{}:{}:{}", rec.recording_id, seg.span.start, seg.span.end);
        let fmeta = CacheMeta {
            feature_digest: feature_digest.clone(),
            source_digest: short_digest(format!("{audio_digest}:{span_key}").as_bytes()),
        };
        let lmeta = CacheMeta {
            feature_digest: feature_digest.clone(),
            source_digest: short_digest(format!("{rttm_digest}:{span_key}").as_bytes()),
        };
        let fpath = cache::feature_path(out_dir, &seg.segment_id);
        let lpath = cache::label_path(out_dir, &seg.segment_id);
        let fresh_f = cache::read_meta(&fpath).as_ref() == Some(&fmeta);
        let fresh_l = cache::read_meta(&lpath).as_ref() == Some(&lmeta);
        if fresh_f && fresh_l {
            out.skipped += 1;
        } else {
            if !fresh_f {
                if clip.is_none() {
                    clip = Some(load_audio(&audio_path, LoadOptions::default())?);
                }
                let c = clip.as_ref().expect("loaded above");
                if seg.span.end > c.len() {
                    return Err(OsdError::Data(format!(
                        "span {}..{} beyond the {} samples of {}",
                        seg.span.start,
                        seg.span.end,
                        c.len(),
                        audio_path.display()
                    )));
                }
                cache::write_features(&fpath, &extractor.segment_features(c, &seg)?, &fmeta)?;
            }
            if !fresh_l {
                if turns.is_none() {
                    let text = String::from_utf8(rttm_bytes.clone())
                        .map_err(|_| OsdError::Data(format!("{} is not UTF-8", rttm_path.display())))?;
                    let all = crate::annotations::parse_rttm_str(&text, &rttm_path)?;
                    turns = Some(all.into_iter().filter(|t| t.recording_id == rec.recording_id).collect::<Vec<_>>());
                }
                let labels = rasterize_labels(turns.as_ref().expect("parsed above"), &seg, cfg.hop_seconds)?;
                cache::write_labels(&lpath, &labels, &lmeta)?;
            }
            out.written += 1;
        }
        out.records.push(ManifestRecord {
            segment_id: seg.segment_id.clone(),
            audio_path: audio_path.clone(),
            span: seg.span,
            recording_id: rec.recording_id.clone(),
            dataset_tag: rec.dataset_tag.clone(),
        });
    }
    Ok(out)
}

/// Segment every recording of `manifest_path`, cache features and labels
/// under `out_dir`, and write a segment manifest of the same file name there.
/// Up-to-date cache entries are left alone.
pub fn prepare(
    manifest_path: &Path,
    rttm_dir: &Path,
    out_dir: &Path,
    feature_cfg: &FeatureConfig,
    exec: Execution,
) -> Result<PrepareReport> {
    let manifest = SegmentManifest::load(manifest_path)?;
    if manifest.is_empty() {
        return Err(OsdError::Data(format!("{} lists no recordings", manifest_path.display())));
    }
    let extractor = FbankExtractor::new(feature_cfg.clone())?;
    std::fs::create_dir_all(out_dir).map_err(|e| OsdError::io(format!("creating {}", out_dir.display()), e))?;
    check_or_write_feature_config(out_dir, feature_cfg)?;

    let results = exec.map(&manifest.records, |rec| {
        prepare_recording(&manifest, rec, rttm_dir, out_dir, &extractor)
    });
    let mut report = PrepareReport {
        recordings: manifest.len(),
        ..Default::default()
    };
    let mut records = Vec::new();
    for (rec, r) in manifest.records.iter().zip(results) {
        match r {
            Ok(r) => {
                report.segments_written += r.written;
                report.segments_skipped += r.skipped;
                records.extend(r.records);
            }
            Err(e) => report.failures.push((rec.recording_id.clone(), e.to_string())),
        }
    }
    let name = manifest_path
        .file_name()
        .ok_or_else(|| OsdError::InvalidInput(format!("bad manifest path {}", manifest_path.display())))?;
    report.manifest_path = out_dir.join(name);
    let text = SegmentManifest::new(records, out_dir)?.to_tsv();
    if std::fs::read_to_string(&report.manifest_path).ok().as_deref() != Some(text.as_str()) {
        std::fs::write(&report.manifest_path, text)
            .map_err(|e| OsdError::io(format!("writing {}", report.manifest_path.display()), e))?;
    }
    Ok(report)
}

fn feature_config_text(cfg: &FeatureConfig) -> String {
    format!("{}digest={}\n", cfg.digest_text(), cfg.digest())
}

fn check_or_write_feature_config(dir: &Path, cfg: &FeatureConfig) -> Result<()> {
    let path = dir.join(FEATURE_CONFIG_FILE);
    match cached_feature_digest(dir) {
        Ok(d) if d == cfg.digest() => Ok(()),
        Ok(d) => Err(OsdError::DigestMismatch {
            what: format!("feature cache {}", dir.display()),
            expected: cfg.digest(),
            found: d,
        }),
        Err(_) if !path.exists() => std::fs::write(&path, feature_config_text(cfg))
            .map_err(|e| OsdError::io(format!("writing {}", path.display()), e)),
        Err(e) => Err(e),
    }
}

/// Feature digest recorded in a cache directory.
pub fn cached_feature_digest(dir: &Path) -> Result<String> {
    let path = dir.join(FEATURE_CONFIG_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| OsdError::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .find_map(|l| l.strip_prefix("digest="))
        .map(str::to_string)
        .ok_or_else(|| OsdError::Data(format!("{} has no digest line", path.display())))
}

fn require_cache_digest(dir: &Path, cfg: &FeatureConfig) -> Result<()> {
    let found = cached_feature_digest(dir)?;
    if found != cfg.digest() {
        return Err(OsdError::DigestMismatch {
            what: format!("feature cache {}", dir.display()),
            expected: cfg.digest(),
            found,
        });
    }
    Ok(())
}

/// Cached labels of every segment in a prepared manifest.
pub fn load_labels(manifest: &SegmentManifest, exec: Execution) -> Result<HashMap<String, FrameLabels>> {
    let loaded = exec.map(&manifest.records, |r| {
        cache::read_labels(&cache::label_path(&manifest.base_dir, &r.segment_id)).map(|(l, _)| l)
    });
    manifest
        .records
        .iter()
        .zip(loaded)
        .map(|(r, l)| l.map(|l| (r.segment_id.clone(), l)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct StatsTable {
    pub rows: BTreeMap<String, DatasetStats>,
    pub total: DatasetStats,
}

impl StatsTable {
    pub fn render(&self) -> String {
        let width = self.rows.keys().map(String::len).max().unwrap_or(0).max(8);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>9}  {:>9}", "Dataset", "#Hours", "%Overlap");
        let mut row = |name: &str, st: &DatasetStats| {
            let _ = writeln!(s, "{:<width$}  {:>9.3}  {:>9.2}", name, st.total_hours, st.overlap_percent);
        };
        for (tag, st) in &self.rows {
            row(tag, st);
        }
        row("Total", &self.total);
        s
    }
}

/// Per-tag hours and overlap share of a prepared segment manifest.
pub fn stats(manifest_path: &Path, exec: Execution) -> Result<StatsTable> {
    let manifest = SegmentManifest::load(manifest_path)?;
    let labels = load_labels(&manifest, exec)?;
    let (rows, total) = dataset_stats_by_tag(&manifest, &labels)?;
    Ok(StatsTable { rows, total })
}

/// Load a prepared split, checking every entry against `feature_digest`.
pub fn load_split(
    manifest_path: &Path,
    feature_cfg: &FeatureConfig,
    with_audio: bool,
    exec: Execution,
) -> Result<(SegmentManifest, TrainSet)> {
    let manifest = SegmentManifest::load(manifest_path)?;
    if manifest.is_empty() {
        return Err(OsdError::Data(format!("{} is empty", manifest_path.display())));
    }
    require_cache_digest(&manifest.base_dir, feature_cfg)?;
    let digest = feature_cfg.digest();
    let loaded = exec.map(&manifest.records, |r| cache::load_segment(&manifest.base_dir, &r.segment_id, &digest));
    let mut set = TrainSet::default();
    for item in loaded {
        let (f, l) = item?;
        set.features.push(f);
        set.labels.push(l);
    }
    if with_audio {
        let mut clips: HashMap<PathBuf, AudioClip> = HashMap::new();
        let mut audio = Vec::with_capacity(manifest.len());
        for r in &manifest.records {
            let path = manifest.resolve_audio(r);
            if !clips.contains_key(&path) {
                clips.insert(path.clone(), load_audio(&path, LoadOptions::default())?);
            }
            audio.push(AudioClip::new(r.segment_id.clone(), clips[&path].slice(&r.span).to_vec()));
        }
        set.audio = Some(audio);
    }
    set.validate()?;
    Ok((manifest, set))
}

fn augment_policy(cfg: &RunConfig) -> Result<AugmentPolicy> {
    let a = &cfg.augment;
    let corpus = |p: &Option<PathBuf>, prob: f64| -> Result<Arc<Vec<AudioClip>>> {
        match p {
            Some(p) if prob > 0.0 => Ok(Arc::new(load_corpus(&SegmentManifest::load(p)?)?)),
            _ => Ok(Arc::default()),
        }
    };
    let policy = AugmentPolicy {
        p_noise: a.p_noise,
        p_rir: a.p_rir,
        snr_range: (a.snr_low, a.snr_high),
        noise_corpus: corpus(&a.noise_manifest, a.p_noise)?,
        rir_corpus: corpus(&a.rir_manifest, a.p_rir)?,
        seed: a.seed,
    };
    policy.validate()?;
    Ok(policy)
}

/// Train per `cfg`, write the best checkpoint and the training log.
pub fn train(cfg: &RunConfig, exec: Execution) -> Result<TrainOutcome> {
    let policy = augment_policy(cfg)?;
    let with_audio = !policy.is_identity();
    let paths = &cfg.paths;
    let (train_manifest, train_set) = load_split(&paths.in_cache(&paths.train), &cfg.feature, with_audio, exec)?;
    let (_, val_set) = load_split(&paths.in_cache(&paths.val), &cfg.feature, false, exec)?;

    let labels: HashMap<String, FrameLabels> = train_set
        .labels
        .iter()
        .map(|l| (l.segment_id.clone(), l.clone()))
        .collect();
    let (_, pooled) = dataset_stats_by_tag(&train_manifest, &labels)?;
    let weights = derive_weights(&pooled, cfg.train.weights_mode, cfg.train.zero_class_fallback)?;

    let model = build_model(&cfg.model)?;
    let extractor = FbankExtractor::new(cfg.feature.clone())?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), weights, &train_set, &val_set, exec)?;
    if with_audio {
        trainer = trainer.with_augmentation(OnlineAugment {
            policy: &policy,
            extractor: &extractor,
        })?;
    }
    let outcome = train_model(trainer, &cfg.digest())?;
    let ckpt = Checkpoint {
        model: outcome.model.clone(),
        feature_digest: cfg.feature.digest(),
    };
    create_parent(&paths.checkpoint)?;
    ckpt.save(&paths.checkpoint)?;
    create_parent(&paths.log)?;
    outcome.log.save(&paths.log)?;
    Ok(outcome)
}

fn create_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => {
            std::fs::create_dir_all(d).map_err(|e| OsdError::io(format!("creating {}", d.display()), e))
        }
        _ => Ok(()),
    }
}

/// Group a prepared split by dataset tag, in order of first appearance.
pub fn group_by_tag(manifest: &SegmentManifest, set: TrainSet) -> Vec<TaggedData> {
    let mut groups: Vec<TaggedData> = Vec::new();
    for ((r, f), l) in manifest.records.iter().zip(set.features).zip(set.labels) {
        match groups.iter_mut().find(|g| g.tag == r.dataset_tag) {
            Some(g) => {
                g.features.push(f);
                g.labels.push(l);
            }
            None => groups.push(TaggedData {
                tag: r.dataset_tag.clone(),
                features: vec![f],
                labels: vec![l],
            }),
        }
    }
    groups
}

/// Score `checkpoint` on the evaluation split and write the report.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, exec: Execution) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.verify(&cfg.model, &cfg.feature.digest())?;
    let paths = &cfg.paths;
    let (manifest, set) = load_split(&paths.in_cache(&paths.eval), &cfg.feature, false, exec)?;
    let data = group_by_tag(&manifest, set);
    let report = evaluate(
        &ckpt.model,
        &data,
        &cfg.eval_tags,
        &cfg.eval,
        exec,
        (&ckpt.model.config().digest(), &cfg.feature.digest()),
    )?;
    create_parent(&paths.report)?;
    report.save(&paths.report)?;
    Ok(report)
}
