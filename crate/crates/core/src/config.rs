//! Flat `key = value` run configuration with `#` comments.
//!
//! Every key belongs to a fixed schema; unknown keys and malformed values are
//! configuration errors. Command-line `--set key=value` overrides are applied
//! after the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{OsdError, Result};
use crate::features::{short_digest, FeatureConfig};
use crate::metrics::EvalConfig;
use crate::nn::{Family, ModelConfig};
use crate::train::{ClassWeights, TrainConfig, WeightsMode};

const KEYS: &[&str] = &[
    "feature.hop_seconds",
    "feature.window_seconds",
    "feature.n_fft",
    "feature.fmin",
    "feature.fmax",
    "feature.floor",
    "feature.segment_seconds",
    "model.family",
    "model.dim",
    "model.blocks",
    "model.heads",
    "model.ff_dim",
    "model.tcn_resblocks",
    "model.tcn_hidden",
    "model.tcn_kernel",
    "model.conv_kernel",
    "model.hidden",
    "model.dropout",
    "model.seed",
    "train.lr",
    "train.lr_decay",
    "train.patience",
    "train.max_epochs",
    "train.batch_size",
    "train.weights_mode",
    "train.weights",
    "train.zero_class_fallback",
    "train.seed",
    "augment.p_noise",
    "augment.p_rir",
    "augment.snr_low",
    "augment.snr_high",
    "augment.noise_manifest",
    "augment.rir_manifest",
    "augment.seed",
    "eval.collar_frames",
    "eval.median_filter",
    "eval.tags",
    "data.cache_dir",
    "data.train",
    "data.val",
    "data.eval",
    "out.checkpoint",
    "out.log",
    "out.report",
];

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSettings {
    pub p_noise: f64,
    pub p_rir: f64,
    pub snr_low: f64,
    pub snr_high: f64,
    pub noise_manifest: Option<PathBuf>,
    pub rir_manifest: Option<PathBuf>,
    pub seed: u64,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        AugmentSettings {
            p_noise: 0.0,
            p_rir: 0.0,
            snr_low: 5.0,
            snr_high: 20.0,
            noise_manifest: None,
            rir_manifest: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    /// Root of prepared features, labels and segment manifests.
    pub cache_dir: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub eval: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            cache_dir: PathBuf::from("cache"),
            train: PathBuf::from("train.tsv"),
            val: PathBuf::from("dev.tsv"),
            eval: PathBuf::from("test.tsv"),
            checkpoint: PathBuf::from("model.ckpt"),
            log: PathBuf::from("train_log.tsv"),
            report: PathBuf::from("eval_report.tsv"),
        }
    }
}

impl Paths {
    /// Segment manifests are looked up under the cache root unless absolute.
    pub fn in_cache(&self, p: &Path) -> PathBuf {
        self.cache_dir.join(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub feature: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentSettings,
    pub eval: EvalConfig,
    pub eval_tags: Vec<String>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_pairs(Vec::new()).expect("defaults are valid")
    }
}

/// Parse `key = value` lines; later duplicates win.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| OsdError::Config(format!("{origin}:{}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| OsdError::Config(format!("override '{s}' is not KEY=VALUE")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

struct Values(BTreeMap<String, String>);

impl Values {
    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| OsdError::Config(format!("bad value '{v}' for {key}"))),
        }
    }

    fn path(&self, key: &str, default: PathBuf) -> PathBuf {
        self.0.get(key).map(PathBuf::from).unwrap_or(default)
    }

    fn opt_path(&self, key: &str) -> Option<PathBuf> {
        self.0.get(key).filter(|v| !v.is_empty()).map(PathBuf::from)
    }
}

impl RunConfig {
    pub fn from_pairs(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(OsdError::Config(format!("unknown config key '{k}'")));
            }
            map.insert(k, v);
        }
        let v = Values(map);

        let fd = FeatureConfig::default();
        let feature = FeatureConfig {
            hop_seconds: v.get("feature.hop_seconds", fd.hop_seconds)?,
            window_seconds: v.get("feature.window_seconds", fd.window_seconds)?,
            n_fft: v.get("feature.n_fft", fd.n_fft)?,
            fmin: v.get("feature.fmin", fd.fmin)?,
            fmax: v.get("feature.fmax", fd.fmax)?,
            floor: v.get("feature.floor", fd.floor)?,
            segment_seconds: v.get("feature.segment_seconds", fd.segment_seconds)?,
            ..fd
        };

        let family: Family = v.get("model.family", Family::Cf)?;
        let md = ModelConfig::full_size(family);
        let model = ModelConfig {
            model_dim: v.get("model.dim", md.model_dim)?,
            block_count: v.get("model.blocks", md.block_count)?,
            head_count: v.get("model.heads", md.head_count)?,
            ff_dim: v.get("model.ff_dim", md.ff_dim)?,
            tcn_resblocks_per_block: v.get("model.tcn_resblocks", md.tcn_resblocks_per_block)?,
            tcn_hidden: v.get("model.tcn_hidden", md.tcn_hidden)?,
            tcn_kernel: v.get("model.tcn_kernel", md.tcn_kernel)?,
            conv_kernel: v.get("model.conv_kernel", md.conv_kernel)?,
            hidden_dim: v.get("model.hidden", md.hidden_dim)?,
            dropout: v.get("model.dropout", md.dropout)?,
            seed: v.get("model.seed", md.seed)?,
            ..md
        };

        let td = TrainConfig::default();
        let weights_mode = match v.get("train.weights_mode", "inverse_frequency".to_string())?.as_str() {
            "uniform" => WeightsMode::Uniform,
            "inverse_frequency" => WeightsMode::InverseFrequency,
            "explicit" => {
                let w: String = v.get("train.weights", String::new())?;
                if w.is_empty() {
                    return Err(OsdError::Config("train.weights_mode=explicit needs train.weights".into()));
                }
                WeightsMode::Explicit(w.parse::<ClassWeights>()?)
            }
            other => return Err(OsdError::Config(format!("unknown weights mode '{other}'"))),
        };
        let fallback: String = v.get("train.zero_class_fallback", String::new())?;
        let train = TrainConfig {
            initial_lr: v.get("train.lr", td.initial_lr)?,
            lr_decay: v.get("train.lr_decay", td.lr_decay)?,
            early_stop_patience: v.get("train.patience", td.early_stop_patience)?,
            max_epochs: v.get("train.max_epochs", td.max_epochs)?,
            batch_size: v.get("train.batch_size", td.batch_size)?,
            weights_mode,
            zero_class_fallback: if fallback.is_empty() {
                None
            } else {
                Some(
                    fallback
                        .parse()
                        .map_err(|_| OsdError::Config(format!("bad fallback weight '{fallback}'")))?,
                )
            },
            seed: v.get("train.seed", td.seed)?,
        };

        let ad = AugmentSettings::default();
        let augment = AugmentSettings {
            p_noise: v.get("augment.p_noise", ad.p_noise)?,
            p_rir: v.get("augment.p_rir", ad.p_rir)?,
            snr_low: v.get("augment.snr_low", ad.snr_low)?,
            snr_high: v.get("augment.snr_high", ad.snr_high)?,
            noise_manifest: v.opt_path("augment.noise_manifest"),
            rir_manifest: v.opt_path("augment.rir_manifest"),
            seed: v.get("augment.seed", ad.seed)?,
        };

        let eval = EvalConfig {
            collar_frames: v.get("eval.collar_frames", 0)?,
            median_filter: v.get("eval.median_filter", 0)?,
        };
        let tags: String = v.get("eval.tags", String::new())?;
        let eval_tags = tags
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(String::from)
            .collect();

        let pd = Paths::default();
        let paths = Paths {
            cache_dir: v.path("data.cache_dir", pd.cache_dir),
            train: v.path("data.train", pd.train),
            val: v.path("data.val", pd.val),
            eval: v.path("data.eval", pd.eval),
            checkpoint: v.path("out.checkpoint", pd.checkpoint),
            log: v.path("out.log", pd.log),
            report: v.path("out.report", pd.report),
        };

        let cfg = RunConfig {
            feature,
            model,
            train,
            augment,
            eval,
            eval_tags,
            paths,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file (if any) and apply overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| OsdError::Config(format!("cannot read config {}: {e}", p.display())))?;
                parse_pairs(&text, &p.display().to_string())?
            }
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(pairs)
    }

    pub fn validate(&self) -> Result<()> {
        self.feature.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let a = &self.augment;
        for (name, p) in [("augment.p_noise", a.p_noise), ("augment.p_rir", a.p_rir)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(OsdError::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(a.snr_low <= a.snr_high) {
            return Err(OsdError::Config(format!("snr_low {} above snr_high {}", a.snr_low, a.snr_high)));
        }
        if a.p_noise > 0.0 && a.noise_manifest.is_none() {
            return Err(OsdError::Config("augment.p_noise > 0 needs augment.noise_manifest".into()));
        }
        if a.p_rir > 0.0 && a.rir_manifest.is_none() {
            return Err(OsdError::Config("augment.p_rir > 0 needs augment.rir_manifest".into()));
        }
        Ok(())
    }

    /// Digest of everything that shapes a trained model.
    pub fn digest(&self) -> String {
        let mut s = self.feature.digest_text();
        s.push_str(&self.model.digest_text());
        let t = &self.train;
        let _ = writeln!(s, "train.lr={}", t.initial_lr);
        let _ = writeln!(s, "train.lr_decay={}", t.lr_decay);
        let _ = writeln!(s, "train.patience={}", t.early_stop_patience);
        let _ = writeln!(s, "train.max_epochs={}", t.max_epochs);
        let _ = writeln!(s, "train.batch_size={}", t.batch_size);
        let _ = writeln!(s, "train.weights_mode={:?}", t.weights_mode);
        let _ = writeln!(s, "train.seed={}", t.seed);
        let _ = writeln!(s, "augment={:?}", self.augment);
        short_digest(s.as_bytes())
    }
}
