//! Frame-level scoring of predicted labels against reference labels.

use std::fmt::Write as _;
use std::path::Path;

use crate::annotations::{FrameClass, FrameLabels, CLASS_COUNT};
use crate::error::{OsdError, Result};
use crate::exec::Execution;
use crate::features::FeatureMatrix;
use crate::nn::{Model, PredictionMatrix};

/// `matrix[reference][predicted]` frame counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub matrix: [[u64; CLASS_COUNT]; CLASS_COUNT],
}

impl ConfusionCounts {
    pub fn tp(&self, c: FrameClass) -> u64 {
        self.matrix[c.index()][c.index()]
    }

    pub fn fp(&self, c: FrameClass) -> u64 {
        (0..CLASS_COUNT).filter(|&r| r != c.index()).map(|r| self.matrix[r][c.index()]).sum()
    }

    pub fn fn_(&self, c: FrameClass) -> u64 {
        (0..CLASS_COUNT).filter(|&p| p != c.index()).map(|p| self.matrix[c.index()][p]).sum()
    }

    pub fn reference_count(&self, c: FrameClass) -> u64 {
        self.matrix[c.index()].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.matrix.iter().flatten().sum()
    }

    pub fn merge(mut self, o: ConfusionCounts) -> Self {
        for r in 0..CLASS_COUNT {
            for p in 0..CLASS_COUNT {
                self.matrix[r][p] += o.matrix[r][p];
            }
        }
        self
    }

    pub fn score(&self, c: FrameClass) -> F1Score {
        F1Score::from_counts(self.tp(c), self.fp(c), self.fn_(c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl F1Score {
    /// `F1 = 2TP / (2TP + FP + FN)`; any `0/0` is 0.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        F1Score {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }
}

fn code(c: u8) -> Result<usize> {
    FrameClass::from_code(c)
        .map(FrameClass::index)
        .ok_or_else(|| OsdError::InvalidInput(format!("label code {c} out of range")))
}

pub fn confusion(pred: &[u8], reference: &[u8], mask: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != reference.len() || mask.len() != reference.len() {
        return Err(OsdError::Shape {
            expected: format!("{} frames", reference.len()),
            actual: format!("{} predicted, {} mask", pred.len(), mask.len()),
        });
    }
    let mut c = ConfusionCounts::default();
    for t in 0..pred.len() {
        if mask[t] {
            c.matrix[code(reference[t])?][code(pred[t])?] += 1;
        }
    }
    Ok(c)
}

pub fn frame_f1(pred: &[u8], reference: &[u8], mask: &[bool], target: FrameClass) -> Result<F1Score> {
    Ok(confusion(pred, reference, mask)?.score(target))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalConfig {
    /// Frames on either side of a reference OVERLAP boundary left unscored.
    pub collar_frames: usize,
    /// Width of a median filter over predicted codes; 0 or 1 disables it.
    pub median_filter: usize,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.median_filter > 1 && self.median_filter % 2 == 0 {
            return Err(OsdError::Config(format!(
                "median filter width must be odd, got {}",
                self.median_filter
            )));
        }
        Ok(())
    }
}

/// Clear `mask` within `collar` frames of every change in reference OVERLAP membership.
pub fn apply_collar(reference: &[u8], mask: &mut [bool], collar: usize) {
    if collar == 0 {
        return;
    }
    let is_ov = |t: usize| reference[t] == FrameClass::Overlap as u8;
    for t in 1..reference.len() {
        if is_ov(t) != is_ov(t - 1) {
            let lo = t.saturating_sub(collar);
            let hi = (t + collar).min(reference.len());
            mask[lo..hi].iter_mut().for_each(|m| *m = false);
        }
    }
}

/// Sliding median of width `width` (odd) over `codes`, edges use the shrunken window.
pub fn median_filter(codes: &[u8], width: usize) -> Vec<u8> {
    if width <= 1 {
        return codes.to_vec();
    }
    let half = width / 2;
    (0..codes.len())
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(codes.len());
            let mut w: Vec<u8> = codes[lo..hi].to_vec();
            w.sort_unstable();
            w[w.len() / 2]
        })
        .collect()
}

/// Anything that maps features to per-frame logits.
pub trait FramePredictor: Sync {
    fn predict(&self, features: &FeatureMatrix) -> Result<PredictionMatrix>;
}

impl FramePredictor for Model {
    fn predict(&self, features: &FeatureMatrix) -> Result<PredictionMatrix> {
        self.forward(features)
    }
}

/// Confusion counts for one segment after post-processing.
pub fn score_segment(pred: &PredictionMatrix, labels: &FrameLabels, cfg: &EvalConfig) -> Result<ConfusionCounts> {
    let valid = labels.valid_frames;
    if pred.frame_count() != labels.len() || pred.valid_frames != valid {
        return Err(OsdError::Shape {
            expected: format!("{} frames ({valid} valid)", labels.len()),
            actual: format!("{} frames ({} valid)", pred.frame_count(), pred.valid_frames),
        });
    }
    let argmax = pred.argmax();
    let p = median_filter(&argmax[..valid], cfg.median_filter);
    let r: Vec<u8> = labels.valid().iter().map(|&c| c as u8).collect();
    let mut mask = vec![true; valid];
    apply_collar(&r, &mut mask, cfg.collar_frames);
    confusion(&p, &r, &mask)
}

#[derive(Debug, Clone)]
pub struct TaggedData {
    pub tag: String,
    pub features: Vec<FeatureMatrix>,
    pub labels: Vec<FrameLabels>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetScore {
    pub tag: String,
    pub segments: usize,
    pub counts: ConfusionCounts,
    pub overlap: F1Score,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub datasets: Vec<DatasetScore>,
    /// Unweighted mean of the per-dataset overlap F1.
    pub mean_f1: f64,
    /// Pooled per-class precision and recall.
    pub per_class: [F1Score; CLASS_COUNT],
    pub model_digest: String,
    pub feature_digest: String,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl EvalReport {
    pub fn from_scores(datasets: Vec<DatasetScore>, model_digest: &str, feature_digest: &str) -> Result<Self> {
        if datasets.is_empty() {
            return Err(OsdError::Data("no datasets to report".into()));
        }
        let f1s: Vec<f64> = datasets.iter().map(|d| d.overlap.f1).collect();
        let pooled = datasets
            .iter()
            .fold(ConfusionCounts::default(), |a, d| a.merge(d.counts));
        Ok(EvalReport {
            mean_f1: mean(&f1s),
            per_class: FrameClass::ALL.map(|c| pooled.score(c)),
            datasets,
            model_digest: model_digest.to_string(),
            feature_digest: feature_digest.to_string(),
        })
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let width = self.datasets.iter().map(|d| d.tag.len()).max().unwrap_or(0).max(8);
        let _ = writeln!(s, "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}", "Dataset", "Frames", "Precision", "Recall", "F1(%)");
        for d in &self.datasets {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9}  {:>9.2}  {:>9.2}  {:>9.2}",
                d.tag,
                d.counts.total(),
                d.overlap.precision * 100.0,
                d.overlap.recall * 100.0,
                d.overlap.f1 * 100.0
            );
        }
        let _ = writeln!(s, "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9.2}", "Mean", "", "", "", self.mean_f1 * 100.0);
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# model_digest={}", self.model_digest);
        let _ = writeln!(s, "# feature_digest={}", self.feature_digest);
        s.push_str("kind\tname\tframes\ttp\tfp\tfn\tprecision\trecall\tf1\n");
        for d in &self.datasets {
            let ov = FrameClass::Overlap;
            let _ = writeln!(
                s,
                "dataset\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                d.tag,
                d.counts.total(),
                d.counts.tp(ov),
                d.counts.fp(ov),
                d.counts.fn_(ov),
                d.overlap.precision,
                d.overlap.recall,
                d.overlap.f1
            );
        }
        for (c, sc) in FrameClass::ALL.iter().zip(&self.per_class) {
            let _ = writeln!(s, "class\t{}\t\t\t\t\t{}\t{}\t{}", c.name(), sc.precision, sc.recall, sc.f1);
        }
        let _ = writeln!(s, "mean\tall\t\t\t\t\t\t\t{}", self.mean_f1);
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| OsdError::io(format!("writing {}", path.display()), e))
    }
}

/// Score every dataset in `data`. Each tag in `requested` must be present; an
/// empty `requested` scores all of `data` in order.
pub fn evaluate(
    predictor: &dyn FramePredictor,
    data: &[TaggedData],
    requested: &[String],
    cfg: &EvalConfig,
    exec: Execution,
    digests: (&str, &str),
) -> Result<EvalReport> {
    cfg.validate()?;
    let chosen: Vec<&TaggedData> = if requested.is_empty() {
        data.iter().collect()
    } else {
        requested
            .iter()
            .map(|t| {
                data.iter()
                    .find(|d| &d.tag == t)
                    .ok_or_else(|| OsdError::Data(format!("dataset '{t}' not found")))
            })
            .collect::<Result<_>>()?
    };
    let mut scores = Vec::with_capacity(chosen.len());
    for d in chosen {
        if d.features.is_empty() || d.features.len() != d.labels.len() {
            return Err(OsdError::Data(format!("dataset '{}' has no scorable segments", d.tag)));
        }
        let idx: Vec<usize> = (0..d.features.len()).collect();
        let per_seg = exec.map(&idx, |&i| {
            let pred = predictor.predict(&d.features[i])?;
            score_segment(&pred, &d.labels[i], cfg)
        });
        let counts = per_seg
            .into_iter()
            .try_fold(ConfusionCounts::default(), |a, c| c.map(|c| a.merge(c)))?;
        scores.push(DatasetScore {
            tag: d.tag.clone(),
            segments: d.features.len(),
            overlap: counts.score(FrameClass::Overlap),
            counts,
        });
    }
    EvalReport::from_scores(scores, digests.0, digests.1)
}
