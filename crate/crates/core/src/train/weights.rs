//! Class weights for the loss, and a resampler that pushes a training set toward
//! target class proportions (the two readings of a "2:7:1" class ratio).

use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::annotations::{ClassFrameCounts, DatasetStats, FrameClass, CLASS_COUNT};
use crate::error::{OsdError, Result};

/// Unnormalized positive weights `(silence, single, overlap)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights([f64; CLASS_COUNT]);

impl ClassWeights {
    pub fn new(w: [f64; CLASS_COUNT]) -> Result<Self> {
        if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(OsdError::Config(format!("class weights must be positive, got {w:?}")));
        }
        Ok(ClassWeights(w))
    }

    pub fn uniform() -> Self {
        ClassWeights([1.0; CLASS_COUNT])
    }

    pub fn of(&self, class: FrameClass) -> f64 {
        self.0[class.index()]
    }

    pub fn values(&self) -> [f64; CLASS_COUNT] {
        self.0
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.0.map(|w| w * c))
    }
}

impl FromStr for ClassWeights {
    type Err = OsdError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split([',', ':'])
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| OsdError::Config(format!("bad class weights '{s}'")))?;
        let arr: [f64; CLASS_COUNT] = parts
            .try_into()
            .map_err(|_| OsdError::Config(format!("expected 3 class weights, got '{s}'")))?;
        Self::new(arr)
    }
}

impl std::fmt::Display for ClassWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{}", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightsMode {
    Uniform,
    InverseFrequency,
    Explicit(ClassWeights),
}

impl WeightsMode {
    pub fn name(&self) -> &'static str {
        match self {
            WeightsMode::Uniform => "uniform",
            WeightsMode::InverseFrequency => "inverse_frequency",
            WeightsMode::Explicit(_) => "explicit",
        }
    }
}

/// Inverse-frequency weights are `1 / p_c` rescaled so the smallest is 1.
/// A class with no frames takes `zero_class_fallback` or is an error.
pub fn derive_weights(stats: &DatasetStats, mode: WeightsMode, zero_class_fallback: Option<f64>) -> Result<ClassWeights> {
    match mode {
        WeightsMode::Uniform => Ok(ClassWeights::uniform()),
        WeightsMode::Explicit(w) => Ok(w),
        WeightsMode::InverseFrequency => inverse_frequency(&stats.counts, zero_class_fallback),
    }
}

pub fn inverse_frequency(counts: &ClassFrameCounts, zero_class_fallback: Option<f64>) -> Result<ClassWeights> {
    if counts.total() == 0 {
        return Err(OsdError::Data("cannot derive weights from empty statistics".into()));
    }
    weights_from_proportions(counts.proportions(), zero_class_fallback)
}

pub fn weights_from_proportions(p: [f64; CLASS_COUNT], zero_class_fallback: Option<f64>) -> Result<ClassWeights> {
    let inv: Vec<Option<f64>> = p.iter().map(|&x| (x > 0.0).then(|| 1.0 / x)).collect();
    let min = inv
        .iter()
        .flatten()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let mut out = [0.0; CLASS_COUNT];
    for (c, w) in inv.iter().enumerate() {
        out[c] = match (w, zero_class_fallback) {
            (Some(w), _) => w / min,
            (None, Some(f)) => f,
            (None, None) => {
                return Err(OsdError::Data(format!(
                    "class '{}' has no frames; set a fallback weight",
                    FrameClass::ALL[c].name()
                )))
            }
        };
    }
    ClassWeights::new(out)
}

/// Draw `n` segment indices with replacement so that the expected class
/// proportions of the drawn frames move toward `target`. Each segment is
/// weighted by `sum_c frames_c * target_c / current_c`.
pub fn resample_to_proportions(
    per_segment: &[ClassFrameCounts],
    target: [f64; CLASS_COUNT],
    n: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let pooled = per_segment
        .iter()
        .fold(ClassFrameCounts::default(), |a, b| a.merge(*b));
    if pooled.total() == 0 {
        return Err(OsdError::Data("no frames to resample".into()));
    }
    let current = pooled.proportions();
    let ratio: Vec<f64> = (0..CLASS_COUNT)
        .map(|c| if current[c] > 0.0 { target[c] / current[c] } else { 0.0 })
        .collect();
    let weights: Vec<f64> = per_segment
        .iter()
        .map(|s| (0..CLASS_COUNT).map(|c| s.0[c] as f64 * ratio[c]).sum::<f64>())
        .collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| OsdError::Data(format!("cannot resample segments: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
}
