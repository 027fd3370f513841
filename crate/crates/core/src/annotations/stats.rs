use std::collections::{BTreeMap, HashMap};

use crate::annotations::labels::{FrameLabels, CLASS_COUNT};
use crate::annotations::manifest::SegmentManifest;
use crate::error::{OsdError, Result};

/// Valid-frame counts per class; merging is commutative and associative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassFrameCounts(pub [u64; CLASS_COUNT]);

impl ClassFrameCounts {
    pub fn of(labels: &FrameLabels) -> Self {
        let c = labels.class_counts();
        ClassFrameCounts([c[0] as u64, c[1] as u64, c[2] as u64])
    }

    pub fn merge(self, other: Self) -> Self {
        ClassFrameCounts([
            self.0[0] + other.0[0],
            self.0[1] + other.0[1],
            self.0[2] + other.0[2],
        ])
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn proportions(&self) -> [f64; CLASS_COUNT] {
        let total = self.total() as f64;
        self.0.map(|c| c as f64 / total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub total_hours: f64,
    pub silence_hours: f64,
    pub single_hours: f64,
    pub overlap_hours: f64,
    pub overlap_percent: f64,
    pub counts: ClassFrameCounts,
    pub hop_seconds: f64,
}

impl DatasetStats {
    pub fn from_counts(counts: ClassFrameCounts, hop_seconds: f64) -> Result<Self> {
        if counts.total() == 0 {
            return Err(OsdError::Data("no valid frames to summarize".into()));
        }
        let hours = |n: u64| n as f64 * hop_seconds / 3600.0;
        let silence_hours = hours(counts.0[0]);
        let single_hours = hours(counts.0[1]);
        let overlap_hours = hours(counts.0[2]);
        let total_hours = silence_hours + single_hours + overlap_hours;
        Ok(DatasetStats {
            total_hours,
            silence_hours,
            single_hours,
            overlap_hours,
            overlap_percent: overlap_hours / total_hours * 100.0,
            counts,
            hop_seconds,
        })
    }

    pub fn proportions(&self) -> [f64; CLASS_COUNT] {
        self.counts.proportions()
    }
}

fn labels_for<'a>(
    manifest: &SegmentManifest,
    labels: &'a HashMap<String, FrameLabels>,
) -> Result<Vec<(&'a FrameLabels, String)>> {
    if manifest.is_empty() {
        return Err(OsdError::Data("empty manifest".into()));
    }
    manifest
        .records
        .iter()
        .map(|r| {
            labels
                .get(&r.segment_id)
                .map(|l| (l, r.dataset_tag.clone()))
                .ok_or_else(|| OsdError::Data(format!("missing labels for segment '{}'", r.segment_id)))
        })
        .collect()
}

fn common_hop(items: &[(&FrameLabels, String)]) -> Result<f64> {
    let hop = items[0].0.hop_seconds;
    if items.iter().any(|(l, _)| l.hop_seconds != hop) {
        return Err(OsdError::Data("labels use different hops".into()));
    }
    Ok(hop)
}

pub fn dataset_stats(
    manifest: &SegmentManifest,
    labels: &HashMap<String, FrameLabels>,
) -> Result<DatasetStats> {
    let items = labels_for(manifest, labels)?;
    let hop = common_hop(&items)?;
    let counts = items
        .iter()
        .map(|(l, _)| ClassFrameCounts::of(l))
        .fold(ClassFrameCounts::default(), ClassFrameCounts::merge);
    DatasetStats::from_counts(counts, hop)
}

/// Per-dataset-tag statistics plus the pooled total.
pub fn dataset_stats_by_tag(
    manifest: &SegmentManifest,
    labels: &HashMap<String, FrameLabels>,
) -> Result<(BTreeMap<String, DatasetStats>, DatasetStats)> {
    let items = labels_for(manifest, labels)?;
    let hop = common_hop(&items)?;
    let mut per_tag: BTreeMap<String, ClassFrameCounts> = BTreeMap::new();
    for (l, tag) in &items {
        let entry = per_tag.entry(tag.clone()).or_default();
        *entry = entry.merge(ClassFrameCounts::of(l));
    }
    let total = per_tag
        .values()
        .fold(ClassFrameCounts::default(), |a, b| a.merge(*b));
    let rows = per_tag
        .into_iter()
        .map(|(tag, c)| DatasetStats::from_counts(c, hop).map(|s| (tag, s)))
        .collect::<Result<_>>()?;
    Ok((rows, DatasetStats::from_counts(total, hop)?))
}
