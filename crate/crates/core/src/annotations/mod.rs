//! RTTM speaker turns, frame-level label rasterization, segment manifests and
//! corpus statistics.

pub mod labels;
pub mod manifest;
pub mod rttm;
pub mod stats;

pub use labels::{
    collapse_to_binary, merge_speaker_turns, rasterize_labels, FrameClass, FrameGrid, FrameLabels,
    CLASS_CODING, CLASS_COUNT,
};
pub use manifest::{ManifestRecord, SegmentManifest};
pub use rttm::{format_rttm, parse_rttm, parse_rttm_str, SpeakerTurn};
pub use stats::{dataset_stats, dataset_stats_by_tag, ClassFrameCounts, DatasetStats};
