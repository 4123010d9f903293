//! Audio and label ingestion, framewise targets, and data splits.

mod labels;
mod resample;
mod split;
mod targets;
mod wav;

pub use labels::{
    load_class_table, load_labels, load_manifest, save_manifest, ClassTable, LabelEvent, Manifest,
};
pub use resample::{resample, KAISER_BETA, ROLLOFF};
pub use split::{fewshot_subsample, stratified_kfold, LabelSet, SplitPlan};
pub use targets::{frame_targets, FrameTargets};
pub use wav::{load_clip, write_clip};

/// Mono waveform in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub id: String,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_path: String,
}

impl AudioClip {
    pub fn new(id: impl Into<String>, samples: Vec<f64>, sample_rate: u32) -> Self {
        AudioClip {
            id: id.into(),
            samples,
            sample_rate,
            source_path: String::new(),
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
