//! Span masking of embedding frames with multiple independent clones.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};

pub const DEFAULT_CLONES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Probability that a frame starts a span.
    pub p: f64,
    /// Span length in frames.
    pub span: usize,
    pub clones: usize,
    pub seed: u64,
}

impl MaskConfig {
    pub fn new(p: f64, span: usize, clones: usize, seed: u64) -> Result<Self> {
        let cfg = MaskConfig { p, span, clones, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::arg("p", format!("{} not in [0, 1]", self.p)));
        }
        if self.span == 0 {
            return Err(Error::arg("span", "must be at least 1"));
        }
        if self.clones == 0 {
            return Err(Error::arg("clones", "must be at least 1"));
        }
        Ok(())
    }

    /// Closed-form coverage of an interior frame.
    pub fn expected_coverage(&self) -> f64 {
        1.0 - (1.0 - self.p).powi(self.span as i32)
    }
}

/// `clones × T` mask (true = masked) with the span starts that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub masks: Array2<bool>,
    pub starts: Vec<Vec<usize>>,
}

impl MaskPlan {
    pub fn clones(&self) -> usize {
        self.masks.nrows()
    }

    pub fn frames(&self) -> usize {
        self.masks.ncols()
    }

    pub fn clone_mask(&self, c: usize) -> Vec<bool> {
        self.masks.row(c).to_vec()
    }
}

fn draw_clone(rng: &mut ChaCha8Rng, t: usize, p: f64, span: usize) -> (Vec<bool>, Vec<usize>) {
    let mut mask = vec![false; t];
    let mut starts = Vec::new();
    for s in 0..t {
        if rng.random::<f64>() < p {
            starts.push(s);
            for m in &mut mask[s..(s + span).min(t)] {
                *m = true;
            }
        }
    }
    (mask, starts)
}

/// Samples `config.clones` independent masks for a sequence of `t` frames.
///
/// A clone that comes out empty is redrawn once and then accepted.
pub fn sample_mask(t: usize, config: &MaskConfig) -> Result<MaskPlan> {
    config.validate()?;
    if t == 0 {
        return Err(Error::arg("t", "need at least one frame"));
    }
    let mut masks = Array2::from_elem((config.clones, t), false);
    let mut starts = Vec::with_capacity(config.clones);
    for c in 0..config.clones {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(c as u64);
        let (mut mask, mut st) = draw_clone(&mut rng, t, config.p, config.span);
        if st.is_empty() {
            (mask, st) = draw_clone(&mut rng, t, config.p, config.span);
        }
        for (dst, src) in masks.row_mut(c).iter_mut().zip(mask) {
            *dst = src;
        }
        starts.push(st);
    }
    Ok(MaskPlan { masks, starts })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskStats {
    /// Masked fraction over all clones and frames.
    pub coverage: f64,
    /// Fraction of frames masked in at least one clone.
    pub union_coverage: f64,
    /// Maximal masked run length in frames → count, pooled over clones.
    pub run_lengths: BTreeMap<usize, usize>,
    /// Most frequent run length times `frame_ms`; 0 when nothing is masked.
    pub mode_ms: f64,
}

pub fn mask_statistics(plan: &MaskPlan, frame_ms: f64) -> MaskStats {
    let total = plan.masks.len().max(1);
    let masked = plan.masks.iter().filter(|&&m| m).count();
    let union = plan
        .masks
        .axis_iter(Axis(1))
        .filter(|col| col.iter().any(|&m| m))
        .count();
    let mut run_lengths = BTreeMap::new();
    for row in plan.masks.rows() {
        let mut run = 0usize;
        for &m in row.iter().chain(std::iter::once(&false)) {
            if m {
                run += 1;
            } else if run > 0 {
                *run_lengths.entry(run).or_insert(0) += 1;
                run = 0;
            }
        }
    }
    // Ties go to the shortest run.
    let mode = run_lengths
        .iter()
        .fold(None, |best: Option<(usize, usize)>, (&len, &count)| match best {
            Some((_, c)) if c >= count => best,
            _ => Some((len, count)),
        })
        .map_or(0, |(len, _)| len);
    MaskStats {
        coverage: masked as f64 / total as f64,
        union_coverage: union as f64 / plan.frames().max(1) as f64,
        run_lengths,
        mode_ms: mode as f64 * frame_ms,
    }
}

/// Unmasked rows in order plus their original indices.
pub fn apply_mask_student(frames: &Mat, mask: &[bool]) -> Result<(Mat, Vec<usize>)> {
    if frames.nrows() != mask.len() {
        return Err(Error::Shape(format!(
            "mask of length {} for {} frames",
            mask.len(),
            frames.nrows()
        )));
    }
    let index: Vec<usize> = (0..mask.len()).filter(|&t| !mask[t]).collect();
    if index.is_empty() {
        return Err(Error::DegenerateInput("every frame is masked".into()));
    }
    Ok((frames.select(Axis(0), &index), index))
}

/// Replaces masked rows with standard normal draws.
pub fn fill_masked_noise(frames: &Mat, mask: &[bool], seed: u64) -> Result<Mat> {
    if frames.nrows() != mask.len() {
        return Err(Error::Shape(format!(
            "mask of length {} for {} frames",
            mask.len(),
            frames.nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = frames.clone();
    for (mut row, &m) in out.rows_mut().into_iter().zip(mask) {
        if m {
            row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        }
    }
    Ok(out)
}
