use ndarray::Array2;

use super::{ClassTable, LabelEvent};
use crate::error::{Error, Result};

/// Allowed slack when checking event bounds against the clip duration.
const BOUND_TOL_S: f64 = 1e-9;

/// Binary multi-label frame targets, `frames × classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    pub frames: Array2<f64>,
    pub frame_rate: f64,
}

impl FrameTargets {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    /// First `n` frames, zero padded when the grid is shorter.
    pub fn fit_to(&self, n: usize) -> FrameTargets {
        let mut out = Array2::zeros((n, self.frames.ncols()));
        let m = n.min(self.n_frames());
        out.slice_mut(ndarray::s![..m, ..])
            .assign(&self.frames.slice(ndarray::s![..m, ..]));
        FrameTargets {
            frames: out,
            frame_rate: self.frame_rate,
        }
    }
}

/// Rasterizes events: frame `t` is set for a class when its center
/// `(t + 0.5) / frame_rate` lies in `[onset, offset)`.
pub fn frame_targets(
    events: &[LabelEvent],
    duration_s: f64,
    frame_rate: f64,
    table: &ClassTable,
) -> Result<FrameTargets> {
    if !(frame_rate > 0.0) || !frame_rate.is_finite() {
        return Err(Error::arg("frame_rate", format!("{frame_rate} is not positive")));
    }
    if !(duration_s > 0.0) {
        return Err(Error::arg("duration_s", format!("{duration_s} is not positive")));
    }
    let n = (duration_s * frame_rate + BOUND_TOL_S).floor() as usize;
    let mut frames = Array2::zeros((n, table.len()));
    for (i, e) in events.iter().enumerate() {
        if e.class_id >= table.len() {
            return Err(Error::Label {
                row: i,
                reason: format!("class id {} outside table", e.class_id),
            });
        }
        if e.onset_s < -BOUND_TOL_S || e.offset_s > duration_s + BOUND_TOL_S || e.offset_s <= e.onset_s {
            return Err(Error::Label {
                row: i,
                reason: format!(
                    "event {}..{} outside clip of {} s",
                    e.onset_s, e.offset_s, duration_s
                ),
            });
        }
        let lo = ((e.onset_s * frame_rate - 0.5).floor() as i64 - 1).max(0) as usize;
        let hi = ((e.offset_s * frame_rate).ceil() as usize + 1).min(n);
        for t in lo..hi {
            let center = (t as f64 + 0.5) / frame_rate;
            if center >= e.onset_s && center < e.offset_s {
                frames[[t, e.class_id]] = 1.0;
                if e.focal {
                    if let Some(f) = table.focal_index() {
                        frames[[t, f]] = 1.0;
                    }
                }
            }
        }
    }
    Ok(FrameTargets { frames, frame_rate })
}
