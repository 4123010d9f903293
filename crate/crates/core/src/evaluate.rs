//! Event-level scoring: boundary extraction, IOU matching, PR curves and
//! interpolated average precision.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::autograd::Mat;
use crate::corpus::{ClassTable, FrameTargets, LabelEvent};
use crate::error::{Error, Result};

pub const DEFAULT_POOL_S: f64 = 0.1;
pub const DEFAULT_IOU_MIN: f64 = 0.5;
pub const DEFAULT_LEVELS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventPrediction {
    pub class_id: usize,
    pub onset_s: f64,
    pub offset_s: f64,
    pub likelihood: f64,
}

/// A span found in one likelihood trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub onset_s: f64,
    pub offset_s: f64,
    pub mean_likelihood: f64,
}

/// Pooling width in frames, at least one.
pub fn pool_frames(pool_width_s: f64, frame_rate: f64) -> usize {
    ((pool_width_s * frame_rate).round() as usize).max(1)
}

/// Centered moving average truncated at the trace ends. For even widths the
/// window reaches one frame further forward than back.
pub fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let back = (width.max(1) - 1) / 2;
    let fwd = width.max(1) / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(back);
            let hi = (i + fwd).min(x.len() - 1);
            x[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Pools, binarizes at `pooled > threshold`, and turns maximal runs into spans.
pub fn extract_events(likelihoods: &[f64], frame_rate: f64, pool_width_s: f64, threshold: f64) -> Vec<Span> {
    if likelihoods.is_empty() {
        return Vec::new();
    }
    let pooled = moving_average(likelihoods, pool_frames(pool_width_s, frame_rate));
    let mut spans = Vec::new();
    let mut i = 0;
    while i < pooled.len() {
        if pooled[i] > threshold {
            let start = i;
            while i < pooled.len() && pooled[i] > threshold {
                i += 1;
            }
            let raw = &likelihoods[start..i];
            spans.push(Span {
                onset_s: start as f64 / frame_rate,
                offset_s: i as f64 / frame_rate,
                mean_likelihood: raw.iter().sum::<f64>() / raw.len() as f64,
            });
        } else {
            i += 1;
        }
    }
    spans
}

/// Event predictions for every class column of a `T × C` likelihood matrix.
pub fn predict_events(likelihoods: &Mat, frame_rate: f64, pool_width_s: f64, threshold: f64) -> Vec<EventPrediction> {
    let mut out = Vec::new();
    for (c, col) in likelihoods.columns().into_iter().enumerate() {
        let trace: Vec<f64> = col.to_vec();
        out.extend(
            extract_events(&trace, frame_rate, pool_width_s, threshold)
                .into_iter()
                .map(|s| EventPrediction {
                    class_id: c,
                    onset_s: s.onset_s,
                    offset_s: s.offset_s,
                    likelihood: s.mean_likelihood,
                }),
        );
    }
    out
}

pub fn iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub true_positives: Vec<(EventPrediction, LabelEvent, f64)>,
    pub false_positives: Vec<EventPrediction>,
    pub false_negatives: Vec<LabelEvent>,
}

/// A prediction reduced to what the PR sweep needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub likelihood: f64,
    pub hit: bool,
}

impl MatchResult {
    pub fn scored(&self) -> Vec<Scored> {
        let tp = self.true_positives.iter().map(|(p, _, _)| Scored {
            likelihood: p.likelihood,
            hit: true,
        });
        let fp = self.false_positives.iter().map(|p| Scored {
            likelihood: p.likelihood,
            hit: false,
        });
        tp.chain(fp).collect()
    }

    pub fn n_truth(&self) -> usize {
        self.true_positives.len() + self.false_negatives.len()
    }
}

/// Greedy one-to-one matching of `class_id` events in descending IOU order.
/// Ties go to the earlier prediction, then the earlier truth event.
pub fn match_events(predictions: &[EventPrediction], truth: &[LabelEvent], class_id: usize, iou_min: f64) -> MatchResult {
    let preds: Vec<&EventPrediction> = predictions.iter().filter(|p| p.class_id == class_id).collect();
    let gts: Vec<&LabelEvent> = truth.iter().filter(|e| e.class_id == class_id).collect();
    let mut pairs = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, e) in gts.iter().enumerate() {
            let v = iou((p.onset_s, p.offset_s), (e.onset_s, e.offset_s));
            if v > iou_min {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut res = MatchResult::default();
    for (v, i, j) in pairs {
        if pred_used[i] || gt_used[j] {
            continue;
        }
        pred_used[i] = true;
        gt_used[j] = true;
        res.true_positives.push((*preds[i], *gts[j], v));
    }
    res.false_positives = preds.iter().zip(&pred_used).filter(|(_, u)| !**u).map(|(p, _)| **p).collect();
    res.false_negatives = gts.iter().zip(&gt_used).filter(|(_, u)| !**u).map(|(e, _)| **e).collect();
    res
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

/// Operating points of one match set: one per distinct likelihood, keeping
/// predictions with `likelihood >= threshold`, plus a point above the top
/// likelihood where nothing is predicted and precision is 1 by convention.
/// Points are ordered by rising threshold.
pub fn operating_points(scored: &[Scored], n_truth: usize) -> Vec<PrPoint> {
    let mut s = scored.to_vec();
    s.sort_by(|a, b| b.likelihood.total_cmp(&a.likelihood));
    let mut points = vec![PrPoint {
        threshold: f64::INFINITY,
        precision: 1.0,
        recall: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < s.len() {
        let l = s[i].likelihood;
        while i < s.len() && s[i].likelihood == l {
            if s[i].hit {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold: l,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / n_truth as f64,
        });
    }
    points.reverse();
    points
}

/// Mean over evenly spaced recall levels of the best precision reached at
/// or beyond each level; levels with no such point contribute 0.
pub fn average_precision(points: &[PrPoint], n_levels: usize) -> Result<f64> {
    if n_levels < 2 {
        return Err(Error::arg("n_levels", format!("{n_levels} < 2")));
    }
    let mut total = 0.0;
    for i in 0..n_levels {
        let r = i as f64 / (n_levels - 1) as f64;
        let best = points
            .iter()
            .filter(|p| p.recall >= r - 1e-12)
            .map(|p| p.precision)
            .fold(0.0, f64::max);
        total += best;
    }
    Ok(total / n_levels as f64)
}

/// PR curve over the union of operating points from several extraction
/// passes that share the same ground truth.
pub fn pr_curve(passes: &[Vec<Scored>], n_truth: usize, n_levels: usize) -> Result<PrCurve> {
    if n_truth == 0 {
        return Err(Error::Metric("no ground-truth events; AP is undefined".into()));
    }
    let mut points = Vec::new();
    for p in passes {
        points.extend(operating_points(p, n_truth));
    }
    let ap = average_precision(&points, n_levels)?;
    Ok(PrCurve { points, ap })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub pool_width_s: f64,
    pub iou_min: f64,
    pub n_levels: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pool_width_s: DEFAULT_POOL_S,
            iou_min: DEFAULT_IOU_MIN,
            n_levels: DEFAULT_LEVELS,
        }
    }
}

/// Pooled match outcomes of one class across clips, one entry per
/// extraction threshold.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassMatches {
    pub passes: Vec<Vec<Scored>>,
    pub n_truth: usize,
    pub n_tp: usize,
    pub n_fp: usize,
    pub n_fn: usize,
}

/// Micro curve over pooled non-focal events and the unweighted mean of
/// non-focal class APs. Classes without ground truth are left out of the
/// macro mean.
pub fn aggregate(per_class: &BTreeMap<usize, ClassMatches>, table: &ClassTable, n_levels: usize) -> Result<(PrCurve, f64)> {
    let scored: Vec<usize> = table
        .scored_classes()
        .into_iter()
        .filter(|c| per_class.get(c).is_some_and(|m| m.n_truth > 0))
        .collect();
    if scored.is_empty() {
        return Err(Error::Metric("no non-focal class has ground-truth events".into()));
    }
    let n_passes = scored.iter().map(|c| per_class[c].passes.len()).max().unwrap_or(0);
    let mut pooled = vec![Vec::new(); n_passes];
    let mut n_truth = 0;
    let mut macro_sum = 0.0;
    for c in &scored {
        let m = &per_class[c];
        for (k, p) in m.passes.iter().enumerate() {
            pooled[k].extend_from_slice(p);
        }
        n_truth += m.n_truth;
        macro_sum += pr_curve(&m.passes, m.n_truth, n_levels)?.ap;
    }
    let micro = pr_curve(&pooled, n_truth, n_levels)?;
    Ok((micro, macro_sum / scored.len() as f64))
}

/// Likelihoods and ground truth of one clip.
pub struct ClipResult<'a> {
    pub likelihoods: &'a Mat,
    pub truth: &'a [LabelEvent],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub name: String,
    pub ap: Option<f64>,
    pub n_truth: usize,
    pub n_tp: usize,
    pub n_fp: usize,
    pub n_fn: usize,
    #[serde(skip)]
    pub curve: Option<PrCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub micro_ap: f64,
    pub macro_ap: f64,
    pub classes: Vec<ClassReport>,
}

/// Scores a set of clips. The first extraction threshold gives the counts
/// reported per class; all thresholds contribute operating points.
pub fn evaluate_clips(clips: &[ClipResult], table: &ClassTable, frame_rate: f64, thresholds: &[f64], cfg: &EvalConfig) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::Metric("empty evaluation split".into()));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::arg("thresholds", "need at least one value in (0, 1)"));
    }
    let mut per_class: BTreeMap<usize, ClassMatches> = (0..table.len())
        .map(|c| {
            (
                c,
                ClassMatches {
                    passes: vec![Vec::new(); thresholds.len()],
                    ..Default::default()
                },
            )
        })
        .collect();
    for clip in clips {
        if clip.likelihoods.ncols() != table.len() {
            return Err(Error::Shape(format!(
                "likelihoods have {} classes, table has {}",
                clip.likelihoods.ncols(),
                table.len()
            )));
        }
        for (k, &th) in thresholds.iter().enumerate() {
            let preds = predict_events(clip.likelihoods, frame_rate, cfg.pool_width_s, th);
            for c in 0..table.len() {
                let m = match_events(&preds, clip.truth, c, cfg.iou_min);
                let entry = per_class.get_mut(&c).expect("all classes present");
                entry.passes[k].extend(m.scored());
                if k == 0 {
                    entry.n_truth += m.n_truth();
                    entry.n_tp += m.true_positives.len();
                    entry.n_fp += m.false_positives.len();
                    entry.n_fn += m.false_negatives.len();
                }
            }
        }
    }
    let (micro, macro_ap) = aggregate(&per_class, table, cfg.n_levels)?;
    let mut classes = Vec::with_capacity(table.len());
    for (c, m) in &per_class {
        let curve = if m.n_truth > 0 {
            Some(pr_curve(&m.passes, m.n_truth, cfg.n_levels)?)
        } else {
            None
        };
        classes.push(ClassReport {
            name: table.name(*c).to_string(),
            ap: curve.as_ref().map(|c| c.ap),
            n_truth: m.n_truth,
            n_tp: m.n_tp,
            n_fp: m.n_fp,
            n_fn: m.n_fn,
            curve,
        });
    }
    Ok(EvalReport {
        micro_ap: micro.ap,
        macro_ap,
        classes,
    })
}

/// Binary frame scores where a frame is positive if any class is.
/// Precision with no predicted positives and recall with no true positives
/// are 1 by convention.
pub fn frame_binary_scores(likelihoods: &Mat, truth: &FrameTargets, threshold: f64) -> Result<(f64, f64, f64)> {
    if likelihoods.dim() != truth.frames.dim() {
        return Err(Error::Shape(format!(
            "likelihoods {:?} vs targets {:?}",
            likelihoods.dim(),
            truth.frames.dim()
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (pred, gt) in likelihoods.rows().into_iter().zip(truth.frames.rows()) {
        let p = pred.iter().any(|&v| v > threshold);
        let t = gt.iter().any(|&v| v > 0.0);
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 1.0 } else { tp as f64 / (tp + fneg) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(c: usize, a: f64, b: f64) -> LabelEvent {
        LabelEvent {
            class_id: c,
            onset_s: a,
            offset_s: b,
            focal: false,
        }
    }

    fn pred(c: usize, a: f64, b: f64, l: f64) -> EventPrediction {
        EventPrediction {
            class_id: c,
            onset_s: a,
            offset_s: b,
            likelihood: l,
        }
    }

    #[test]
    fn extraction_trivial_traces() {
        let s = extract_events(&[1.0; 50], 200.0, 0.1, 0.5);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].onset_s, s[0].offset_s, s[0].mean_likelihood), (0.0, 0.25, 1.0));
        assert!(extract_events(&[0.0; 50], 200.0, 0.1, 0.5).is_empty());
        assert!(extract_events(&[], 200.0, 0.1, 0.5).is_empty());
    }

    #[test]
    fn rectangular_pulse_by_hand() {
        // Pool 20 frames: window i-9..=i+10. The overlap with frames
        // 100..=139 is i-89 on the rising side and 149-i on the falling
        // side; it must reach 11 of 20, so frames 100..=138 stay on.
        let mut x = vec![0.0; 300];
        x[100..140].iter_mut().for_each(|v| *v = 1.0);
        let s = extract_events(&x, 200.0, 0.1, 0.5);
        assert_eq!(s.len(), 1);
        assert!((s[0].onset_s - 100.0 / 200.0).abs() < 1e-15);
        assert!((s[0].offset_s - 139.0 / 200.0).abs() < 1e-15);
        assert_eq!(s[0].mean_likelihood, 1.0);
    }

    #[test]
    fn mean_uses_raw_likelihoods() {
        let x = [0.0, 0.9, 0.7, 0.8, 0.0];
        let s = extract_events(&x, 10.0, 0.1, 0.5);
        assert_eq!(s.len(), 1);
        assert!((s[0].mean_likelihood - 0.8).abs() < 1e-15);
        assert_eq!((s[0].onset_s, s[0].offset_s), (0.1, 0.4));
    }

    #[test]
    fn moving_average_truncates_edges() {
        let m = moving_average(&[3.0, 0.0, 0.0, 0.0], 3);
        assert_eq!(m, vec![1.5, 1.0, 0.0, 0.0]);
        assert_eq!(moving_average(&[1.0, 2.0], 1), vec![1.0, 2.0]);
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou((0.0, 2.0), (0.0, 2.0)), 1.0);
        assert_eq!(iou((0.0, 1.0), (2.0, 3.0)), 0.0);
        assert!((iou((0.0, 2.0), (1.0, 3.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn matching_examples() {
        let truth = [ev(0, 0.0, 1.0)];
        let m = match_events(&[], &truth, 0, 0.5);
        assert_eq!(m.false_negatives.len(), 1);
        let m = match_events(&[pred(0, 0.0, 1.0, 0.9)], &truth, 0, 0.5);
        assert_eq!(m.true_positives.len(), 1);
        assert_eq!(m.true_positives[0].2, 1.0);

        // IOU 0.8 and 0.6 against [0, 1].
        let preds = [pred(0, 0.0, 0.8, 0.3), pred(0, 0.0, 0.6, 0.9)];
        let m = match_events(&preds, &truth, 0, 0.5);
        assert_eq!(m.true_positives.len(), 1);
        assert!((m.true_positives[0].2 - 0.8).abs() < 1e-12);
        assert_eq!(m.true_positives[0].0.likelihood, 0.3);
        assert_eq!(m.false_positives, vec![preds[1]]);
        assert!(m.false_negatives.is_empty());
    }

    #[test]
    fn matching_respects_class_and_threshold() {
        let truth = [ev(0, 0.0, 1.0), ev(1, 0.0, 1.0)];
        let m = match_events(&[pred(1, 0.0, 1.0, 0.5)], &truth, 0, 0.5);
        assert!(m.true_positives.is_empty() && m.false_positives.is_empty());
        assert_eq!(m.false_negatives.len(), 1);
        // IOU exactly 0.5 is not enough.
        let m = match_events(&[pred(0, 0.0, 0.5, 0.5)], &truth, 0, 0.5);
        assert_eq!(m.false_positives.len(), 1);
    }

    #[test]
    fn perfect_and_hopeless_detectors() {
        let perfect = vec![Scored { likelihood: 1.0, hit: true }; 3];
        let c = pr_curve(&[perfect], 3, 101).unwrap();
        assert_eq!(c.ap, 1.0);
        assert!(c.points.iter().any(|p| p.precision == 1.0 && p.recall == 1.0));

        let junk = vec![Scored { likelihood: 0.7, hit: false }; 4];
        let c = pr_curve(&[junk], 2, 101).unwrap();
        assert!(c.points.iter().filter(|p| p.threshold.is_finite()).all(|p| p.precision == 0.0));
        assert!(pr_curve(&[vec![]], 0, 101).is_err());
    }

    #[test]
    fn four_event_toy() {
        // 0.9 TP, 0.8 FP, 0.7 TP, 0.6 FP with 2 further misses: 4 truth events.
        let s = [(0.9, true), (0.8, false), (0.7, true), (0.6, false)]
            .map(|(l, h)| Scored { likelihood: l, hit: h });
        let c = pr_curve(&[s.to_vec()], 4, 101).unwrap();
        let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.precision, p.recall)).collect();
        assert_eq!(pts, vec![(0.5, 0.5), (2.0 / 3.0, 0.5), (0.5, 0.25), (1.0, 0.25), (1.0, 0.0)]);
        // Levels 0..=25 reach precision 1, levels 26..=50 reach 2/3, the rest 0.
        let hand = (26.0 + 25.0 * 2.0 / 3.0) / 101.0;
        assert!((c.ap - hand).abs() < 1e-12);
    }

    #[test]
    fn constant_precision_gives_that_ap() {
        let pts: Vec<PrPoint> = (0..=10)
            .map(|i| PrPoint {
                threshold: 1.0 - i as f64 / 10.0,
                precision: 0.37,
                recall: i as f64 / 10.0,
            })
            .collect();
        assert!((average_precision(&pts, 101).unwrap() - 0.37).abs() < 1e-12);
        assert!(average_precision(&pts, 1).is_err());
    }

    fn two_class_table() -> ClassTable {
        ClassTable::new(&["a", "b", "focal"], Some("focal")).unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let table = two_class_table();
        let only = ClassMatches {
            passes: vec![vec![
                Scored { likelihood: 0.9, hit: true },
                Scored { likelihood: 0.8, hit: false },
            ]],
            n_truth: 2,
            ..Default::default()
        };
        let mut per = BTreeMap::new();
        per.insert(0, only.clone());
        let (micro, macro_ap) = aggregate(&per, &table, 101).unwrap();
        let single = pr_curve(&only.passes, 2, 101).unwrap().ap;
        assert_eq!(micro.ap, single);
        assert_eq!(macro_ap, single);

        // Focal matches never count.
        per.insert(
            2,
            ClassMatches {
                passes: vec![vec![Scored { likelihood: 1.0, hit: false }; 10]],
                n_truth: 5,
                ..Default::default()
            },
        );
        assert_eq!(aggregate(&per, &table, 101).unwrap().0.ap, single);

        let mut empty = BTreeMap::new();
        empty.insert(2, per[&2].clone());
        assert!(matches!(aggregate(&empty, &table, 101), Err(Error::Metric(_))));
    }

    #[test]
    fn macro_is_mean_of_class_aps() {
        let table = two_class_table();
        let mut per = BTreeMap::new();
        // AP 1 for class a, AP 0 + r0 point for class b.
        per.insert(
            0,
            ClassMatches {
                passes: vec![vec![Scored { likelihood: 0.9, hit: true }]],
                n_truth: 1,
                ..Default::default()
            },
        );
        per.insert(
            1,
            ClassMatches {
                passes: vec![vec![Scored { likelihood: 0.9, hit: false }]],
                n_truth: 1,
                ..Default::default()
            },
        );
        let (_, m) = aggregate(&per, &table, 101).unwrap();
        assert!((m - (1.0 + 1.0 / 101.0) / 2.0).abs() < 1e-12);
    }

    fn targets(rows: &[[f64; 2]]) -> FrameTargets {
        FrameTargets {
            frames: Mat::from_shape_fn((rows.len(), 2), |(i, j)| rows[i][j]),
            frame_rate: 200.0,
        }
    }

    #[test]
    fn frame_scores_examples() {
        let t = targets(&[[1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [0.0, 0.0]]);
        assert_eq!(frame_binary_scores(&t.frames, &t, 0.5).unwrap(), (1.0, 1.0, 1.0));
        let (_, r, f) = frame_binary_scores(&Mat::zeros((4, 2)), &t, 0.5).unwrap();
        assert_eq!((r, f), (0.0, 0.0));
        assert!(frame_binary_scores(&Mat::zeros((3, 2)), &t, 0.5).is_err());
    }

    #[test]
    fn frame_scores_match_counting_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let lik = Mat::from_shape_fn((20, 2), |_| rng.random::<f64>());
            let t = FrameTargets {
                frames: Mat::from_shape_fn((20, 2), |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }),
                frame_rate: 200.0,
            };
            let mut cm = [[0usize; 2]; 2];
            for i in 0..20 {
                let p = (lik[[i, 0]] > 0.6 || lik[[i, 1]] > 0.6) as usize;
                let g = (t.frames[[i, 0]] == 1.0 || t.frames[[i, 1]] == 1.0) as usize;
                cm[p][g] += 1;
            }
            let (p, r, _) = frame_binary_scores(&lik, &t, 0.6).unwrap();
            if cm[1][1] + cm[1][0] > 0 {
                assert_eq!(p, cm[1][1] as f64 / (cm[1][1] + cm[1][0]) as f64);
            }
            if cm[1][1] + cm[0][1] > 0 {
                assert_eq!(r, cm[1][1] as f64 / (cm[1][1] + cm[0][1]) as f64);
            }
        }
    }

    #[test]
    fn end_to_end_on_perfect_likelihoods() {
        let table = two_class_table();
        let truth = [ev(0, 0.5, 1.0), ev(1, 2.0, 2.5)];
        let fr = 200.0;
        let lik = Mat::from_shape_fn((600, 3), |(i, c)| {
            let t = i as f64 / fr;
            match c {
                0 if (0.5..1.0).contains(&t) => 1.0,
                1 if (2.0..2.5).contains(&t) => 1.0,
                _ => 0.0,
            }
        });
        let rep = evaluate_clips(
            &[ClipResult {
                likelihoods: &lik,
                truth: &truth,
            }],
            &table,
            fr,
            &[0.5],
            &EvalConfig::default(),
        )
        .unwrap();
        assert!((rep.micro_ap - 1.0).abs() < 1e-12);
        assert_eq!(rep.classes[0].n_tp, 1);
        assert_eq!(rep.classes[2].ap, None);
        let json = serde_json::to_value(&rep).unwrap();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["classes", "macro_ap", "micro_ap"]);
        assert!(evaluate_clips(&[], &table, fr, &[0.5], &EvalConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn iou_bounded_and_symmetric(a in 0.0f64..10.0, la in 0.01f64..5.0, b in 0.0f64..10.0, lb in 0.01f64..5.0) {
            let x = (a, a + la);
            let y = (b, b + lb);
            let v = iou(x, y);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(y, x));
            if x != y {
                prop_assert!(v < 1.0);
            }
        }

        #[test]
        fn extracted_spans_are_sorted_and_disjoint(x in proptest::collection::vec(0.0f64..1.0, 1..300), th in 0.05f64..0.95) {
            let s = extract_events(&x, 200.0, 0.1, th);
            for w in s.windows(2) {
                prop_assert!(w[0].offset_s < w[1].onset_s);
            }
            for sp in &s {
                prop_assert!(sp.offset_s > sp.onset_s);
                prop_assert!((0.0..=1.0).contains(&sp.mean_likelihood));
            }
        }

        #[test]
        fn match_buckets_partition(
            p in proptest::collection::vec((0.0f64..5.0, 0.05f64..1.0, 0.0f64..1.0), 0..12),
            t in proptest::collection::vec((0.0f64..5.0, 0.05f64..1.0), 0..12),
        ) {
            let preds: Vec<_> = p.iter().map(|&(a, l, s)| pred(0, a, a + l, s)).collect();
            let truth: Vec<_> = t.iter().map(|&(a, l)| ev(0, a, a + l)).collect();
            let m = match_events(&preds, &truth, 0, 0.5);
            prop_assert_eq!(m.true_positives.len() + m.false_positives.len(), preds.len());
            prop_assert_eq!(m.true_positives.len() + m.false_negatives.len(), truth.len());
        }

        #[test]
        fn separating_hits_never_lowers_ap(s in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 1..20), extra in 0usize..5) {
            let scored: Vec<Scored> = s.iter().map(|&(l, h)| Scored { likelihood: l, hit: h }).collect();
            let n_truth = scored.iter().filter(|x| x.hit).count() + extra;
            prop_assume!(n_truth > 0);
            let before = pr_curve(&[scored.clone()], n_truth, 101).unwrap().ap;
            let lifted: Vec<Scored> = scored
                .iter()
                .map(|x| Scored { likelihood: if x.hit { 2.0 + x.likelihood } else { x.likelihood }, hit: x.hit })
                .collect();
            let after = pr_curve(&[lifted], n_truth, 101).unwrap().ap;
            prop_assert!((0.0..=1.0).contains(&before));
            prop_assert!(after >= before - 1e-12);
        }

        #[test]
        fn recall_falls_as_threshold_rises(s in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 0..20)) {
            let scored: Vec<Scored> = s.iter().map(|&(l, h)| Scored { likelihood: l, hit: h }).collect();
            let pts = operating_points(&scored, 25);
            for w in pts.windows(2) {
                prop_assert!(w[0].threshold < w[1].threshold);
                prop_assert!(w[0].recall >= w[1].recall);
            }
        }
    }
}
