//! Detection scoring: per-class average precision at tIoU thresholds and
//! the mean over classes and thresholds.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{tiou_1d, GtSegment, Prediction, Segment};

/// One scored, labeled segment. Times are in whatever unit the matching
/// ground truth uses (seconds in files).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub segment: Segment,
    pub label: usize,
    pub score: f64,
}

/// Detections keyed by video id. Ordered so that reports do not depend on
/// insertion order.
pub type DetectionSet = BTreeMap<String, Vec<Detection>>;
pub type GroundTruthSet = BTreeMap<String, Vec<GtSegment>>;

/// Rank order: descending score, then earlier start, then lower index.
fn rank_order(a: (f64, f64, usize), b: (f64, f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal))
        .then(a.2.cmp(&b.2))
}

/// Greedy TP/FP assignment for one class in one video.
///
/// Returns `(index into dets, is_tp)` in rank order.
pub fn greedy_match_detections(dets: &[(Segment, f64)], gts: &[Segment], threshold: f64) -> Vec<(usize, bool)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| rank_order((dets[i].1, dets[i].0.start, i), (dets[j].1, dets[j].0.start, j)));
    let mut used = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (k, gt) in gts.iter().enumerate() {
                if used[k] {
                    continue;
                }
                let iou = tiou_1d(dets[i].0, *gt);
                if best.map_or(true, |(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            match best {
                Some((k, iou)) if iou >= threshold => {
                    used[k] = true;
                    (i, true)
                }
                _ => (i, false),
            }
        })
        .collect()
}

/// All-point interpolated AP over flags already in rank order.
///
/// `None` when there is nothing to score (no GT and no detections).
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (rank, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    // Interpolated precision at rank i is tp_j / (j + 1) for the arg-max j >= i,
    // so the sum is rational. Summing it exactly gives a correctly rounded AP
    // for the usual list lengths; very long lists fall back to floating point.
    let mut best = vec![(0u128, 1u128); flags.len()];
    let mut tp = 0u128;
    for (rank, &hit) in flags.iter().enumerate() {
        tp += hit as u128;
        best[rank] = (tp, rank as u128 + 1);
    }
    for i in (0..best.len().saturating_sub(1)).rev() {
        let (a, b) = (best[i], best[i + 1]);
        if b.0 * a.1 > a.0 * b.1 {
            best[i] = b;
        }
    }
    let exact = flags
        .iter()
        .zip(&best)
        .filter(|(&hit, _)| hit)
        .try_fold((0u128, 1u128), |acc, (_, &p)| add_ratio(acc, p));
    if let Some((n, d)) = exact {
        if let Some(d) = d.checked_mul(num_gt as u128) {
            return Some(ratio_to_f64(n, d));
        }
    }
    let ap: f64 = flags
        .iter()
        .zip(&precision)
        .filter(|(&hit, _)| hit)
        .map(|(_, &p)| p)
        .sum();
    Some(ap / num_gt as f64)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn add_ratio(a: (u128, u128), b: (u128, u128)) -> Option<(u128, u128)> {
    let g = gcd(a.1, b.1);
    let d = (a.1 / g).checked_mul(b.1)?;
    let n = a.0.checked_mul(b.1 / g)?.checked_add(b.0.checked_mul(a.1 / g)?)?;
    let r = gcd(n, d).max(1);
    Some((n / r, d / r))
}

/// Correctly rounded `n / d` for `n <= d`.
fn ratio_to_f64(n: u128, d: u128) -> f64 {
    if n == 0 {
        return 0.0;
    }
    if n < (1 << 53) && d < (1 << 53) {
        // both exact in f64, and IEEE division rounds correctly
        return n as f64 / d as f64;
    }
    // long division to 64 fractional bits, then one rounding
    let (mut rem, mut bits) = (n, 0u128);
    for _ in 0..64 {
        rem <<= 1;
        bits <<= 1;
        if rem >= d {
            rem -= d;
            bits |= 1;
        }
    }
    let sticky = (rem != 0) as u128;
    ((bits | sticky) as f64) / 2f64.powi(64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub threshold: f64,
    pub map: f64,
    /// AP for every class with at least one GT instance.
    pub per_class: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<ThresholdReport>,
    pub average_map: f64,
}

impl EvalReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|t| (t.threshold - threshold).abs() < 1e-9)
            .map(|t| t.map)
    }

    /// Human-readable table: one column per threshold plus the average.
    pub fn table(&self) -> String {
        let mut head = String::from("tIoU   ");
        let mut row = String::from("mAP    ");
        for t in &self.thresholds {
            head.push_str(&format!("{:>8.2}", t.threshold));
            row.push_str(&format!("{:>8.4}", t.map));
        }
        head.push_str(&format!("{:>8}", "avg"));
        row.push_str(&format!("{:>8.4}", self.average_map));
        format!("{head}\n{row}\n")
    }
}

/// AP of one class at one threshold, pooled over videos.
fn class_ap(class: usize, dets: &DetectionSet, gts: &GroundTruthSet, threshold: f64) -> Option<f64> {
    // (score, start, video rank, index, tp)
    let mut pooled: Vec<(f64, f64, usize, usize, bool)> = Vec::new();
    let mut num_gt = 0;
    let videos: BTreeSet<&String> = dets.keys().chain(gts.keys()).collect();
    for (v, vid) in videos.into_iter().enumerate() {
        let gt: Vec<Segment> = gts
            .get(vid)
            .map(|g| g.iter().filter(|g| g.label == class).map(|g| g.segment).collect())
            .unwrap_or_default();
        num_gt += gt.len();
        let mine: Vec<(Segment, f64)> = dets
            .get(vid)
            .map(|d| d.iter().filter(|d| d.label == class).map(|d| (d.segment, d.score)).collect())
            .unwrap_or_default();
        for (i, tp) in greedy_match_detections(&mine, &gt, threshold) {
            pooled.push((mine[i].1, mine[i].0.start, v, i, tp));
        }
    }
    pooled.sort_by(|a, b| rank_order((a.0, a.1, 0), (b.0, b.1, 0)).then((a.2, a.3).cmp(&(b.2, b.3))));
    let flags: Vec<bool> = pooled.iter().map(|p| p.4).collect();
    average_precision(&flags, num_gt)
}

/// Per-class AP at each threshold, class mean over classes present in the
/// ground truth, and the mean over thresholds.
pub fn map_suite(dets: &DetectionSet, gts: &GroundTruthSet, thresholds: &[f64]) -> Result<EvalReport> {
    if thresholds.is_empty() {
        return Err(Error::Config("at least one tIoU threshold is required".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::Config(format!("tIoU threshold {t} outside (0, 1]")));
    }
    let classes: BTreeSet<usize> = gts.values().flatten().map(|g| g.label).collect();
    if classes.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let reports: Vec<ThresholdReport> = thresholds
        .iter()
        .map(|&threshold| {
            let per_class: BTreeMap<usize, f64> = classes
                .iter()
                .map(|&c| (c, class_ap(c, dets, gts, threshold).unwrap_or(0.0)))
                .collect();
            let map = per_class.values().sum::<f64>() / per_class.len() as f64;
            ThresholdReport {
                threshold,
                map,
                per_class,
            }
        })
        .collect();
    let average_map = reports.iter().map(|r| r.map).sum::<f64>() / reports.len() as f64;
    Ok(EvalReport {
        thresholds: reports,
        average_map,
    })
}

/// Parses `start:step:end` (inclusive) or a comma-separated list.
pub fn parse_thresholds(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("cannot parse thresholds {spec:?}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let out = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let (start, step, end) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if step <= 0.0 || end < start {
            return Err(bad());
        }
        let n = ((end - start) / step + 1e-9).floor() as usize + 1;
        // round away accumulated binary error so 0.3 + 0.1 prints as 0.4
        (0..n)
            .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
            .collect()
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if out.is_empty() || out.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(bad());
    }
    Ok(out)
}

/// Classic greedy non-maximum suppression within each class.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| rank_order((dets[i].score, dets[i].segment.start, i), (dets[j].score, dets[j].segment.start, j)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.label == d.label && tiou_1d(k.segment, d.segment) > threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// One detection per query: its most probable class, scored by that
/// class's sigmoid probability, with times scaled from `[0, 1]` to `duration`.
pub fn detections_from_predictions(preds: &[Prediction], duration: f64) -> Vec<Detection> {
    preds
        .iter()
        .map(|p| {
            let (label, score) = p.top_class();
            Detection {
                segment: Segment::new(p.segment.start * duration, p.segment.end * duration),
                label,
                score,
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    segment: [f64; 2],
    label: usize,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct DetectionFile {
    results: BTreeMap<String, Vec<DetectionRecord>>,
}

pub fn write_detections(path: impl AsRef<Path>, dets: &DetectionSet) -> Result<()> {
    let path = path.as_ref();
    let file = DetectionFile {
        results: dets
            .iter()
            .map(|(k, v)| {
                let recs = v
                    .iter()
                    .map(|d| DetectionRecord {
                        segment: [d.segment.start, d.segment.end],
                        label: d.label,
                        score: d.score,
                    })
                    .collect();
                (k.clone(), recs)
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<DetectionSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: DetectionFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    Ok(file
        .results
        .into_iter()
        .map(|(k, v)| {
            let dets = v
                .into_iter()
                .map(|r| Detection {
                    segment: Segment::new(r.segment[0], r.segment[1]),
                    label: r.label,
                    score: r.score,
                })
                .collect();
            (k, dets)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(a: f64, b: f64) -> Segment {
        Segment::new(a, b)
    }

    #[test]
    fn one_exact_detection_is_tp() {
        let flags = greedy_match_detections(&[(seg(1.0, 2.0), 0.9)], &[seg(1.0, 2.0)], 0.5);
        assert_eq!(flags, vec![(0, true)]);
    }

    #[test]
    fn gt_is_consumed_once() {
        let d = [(seg(1.0, 2.0), 0.9), (seg(1.0, 2.0), 0.8)];
        let flags = greedy_match_detections(&d, &[seg(1.0, 2.0)], 0.5);
        assert_eq!(flags, vec![(0, true), (1, false)]);
    }

    #[test]
    fn three_detection_walkthrough() {
        // gt A = [0, 10], gt B = [20, 30]
        // d0 (0.9): tIoU 0.6 with A             -> TP, consumes A
        // d1 (0.8): tIoU 0.4 with B             -> FP at 0.5
        // d2 (0.7): tIoU 0.55 with B            -> TP
        let gts = [seg(0.0, 10.0), seg(20.0, 30.0)];
        let d = [(seg(0.0, 6.0), 0.9), (seg(24.0, 28.0), 0.8), (seg(20.0, 25.5), 0.7)];
        assert!((tiou_1d(d[0].0, gts[0]) - 0.6).abs() < 1e-12);
        assert!((tiou_1d(d[1].0, gts[1]) - 0.4).abs() < 1e-12);
        assert!((tiou_1d(d[2].0, gts[1]) - 0.55).abs() < 1e-12);
        let flags = greedy_match_detections(&d, &gts, 0.5);
        assert_eq!(flags, vec![(0, true), (1, false), (2, true)]);
        let ranked: Vec<bool> = flags.iter().map(|f| f.1).collect();
        assert_eq!(average_precision(&ranked, 2), Some(5.0 / 6.0));
    }

    #[test]
    fn ties_break_by_start_then_index() {
        let d = [(seg(5.0, 6.0), 0.5), (seg(1.0, 2.0), 0.5), (seg(1.0, 2.0), 0.5)];
        let order: Vec<usize> = greedy_match_detections(&d, &[], 0.5).iter().map(|f| f.0).collect();
        assert_eq!(order, vec![1, 2, 0]);
    }

    #[test]
    fn ap_edge_cases() {
        assert_eq!(average_precision(&[true, true], 2), Some(1.0));
        assert_eq!(average_precision(&[false, false], 2), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        assert_eq!(average_precision(&[false], 0), Some(0.0));
        assert_eq!(average_precision(&[true, false, true], 2), Some(5.0 / 6.0));
    }

    fn gt(a: f64, b: f64, label: usize) -> GtSegment {
        GtSegment {
            segment: seg(a, b),
            label,
        }
    }

    fn det(a: f64, b: f64, label: usize, score: f64) -> Detection {
        Detection {
            segment: seg(a, b),
            label,
            score,
        }
    }

    #[test]
    fn two_class_two_video_table() {
        let mut gts = GroundTruthSet::new();
        gts.insert("a".into(), vec![gt(0.0, 10.0, 0), gt(20.0, 30.0, 1)]);
        gts.insert("b".into(), vec![gt(5.0, 15.0, 0)]);
        let mut dets = DetectionSet::new();
        // class 0: a hit (0.9), b miss (0.8), b hit (0.6) -> [TP, FP, TP] over 2 GT
        // class 1: a loose (tIoU 0.5) at 0.3 -> TP at 0.3..0.5, FP above
        dets.insert("a".into(), vec![det(0.0, 10.0, 0, 0.9), det(20.0, 30.0, 1, 0.3).shift_end(-5.0)]);
        dets.insert("b".into(), vec![det(40.0, 50.0, 0, 0.8), det(5.0, 15.0, 0, 0.6)]);
        let rep = map_suite(&dets, &gts, &[0.3, 0.5, 0.7]).unwrap();
        let c0 = 5.0 / 6.0;
        assert_eq!(rep.thresholds[0].per_class[&0], c0);
        assert_eq!(rep.thresholds[0].per_class[&1], 1.0);
        assert_eq!(rep.thresholds[1].per_class[&1], 1.0);
        assert_eq!(rep.thresholds[2].per_class[&1], 0.0);
        assert_eq!(rep.map_at(0.7), Some(c0 / 2.0));
        let avg = ((c0 + 1.0) / 2.0 * 2.0 + c0 / 2.0) / 3.0;
        assert!((rep.average_map - avg).abs() < 1e-15);
    }

    impl Detection {
        fn shift_end(mut self, by: f64) -> Self {
            self.segment.end += by;
            self
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let mut gts = GroundTruthSet::new();
        gts.insert("v".into(), vec![gt(1.0, 4.0, 0), gt(6.0, 9.0, 2)]);
        let dets: DetectionSet = gts
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|g| det(g.segment.start, g.segment.end, g.label, 0.9)).collect()))
            .collect();
        let rep = map_suite(&dets, &gts, &parse_thresholds("0.3:0.1:0.7").unwrap()).unwrap();
        assert!(rep.thresholds.iter().all(|t| t.map == 1.0));
        assert_eq!(rep.average_map, 1.0);
    }

    #[test]
    fn missing_gt_is_error() {
        assert!(matches!(
            map_suite(&DetectionSet::new(), &GroundTruthSet::new(), &[0.5]),
            Err(Error::NoGroundTruth)
        ));
        let mut gts = GroundTruthSet::new();
        gts.insert("v".into(), vec![gt(0.0, 1.0, 0)]);
        assert!(map_suite(&DetectionSet::new(), &gts, &[]).is_err());
        assert!(map_suite(&DetectionSet::new(), &gts, &[1.5]).is_err());
    }

    #[test]
    fn threshold_grids() {
        assert_eq!(parse_thresholds("0.3:0.1:0.7").unwrap(), vec![0.3, 0.4, 0.5, 0.6, 0.7]);
        assert_eq!(parse_thresholds("0.5:0.05:0.95").unwrap().len(), 10);
        assert_eq!(parse_thresholds("0.5,0.75").unwrap(), vec![0.5, 0.75]);
        assert!(parse_thresholds("0.3:0.1").is_err());
        assert!(parse_thresholds("0:0.1:0.5").is_err());
        assert!(parse_thresholds("x").is_err());
    }

    #[test]
    fn nms_suppresses_within_class_only() {
        let d = [det(0.0, 10.0, 0, 0.9), det(1.0, 10.0, 0, 0.8), det(1.0, 10.0, 1, 0.7), det(20.0, 25.0, 0, 0.6)];
        let kept = nms(&d, 0.5);
        assert_eq!(kept.len(), 3);
        assert_eq!(kept[1].label, 1);
    }

    #[test]
    fn detection_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.json");
        let mut dets = DetectionSet::new();
        dets.insert("v1".into(), vec![det(0.1, 2.5, 3, 0.123456789)]);
        write_detections(&path, &dets).unwrap();
        assert_eq!(read_detections(&path).unwrap(), dets);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"results\"") && text.contains("\"segment\""));
    }
}
