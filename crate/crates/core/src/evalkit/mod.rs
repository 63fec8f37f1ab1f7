//! Detection metrics: greedy matching, precision/recall/F1, average IoU,
//! all-point interpolated AP and mAP over IoU 0.50:0.05:0.95, plus an
//! end-to-end FPS benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use crate::boxes::iou;
use crate::boxes::BBox;
use crate::detector::{infer_pair, DetectorModel, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU};
use crate::error::{Error, Result};
use crate::geometry::GrayImage;
use crate::nn::Float;

/// IoU needed for a true positive in the P/R/F1 row and mAP@0.5.
pub const MATCH_IOU: f64 = 0.5;

/// A detection reduced to what the metrics need.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Self { bbox, score }
    }
}

/// Detections and ground truth of one frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub detections: Vec<ScoredBox>,
    pub ground_truth: Vec<BBox>,
}

/// Matching outcome, indexed like the inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub det_tp: Vec<bool>,
    pub det_gt: Vec<Option<usize>>,
    /// IoU with the matched ground truth; 0 for false positives.
    pub det_iou: Vec<f64>,
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.det_tp.iter().filter(|&&t| t).count()
    }

    pub fn fp(&self) -> usize {
        self.det_tp.len() - self.tp()
    }

    pub fn missed(&self) -> usize {
        self.gt_matched.iter().filter(|&&m| !m).count()
    }
}

/// Indices sorted by score descending; equal scores keep input order.
fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let s: Vec<f64> = scores.collect();
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    idx
}

/// Greedy matching in descending score order: each detection takes the
/// still-unmatched ground truth it overlaps most (lowest index on a tie),
/// provided that IoU reaches `iou_threshold`.
pub fn match_detections(dets: &[ScoredBox], gts: &[BBox], iou_threshold: f64) -> MatchResult {
    let mut r = MatchResult {
        det_tp: vec![false; dets.len()],
        det_gt: vec![None; dets.len()],
        det_iou: vec![0.0; dets.len()],
        gt_matched: vec![false; gts.len()],
    };
    for i in score_order(dets.iter().map(|d| d.score)) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if r.gt_matched[g] {
                continue;
            }
            let v = iou(&dets[i].bbox, gt);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best.filter(|&(_, v)| v >= iou_threshold) {
            r.gt_matched[g] = true;
            r.det_tp[i] = true;
            r.det_gt[i] = Some(g);
            r.det_iou[i] = v;
        }
    }
    r
}

/// Average precision, with a flag for the degenerate no-ground-truth case.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub no_ground_truth: bool,
}

/// All-point interpolated AP over a dataset: detections from all frames are
/// ranked together, precision is replaced by its running maximum from the
/// right, and the area under the resulting step curve is summed.
pub fn average_precision(frames: &[FrameEval], iou_threshold: f64) -> ApResult {
    let n_gt: usize = frames.iter().map(|f| f.ground_truth.len()).sum();
    if n_gt == 0 {
        return ApResult {
            ap: 0.0,
            no_ground_truth: true,
        };
    }
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    for f in frames {
        let m = match_detections(&f.detections, &f.ground_truth, iou_threshold);
        ranked.extend(f.detections.iter().zip(&m.det_tp).map(|(d, &tp)| (d.score, tp)));
    }
    let order = score_order(ranked.iter().map(|r| r.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for &i in &order {
        if ranked[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ApResult {
        ap,
        no_ground_truth: false,
    }
}

/// The ten COCO-style thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Mean AP over the given IoU thresholds (one class, so mAP equals AP).
pub fn map_range(frames: &[FrameEval], thresholds: &[f64]) -> f64 {
    if thresholds.is_empty() {
        return 0.0;
    }
    thresholds.iter().map(|&t| average_precision(frames, t).ap).sum::<f64>() / thresholds.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub avg_iou: f64,
    pub map_50: f64,
    pub map_50_95: f64,
    pub fps: Option<f64>,
    pub conf_threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub missed: usize,
    pub frames: usize,
    pub interpolation: String,
    pub warnings: Vec<String>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// P/R/F1 and average IoU at `conf_threshold` with IoU-0.5 matching; the
/// mAPs use every detection regardless of the threshold.
pub fn summarize(frames: &[FrameEval], conf_threshold: f64) -> EvalReport {
    let (mut tp, mut fp, mut missed) = (0, 0, 0);
    let mut iou_sum = 0.0;
    for f in frames {
        let kept: Vec<ScoredBox> = f.detections.iter().filter(|d| d.score >= conf_threshold).copied().collect();
        let m = match_detections(&kept, &f.ground_truth, MATCH_IOU);
        tp += m.tp();
        fp += m.fp();
        missed += m.missed();
        iou_sum += m.det_iou.iter().zip(&m.det_tp).filter(|p| *p.1).map(|p| p.0).sum::<f64>();
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + missed);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let ap50 = average_precision(frames, MATCH_IOU);
    let mut warnings = Vec::new();
    if ap50.no_ground_truth {
        warnings.push("no ground-truth boxes; AP reported as 0".to_string());
    }
    if tp + fp == 0 {
        warnings.push(format!("no detections at confidence {conf_threshold}; precision reported as 0"));
    }
    EvalReport {
        precision,
        recall,
        f1,
        avg_iou: if tp == 0 { 0.0 } else { iou_sum / tp as f64 },
        map_50: ap50.ap,
        map_50_95: map_range(frames, &coco_thresholds()),
        fps: None,
        conf_threshold,
        true_positives: tp,
        false_positives: fp,
        missed,
        frames: frames.len(),
        interpolation: "all-point".into(),
        warnings,
    }
}

impl EvalReport {
    /// Plain-text table with the standard column names.
    pub fn table(&self) -> String {
        let fps = self.fps.map_or("-".to_string(), |f| format!("{f:.1}"));
        format!(
            "# AP interpolation: {}; P/R/F1 at confidence {}\n\
             {:>9} {:>6} {:>9} {:>8} {:>9} {:>13} {:>7}\n\
             {:>8.2}% {:>6.2} {:>9.2} {:>8.2} {:>9.2} {:>13.2} {:>7}\n",
            self.interpolation,
            self.conf_threshold,
            "Avg. IoU",
            "Recall",
            "Precision",
            "F1-Score",
            "mAP@0.5",
            "mAP@0.5:0.95",
            "FPS",
            100.0 * self.avg_iou,
            self.recall,
            self.precision,
            self.f1,
            100.0 * self.map_50,
            100.0 * self.map_50_95,
            fps,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub fps: f64,
    pub median_frame_seconds: f64,
    pub warmup: usize,
    pub measured: usize,
    pub input_size: usize,
    pub hardware: String,
}

/// CPU model, logical core count, OS and architecture.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown CPU".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu}, {cores} logical cores, {}-{}",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Wall-clock end-to-end throughput (letterbox, forward, decode, NMS) on
/// one thread; frames are cycled. FPS is the reciprocal of the median frame
/// time.
pub fn fps_bench<T: Float>(
    model: &DetectorModel<T>,
    frames: &[(GrayImage, GrayImage)],
    warmup: usize,
    measured: usize,
) -> Result<FpsReport> {
    if frames.is_empty() || measured == 0 {
        return Err(Error::Invalid("benchmark needs at least one frame and one measured run".into()));
    }
    let run = |i: usize| -> Result<f64> {
        let (ir, th) = &frames[i % frames.len()];
        let start = Instant::now();
        let dets = infer_pair(
            model,
            ir,
            Some(th),
            DEFAULT_CONF_THRESHOLD,
            DEFAULT_NMS_IOU,
        )?;
        std::hint::black_box(dets);
        Ok(start.elapsed().as_secs_f64())
    };
    for i in 0..warmup {
        run(i)?;
    }
    let mut times: Vec<f64> = (0..measured).map(|i| run(warmup + i)).collect::<Result<_>>()?;
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    };
    Ok(FpsReport {
        fps: 1.0 / median.max(f64::MIN_POSITIVE),
        median_frame_seconds: median,
        warmup,
        measured,
        input_size: model.config().input_size,
        hardware: hardware_descriptor(),
    })
}

/// Converts decoded detections to metric inputs.
pub fn scored_boxes(dets: &[crate::detector::Detection]) -> Vec<ScoredBox> {
    dets.iter().map(|d| ScoredBox::new(d.bbox(), d.score)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::from_xywh(x, y, w, h)
    }

    #[test]
    fn matching_fixtures() {
        let gt = [b(0.0, 0.0, 10.0, 10.0)];
        let m = match_detections(&[ScoredBox::new(gt[0], 0.9)], &gt, 0.5);
        assert_eq!((m.tp(), m.fp(), m.missed()), (1, 0, 0));
        let m = match_detections(
            &[ScoredBox::new(gt[0], 0.3), ScoredBox::new(b(1.0, 0.0, 10.0, 10.0), 0.8)],
            &gt,
            0.5,
        );
        assert_eq!(m.det_tp, vec![false, true]);
    }

    #[test]
    fn ap_half_fixture() {
        // First-ranked detection is a false positive, second is a hit.
        let f = FrameEval {
            detections: vec![
                ScoredBox::new(b(50.0, 50.0, 5.0, 5.0), 0.9),
                ScoredBox::new(b(0.0, 0.0, 10.0, 10.0), 0.8),
            ],
            ground_truth: vec![b(0.0, 0.0, 10.0, 10.0)],
        };
        assert_eq!(average_precision(&[f], 0.5).ap, 0.5);
        let empty = average_precision(&[FrameEval::default()], 0.5);
        assert!(empty.no_ground_truth && empty.ap == 0.0);
    }

    #[test]
    fn map_at_iou_point_six() {
        // 10x10 boxes offset by 2.5: intersection 75, union 125.
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let det = b(2.5, 0.0, 10.0, 10.0);
        assert!((iou(&gt, &det) - 0.6).abs() < 1e-15);
        let f = [FrameEval {
            detections: vec![ScoredBox::new(det, 0.9)],
            ground_truth: vec![gt],
        }];
        let m = map_range(&f, &coco_thresholds());
        assert!((m - 0.3).abs() < 1e-12, "{m}");
    }

    #[test]
    fn summary_fixtures() {
        let g: Vec<BBox> = (0..4).map(|i| b(20.0 * i as f64, 0.0, 10.0, 10.0)).collect();
        let f = FrameEval {
            detections: vec![
                ScoredBox::new(g[0], 0.9),
                ScoredBox::new(g[1], 0.8),
                ScoredBox::new(g[2], 0.7),
                ScoredBox::new(b(200.0, 200.0, 5.0, 5.0), 0.6),
            ],
            ground_truth: g.clone(),
        };
        let r = summarize(std::slice::from_ref(&f), 0.25);
        assert_eq!((r.precision, r.recall, r.f1), (0.75, 0.75, 0.75));
        assert_eq!(r.avg_iou, 1.0);
        let none = summarize(&[f], 1.0 + 1e-9);
        assert_eq!((none.precision, none.recall), (0.0, 0.0));
        assert!(!none.warnings.is_empty());
    }
}
