use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::RawPrediction;
use crate::boxes::{BBox, GroundTruthBox};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Float};

/// Upper bound on the raw log-size offsets before exponentiation.
pub const MAX_LOG_SCALE: f64 = 10.0;

/// Offsets in `(0, 1)` are clamped this far from the ends before the logit.
const LOGIT_MARGIN: f64 = 1e-9;

/// A decoded box in input-frame pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub objectness: f64,
    pub class_probs: Vec<f64>,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

/// One `(scale, anchor, row, column)` slot of the head outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub scale: usize,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
}

impl Slot {
    /// Index into a per-scale `3·G·G` mask.
    pub fn mask_index(&self, grid: usize) -> usize {
        (self.anchor * grid + self.gy) * grid + self.gx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Positive {
    pub slot: Slot,
    pub gt: GroundTruthBox,
}

/// Training targets for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub positives: Vec<Positive>,
    /// Per scale, `3·G·G` flags of anchors left out of the objectness loss.
    pub ignore: [Vec<bool>; 2],
    /// Ground truths that lost their slot to a better-matching box.
    pub dropped: usize,
}

impl Targets {
    pub fn empty(config: &ModelConfig) -> Self {
        let g = config.grids();
        Self {
            positives: Vec::new(),
            ignore: [vec![false; 3 * g[0] * g[0]], vec![false; 3 * g[1] * g[1]]],
            dropped: 0,
        }
    }

    pub fn positive_mask(&self, config: &ModelConfig) -> [Vec<bool>; 2] {
        let g = config.grids();
        let mut m = [vec![false; 3 * g[0] * g[0]], vec![false; 3 * g[1] * g[1]]];
        for p in &self.positives {
            m[p.slot.scale][p.slot.mask_index(g[p.slot.scale])] = true;
        }
        m
    }
}

/// IoU of two boxes sharing a center.
pub fn shape_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    inter / (w1 * h1 + w2 * h2 - inter)
}

/// Grid cell holding a center coordinate at one scale.
pub fn cell_of(c: f64, stride: f64, grid: usize) -> usize {
    ((c / stride).floor().max(0.0) as usize).min(grid - 1)
}

/// Decodes raw offsets `(t_x, t_y, t_w, t_h)` at a slot into a pixel box.
pub fn decode_box(t: [f64; 4], slot: &Slot, config: &ModelConfig) -> [f64; 4] {
    let stride = config.strides()[slot.scale] as f64;
    let [aw, ah] = config.anchors[slot.scale][slot.anchor];
    [
        (sigmoid(t[0]) + slot.gx as f64) * stride,
        (sigmoid(t[1]) + slot.gy as f64) * stride,
        aw * t[2].min(MAX_LOG_SCALE).exp(),
        ah * t[3].min(MAX_LOG_SCALE).exp(),
    ]
}

/// Algebraic inverse of [`decode_box`].
pub fn encode_box(gt: &GroundTruthBox, slot: &Slot, config: &ModelConfig) -> [f64; 4] {
    let stride = config.strides()[slot.scale] as f64;
    let [aw, ah] = config.anchors[slot.scale][slot.anchor];
    let logit = |p: f64| {
        let p = p.clamp(LOGIT_MARGIN, 1.0 - LOGIT_MARGIN);
        (p / (1.0 - p)).ln()
    };
    [
        logit(gt.cx / stride - slot.gx as f64),
        logit(gt.cy / stride - slot.gy as f64),
        (gt.w / aw).ln(),
        (gt.h / ah).ln(),
    ]
}

/// Reads the `5 + classes` raw values of one slot for sample `n`.
pub fn slot_values<T: Float>(raw: &RawPrediction<T>, n: usize, slot: &Slot, config: &ModelConfig) -> Vec<f64> {
    let t = &raw.scales[slot.scale];
    let per = config.outputs_per_anchor();
    (0..per)
        .map(|j| t.at(n, slot.anchor * per + j, slot.gy, slot.gx).f64())
        .collect()
}

/// Decodes every anchor of every cell; outer index is the batch sample.
pub fn decode_predictions<T: Float>(raw: &RawPrediction<T>, config: &ModelConfig) -> Vec<Vec<Detection>> {
    let grids = config.grids();
    (0..raw.scales[0].n())
        .map(|n| {
            let mut out = Vec::new();
            for (scale, &g) in grids.iter().enumerate() {
                for anchor in 0..3 {
                    for gy in 0..g {
                        for gx in 0..g {
                            let slot = Slot { scale, anchor, gy, gx };
                            let v = slot_values(raw, n, &slot, config);
                            let [cx, cy, w, h] = decode_box([v[0], v[1], v[2], v[3]], &slot, config);
                            let objectness = sigmoid(v[4]);
                            let class_probs: Vec<f64> = v[5..].iter().map(|&z| sigmoid(z)).collect();
                            let (class_id, best) = class_probs
                                .iter()
                                .enumerate()
                                .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
                            out.push(Detection {
                                cx,
                                cy,
                                w,
                                h,
                                objectness,
                                class_probs,
                                class_id,
                                score: objectness * best,
                            });
                        }
                    }
                }
            }
            out
        })
        .collect()
}

/// Assigns each ground truth to the anchor (over both scales) whose shape
/// best matches it, at the cell holding its center. Other anchors matching a
/// ground truth above the ignore threshold are excluded from the objectness
/// loss. When two boxes claim one slot the better match keeps it (the earlier
/// box on a tie) and the other is counted in `dropped`.
pub fn assign_targets(gt_boxes: &[GroundTruthBox], config: &ModelConfig) -> Result<Targets> {
    let s = config.input_size as f64;
    let grids = config.grids();
    let strides = config.strides();
    let mut t = Targets::empty(config);
    let mut claims: Vec<(Slot, f64, usize)> = Vec::new();
    for (i, gt) in gt_boxes.iter().enumerate() {
        let b = gt.bbox();
        let tol = 1e-6;
        if !(gt.w > 0.0 && gt.h > 0.0)
            || b.x_min < -tol
            || b.y_min < -tol
            || b.x_max > s + tol
            || b.y_max > s + tol
            || gt.class_id >= config.num_classes
        {
            return Err(Error::Invalid(format!("ground truth {gt:?} is outside the {s} px frame")));
        }
        let mut best: Option<(Slot, f64)> = None;
        for scale in 0..2 {
            let stride = strides[scale] as f64;
            let (gx, gy) = (cell_of(gt.cx, stride, grids[scale]), cell_of(gt.cy, stride, grids[scale]));
            for anchor in 0..3 {
                let [aw, ah] = config.anchors[scale][anchor];
                let iou = shape_iou(gt.w, gt.h, aw, ah);
                let slot = Slot { scale, anchor, gy, gx };
                if iou > config.ignore_iou_threshold {
                    t.ignore[scale][slot.mask_index(grids[scale])] = true;
                }
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((slot, iou));
                }
            }
        }
        let (slot, iou) = best.expect("six anchors considered");
        match claims.iter_mut().find(|c| c.0 == slot) {
            Some(c) => {
                t.dropped += 1;
                if iou > c.1 {
                    *c = (slot, iou, i);
                }
            }
            None => claims.push((slot, iou, i)),
        }
    }
    for (slot, _, i) in claims {
        t.ignore[slot.scale][slot.mask_index(grids[slot.scale])] = false;
        t.positives.push(Positive { slot, gt: gt_boxes[i] });
    }
    Ok(t)
}
