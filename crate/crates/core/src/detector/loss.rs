use serde::{Deserialize, Serialize};

use super::config::{LocLoss, ModelConfig};
use super::jet::Jet;
use super::model::RawPrediction;
use super::target::{Slot, Targets, MAX_LOG_SCALE};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Float, Tensor};

/// Loss value and its weighted-sum components, all divided by batch size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub loc: f64,
    pub obj: f64,
    pub cls: f64,
}

fn box_jets(b: [Jet; 4]) -> (Jet, Jet, Jet, Jet) {
    let [cx, cy, w, h] = b;
    let (hw, hh) = (w * 0.5, h * 0.5);
    (cx - hw, cy - hh, cx + hw, cy + hh)
}

/// IoU and CIoU of two center-form boxes, differentiated along whatever
/// variables the jets carry.
pub fn iou_ciou_jet(a: [Jet; 4], b: [Jet; 4]) -> (Jet, Jet) {
    let zero = Jet::constant(0.0);
    let (ax1, ay1, ax2, ay2) = box_jets(a);
    let (bx1, by1, bx2, by2) = box_jets(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(zero);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(zero);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let iou = inter / union;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let c2 = cw.square() + ch.square();
    let rho2 = (a[0] - b[0]).square() + (a[1] - b[1]).square();
    let k = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
    let v = ((b[2] / b[3]).atan() - (a[2] / a[3]).atan()).square() * k;
    let alpha = if v.v == 0.0 { zero } else { v / (-iou + 1.0 + v) };
    let ciou = iou - rho2 / c2 - alpha * v;
    (iou, ciou)
}

/// Complete IoU: IoU minus the normalized center distance minus the
/// weighted aspect-ratio mismatch. Equals 1 only for identical boxes.
pub fn ciou(a: &BBox, b: &BBox) -> f64 {
    let j = |b: &BBox| {
        let (cx, cy) = b.center();
        [cx, cy, b.width(), b.height()].map(Jet::constant)
    };
    iou_ciou_jet(j(a), j(b)).1.v
}

/// Binary cross-entropy on a logit, and its derivative.
pub fn bce_with_logits(z: f64, y: f64) -> (f64, f64) {
    let l = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    (l, sigmoid(z) - y)
}

/// Localization loss and its gradient with respect to `(t_x, t_y, t_w, t_h)`.
pub fn loc_loss(t: [f64; 4], slot: &Slot, gt: [f64; 4], config: &ModelConfig) -> (f64, [f64; 4]) {
    let stride = config.strides()[slot.scale] as f64;
    let [aw, ah] = config.anchors[slot.scale][slot.anchor];
    let scale = |i: usize, a: f64| {
        if t[i] > MAX_LOG_SCALE {
            Jet::constant(a * MAX_LOG_SCALE.exp())
        } else {
            Jet::var(t[i], i).exp() * a
        }
    };
    let pred = [
        (Jet::var(t[0], 0).sigmoid() + slot.gx as f64) * stride,
        (Jet::var(t[1], 1).sigmoid() + slot.gy as f64) * stride,
        scale(2, aw),
        scale(3, ah),
    ];
    let (iou, ciou) = iou_ciou_jet(pred, gt.map(Jet::constant));
    let l = match config.loc_loss {
        LocLoss::Ciou => -ciou + 1.0,
        LocLoss::Iou => -iou + 1.0,
    };
    (l.v, l.d)
}

/// Loss over a batch and its gradient with respect to the raw outputs.
pub fn detection_loss<T: Float>(
    raw: &RawPrediction<T>,
    targets: &[Targets],
    config: &ModelConfig,
) -> Result<(LossBreakdown, RawPrediction<T>)> {
    let n = raw.scales[0].n();
    let grids = config.grids();
    let hc = config.head_channels();
    for (s, t) in raw.scales.iter().enumerate() {
        if t.shape() != [n, hc, grids[s], grids[s]] {
            return Err(Error::Shape(format!(
                "head output {:?}, expected {:?}",
                t.shape(),
                [n, hc, grids[s], grids[s]]
            )));
        }
    }
    if targets.len() != n {
        return Err(Error::Shape(format!("{} target sets for a batch of {n}", targets.len())));
    }
    let per = config.outputs_per_anchor();
    let w = config.loss_weights;
    let inv_n = 1.0 / n as f64;
    let mut grad = RawPrediction {
        scales: [
            Tensor::zeros(raw.scales[0].shape()),
            Tensor::zeros(raw.scales[1].shape()),
        ],
    };
    let (mut loc, mut obj, mut cls) = (0.0, 0.0, 0.0);
    for (b, tg) in targets.iter().enumerate() {
        let positive = tg.positive_mask(config);
        // Objectness over every slot that is neither positive nor ignored.
        for s in 0..2 {
            let g = grids[s];
            let (out, dst) = (&raw.scales[s], &mut grad.scales[s]);
            for a in 0..3 {
                for gy in 0..g {
                    for gx in 0..g {
                        let m = (a * g + gy) * g + gx;
                        if positive[s][m] || tg.ignore[s][m] {
                            continue;
                        }
                        let o = out.offset(b, a * per + 4, gy, gx);
                        let (l, d) = bce_with_logits(out.data()[o].f64(), 0.0);
                        obj += l;
                        dst.data_mut()[o] += T::c(w.obj * d * inv_n);
                    }
                }
            }
        }
        for p in &tg.positives {
            let s = p.slot.scale;
            let (out, dst) = (&raw.scales[s], &mut grad.scales[s]);
            let off = |j: usize| out.offset(b, p.slot.anchor * per + j, p.slot.gy, p.slot.gx);
            let t = [0, 1, 2, 3].map(|j| out.data()[off(j)].f64());
            let (l, d) = loc_loss(t, &p.slot, [p.gt.cx, p.gt.cy, p.gt.w, p.gt.h], config);
            loc += l;
            for j in 0..4 {
                dst.data_mut()[off(j)] += T::c(w.loc * d[j] * inv_n);
            }
            let (l, d) = bce_with_logits(out.data()[off(4)].f64(), 1.0);
            obj += l;
            dst.data_mut()[off(4)] += T::c(w.obj * d * inv_n);
            for c in 0..config.num_classes {
                let y = if c == p.gt.class_id { 1.0 } else { 0.0 };
                let (l, d) = bce_with_logits(out.data()[off(5 + c)].f64(), y);
                cls += l;
                dst.data_mut()[off(5 + c)] += T::c(w.cls * d * inv_n);
            }
        }
    }
    let (loc, obj, cls) = (loc * inv_n, obj * inv_n, cls * inv_n);
    Ok((
        LossBreakdown {
            total: w.loc * loc + w.obj * obj + w.cls * cls,
            loc,
            obj,
            cls,
        },
        grad,
    ))
}
