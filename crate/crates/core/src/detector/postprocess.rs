use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::model::DetectorModel;
use super::target::{decode_predictions, Detection};
use crate::boxes::iou;
use crate::error::{Error, Result};
use crate::geometry::GrayImage;
use crate::nn::{Float, Tensor};

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.45;
const LETTERBOX_FILL: f32 = 0.5;

/// Score descending, then center x, then center y.
fn order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.cx.total_cmp(&b.cx))
        .then(a.cy.total_cmp(&b.cy))
}

/// Greedy per-class suppression after a confidence cut.
pub fn nms(detections: &[Detection], conf_threshold: f64, iou_threshold: f64) -> Vec<Detection> {
    let mut cand: Vec<&Detection> = detections.iter().filter(|d| d.score >= conf_threshold).collect();
    cand.sort_by(|a, b| order(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for d in cand {
        let bb = d.bbox();
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || iou(&k.bbox(), &bb) <= iou_threshold)
        {
            kept.push(d.clone());
        }
    }
    kept
}

/// Aspect-preserving resize into the square network input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    pub scale_x: f64,
    pub scale_y: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub size: usize,
}

impl Letterbox {
    pub fn new(width: usize, height: usize, size: usize) -> Self {
        let s = (size as f64 / width as f64).min(size as f64 / height as f64);
        let nw = ((width as f64 * s).round() as usize).clamp(1, size);
        let nh = ((height as f64 * s).round() as usize).clamp(1, size);
        Self {
            scale_x: nw as f64 / width as f64,
            scale_y: nh as f64 / height as f64,
            pad_x: ((size - nw) / 2) as f64,
            pad_y: ((size - nh) / 2) as f64,
            size,
        }
    }

    fn inner(&self, width: usize, height: usize) -> (usize, usize) {
        (
            (width as f64 * self.scale_x).round() as usize,
            (height as f64 * self.scale_y).round() as usize,
        )
    }

    pub fn apply(&self, img: &GrayImage) -> GrayImage {
        let (nw, nh) = self.inner(img.width(), img.height());
        let resized = img.resize(nw, nh);
        let (px, py) = (self.pad_x as usize, self.pad_y as usize);
        GrayImage::from_fn(self.size, self.size, |x, y| {
            if x >= px && y >= py && x < px + nw && y < py + nh {
                resized.get(x - px, y - py)
            } else {
                LETTERBOX_FILL
            }
        })
    }

    /// Original-frame point → network-frame point.
    pub fn forward_point(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale_x + self.pad_x, y * self.scale_y + self.pad_y)
    }

    /// Network-frame point → original-frame point.
    pub fn inverse_point(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad_x) / self.scale_x, (y - self.pad_y) / self.scale_y)
    }

    pub fn inverse_detection(&self, d: &Detection) -> Detection {
        let (cx, cy) = self.inverse_point(d.cx, d.cy);
        Detection {
            cx,
            cy,
            w: d.w / self.scale_x,
            h: d.h / self.scale_y,
            ..d.clone()
        }
    }
}

pub fn image_tensor<T: Float>(img: &GrayImage) -> Tensor<T> {
    Tensor::from_fn([1, 1, img.height(), img.width()], |i| T::c(img.pixels()[i] as f64))
}

/// Letterbox, forward, decode and suppress one frame; boxes come back in
/// the original image's pixels.
pub fn infer_pair<T: Float>(
    model: &DetectorModel<T>,
    ir: &GrayImage,
    thermal: Option<&GrayImage>,
    conf_threshold: f64,
    iou_threshold: f64,
) -> Result<Vec<Detection>> {
    if let Some(t) = thermal {
        if t.dims() != ir.dims() {
            return Err(Error::Shape(format!(
                "IR is {}x{} but thermal is {}x{}",
                ir.width(),
                ir.height(),
                t.width(),
                t.height()
            )));
        }
    }
    let lb = Letterbox::new(ir.width(), ir.height(), model.config().input_size);
    let ir_t: Tensor<T> = image_tensor(&lb.apply(ir));
    let th_t: Option<Tensor<T>> = thermal.map(|t| image_tensor(&lb.apply(t)));
    let raw = model.infer(Some(&ir_t), th_t.as_ref())?;
    let dets = decode_predictions(&raw, model.config()).pop().unwrap_or_default();
    Ok(nms(&dets, conf_threshold, iou_threshold)
        .iter()
        .map(|d| lb.inverse_detection(d))
        .collect())
}

/// One line of the detection output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame: String,
    pub boxes: Vec<OutputBox>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl FrameDetections {
    pub fn new(frame: &str, dets: &[Detection]) -> Self {
        Self {
            frame: frame.to_string(),
            boxes: dets
                .iter()
                .map(|d| OutputBox {
                    cx: d.cx,
                    cy: d.cy,
                    w: d.w,
                    h: d.h,
                    score: d.score,
                })
                .collect(),
        }
    }
}

/// Draws box outlines onto a copy of the image.
pub fn draw_boxes(img: &GrayImage, dets: &[Detection], value: f32) -> GrayImage {
    let mut out = img.clone();
    let (w, h) = (img.width() as i64, img.height() as i64);
    for d in dets {
        let b = d.bbox();
        let (x0, y0) = (b.x_min.round() as i64, b.y_min.round() as i64);
        let (x1, y1) = (b.x_max.round() as i64, b.y_max.round() as i64);
        let mut put = |x: i64, y: i64| {
            if x >= 0 && y >= 0 && x < w && y < h {
                out.set(x as usize, y as usize, value);
            }
        };
        for x in x0..=x1 {
            put(x, y0);
            put(x, y1);
        }
        for y in y0..=y1 {
            put(x0, y);
            put(x1, y);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(cx: f64, cy: f64, w: f64, h: f64, score: f64) -> Detection {
        Detection {
            cx,
            cy,
            w,
            h,
            objectness: score,
            class_probs: vec![1.0],
            class_id: 0,
            score,
        }
    }

    #[test]
    fn nms_basics() {
        let a = det(10.0, 10.0, 5.0, 5.0, 0.9);
        assert_eq!(nms(std::slice::from_ref(&a), 0.25, 0.45), vec![a.clone()]);
        let b = det(10.0, 10.0, 5.0, 5.0, 0.8);
        assert_eq!(nms(&[b.clone(), a.clone()], 0.25, 0.45), vec![a.clone()]);
        assert!(nms(&[det(1.0, 1.0, 1.0, 1.0, 0.1)], 0.25, 0.45).is_empty());
    }

    /// Quadratic reference: a box survives iff no higher-ranked survivor
    /// overlaps it too much.
    fn reference(dets: &[Detection], conf: f64, thr: f64) -> Vec<Detection> {
        let mut sorted: Vec<Detection> = dets.iter().filter(|d| d.score >= conf).cloned().collect();
        sorted.sort_by(order);
        let mut alive = vec![true; sorted.len()];
        for i in 0..sorted.len() {
            if !alive[i] {
                continue;
            }
            for j in i + 1..sorted.len() {
                if iou(&sorted[i].bbox(), &sorted[j].bbox()) > thr {
                    alive[j] = false;
                }
            }
        }
        sorted.into_iter().zip(alive).filter(|p| p.1).map(|p| p.0).collect()
    }

    #[test]
    fn nms_matches_reference_and_ignores_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let mut dets: Vec<Detection> = (0..10)
                .map(|_| {
                    det(
                        rng.random_range(0.0..40.0),
                        rng.random_range(0.0..40.0),
                        rng.random_range(4.0..20.0),
                        rng.random_range(4.0..20.0),
                        rng.random_range(0.0..1.0),
                    )
                })
                .collect();
            let want = reference(&dets, 0.25, 0.45);
            assert_eq!(nms(&dets, 0.25, 0.45), want);
            dets.reverse();
            assert_eq!(nms(&dets, 0.25, 0.45), want);
        }
    }

    #[test]
    fn letterbox_round_trip() {
        let lb = Letterbox::new(200, 120, 128);
        assert_eq!((lb.pad_x, lb.pad_y), (0.0, 25.0));
        let d = det(37.0, 80.0, 20.0, 40.0, 0.9);
        let (nx, ny) = lb.forward_point(d.cx, d.cy);
        let net = Detection {
            cx: nx,
            cy: ny,
            w: d.w * lb.scale_x,
            h: d.h * lb.scale_y,
            ..d.clone()
        };
        let back = lb.inverse_detection(&net);
        assert!((back.cx - d.cx).abs() < 0.5 && (back.cy - d.cy).abs() < 0.5);
        assert!((back.w - d.w).abs() < 0.5 && (back.h - d.h).abs() < 0.5);
        let img = lb.apply(&GrayImage::filled(200, 120, 1.0));
        assert_eq!(img.get(5, 5), 0.5);
        assert_eq!(img.get(64, 64), 1.0);
    }
}
