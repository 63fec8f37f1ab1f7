//! Thermal-to-IR registration, common-frame cropping and label transfer.

mod dataset;

pub use dataset::{
    format_labels, list_frames, parse_labels, read_frame, write_frame, DatasetPaths,
};

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GroundTruthBox};
use crate::calibration::{ChessboardSpec, CornerObservations};
use crate::error::{Error, Result};
use crate::geometry::{estimate_homography, warp_image, warp_valid_mask, GrayImage, Homography, PixelPoint};

/// Default fraction of a box's area that must survive clipping.
pub const MIN_KEPT_AREA: f64 = 0.2;

/// Matched points, IR side first.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(PixelPoint, PixelPoint)>,
}

impl CorrespondenceSet {
    /// Homography mapping thermal pixels onto IR pixels, fitted to every pair.
    pub fn thermal_to_ir(&self) -> Result<Homography> {
        let swapped: Vec<_> = self.pairs.iter().map(|&(ir, th)| (th, ir)).collect();
        estimate_homography(&swapped)
    }
}

/// Axis-aligned pixel rectangle in the IR frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl CropRect {
    pub fn full(width: usize, height: usize) -> Self {
        Self { x: 0, y: 0, width, height }
    }
}

/// IR frame and registered thermal frame cut to the same rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub ir: GrayImage,
    pub thermal_warped: GrayImage,
    pub crop: CropRect,
}

/// An aligned pair with the one label set both modalities share.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub pair: AlignedPair,
    pub boxes: Vec<GroundTruthBox>,
}

/// Pairs the four extreme inner corners of simultaneously captured views, in
/// the order top-left, top-right, bottom-left, bottom-right.
pub fn outer_corner_correspondences(
    ir_corners: &CornerObservations,
    thermal_corners: &CornerObservations,
    spec: &ChessboardSpec,
) -> Result<CorrespondenceSet> {
    spec.validate()?;
    let n = spec.corner_count();
    for (name, obs) in [("IR", ir_corners), ("thermal", thermal_corners)] {
        if obs.corners.len() != n {
            return Err(Error::Invalid(format!(
                "{name} view {:?} has {} corners, board has {n}",
                obs.view_id,
                obs.corners.len()
            )));
        }
    }
    let (r, c) = (spec.inner_rows - 1, spec.inner_cols - 1);
    let pairs = [(0, 0), (0, c), (r, 0), (r, c)]
        .iter()
        .map(|&(i, j)| {
            let k = spec.index(i, j);
            (ir_corners.corners[k], thermal_corners.corners[k])
        })
        .collect();
    Ok(CorrespondenceSet { pairs })
}

/// Warps the thermal image into the IR frame; `h` maps thermal → IR.
pub fn align_thermal_to_ir(thermal: &GrayImage, h: &Homography, ir_size: (usize, usize)) -> Result<GrayImage> {
    warp_image(thermal, h, ir_size.0, ir_size.1)
}

/// Largest axis-aligned rectangle fully inside the valid region whose center
/// sits on the region's centroid (rounded to the pixel grid). Both images are
/// cut to it.
pub fn crop_common(ir: &GrayImage, thermal_warped: &GrayImage, valid_mask: &[bool]) -> Result<AlignedPair> {
    let (w, h) = ir.dims();
    if thermal_warped.dims() != (w, h) || valid_mask.len() != w * h {
        return Err(Error::Shape(format!(
            "IR {w}x{h}, warped thermal {}x{}, mask of {} pixels",
            thermal_warped.width(),
            thermal_warped.height(),
            valid_mask.len()
        )));
    }
    let crop = largest_centered_rect(valid_mask, w, h).ok_or(Error::NoOverlap)?;
    Ok(AlignedPair {
        ir: ir.crop(crop.x, crop.y, crop.width, crop.height)?,
        thermal_warped: thermal_warped.crop(crop.x, crop.y, crop.width, crop.height)?,
        crop,
    })
}

/// Warp, mask and crop in one step.
pub fn align_pair(ir: &GrayImage, thermal: &GrayImage, h: &Homography) -> Result<AlignedPair> {
    let warped = align_thermal_to_ir(thermal, h, ir.dims())?;
    let mask = warp_valid_mask(thermal.width(), thermal.height(), h, ir.width(), ir.height())?;
    crop_common(ir, &warped, &mask)
}

fn largest_centered_rect(mask: &[bool], w: usize, h: usize) -> Option<CropRect> {
    // Integral image of invalid pixels.
    let mut bad = vec![0u32; (w + 1) * (h + 1)];
    let (mut sx, mut sy, mut count) = (0.0f64, 0.0f64, 0usize);
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            let ok = mask[y * w + x];
            if ok {
                sx += x as f64;
                sy += y as f64;
                count += 1;
            } else {
                row += 1;
            }
            bad[(y + 1) * (w + 1) + x + 1] = bad[y * (w + 1) + x + 1] + row;
        }
    }
    if count == 0 {
        return None;
    }
    let (cx, cy) = (sx / count as f64, sy / count as f64);
    let bad_in = |x0: usize, y0: usize, rw: usize, rh: usize| {
        let (x1, y1) = (x0 + rw, y0 + rh);
        bad[y1 * (w + 1) + x1] + bad[y0 * (w + 1) + x0] - bad[y0 * (w + 1) + x1] - bad[y1 * (w + 1) + x0]
    };
    let origin = |c: f64, len: usize, limit: usize| -> Option<usize> {
        let o = (c - (len as f64 - 1.0) / 2.0).round();
        (o >= 0.0 && o as usize + len <= limit).then_some(o as usize)
    };
    let mut best: Option<CropRect> = None;
    for rw in (1..=w).rev() {
        let Some(x0) = origin(cx, rw, w) else { continue };
        if let Some(b) = best {
            if rw * h <= b.width * b.height {
                break;
            }
        }
        for rh in (1..=h).rev() {
            if let Some(b) = best {
                if rw * rh <= b.width * b.height {
                    break;
                }
            }
            let Some(y0) = origin(cy, rh, h) else { continue };
            if bad_in(x0, y0, rw, rh) == 0 {
                best = Some(CropRect { x: x0, y: y0, width: rw, height: rh });
                break;
            }
        }
    }
    best
}

/// Moves boxes from the original IR frame into the crop, clips them to it,
/// and drops those keeping less than `min_area_fraction` of their area.
pub fn propagate_labels(boxes: &[BBox], crop: &CropRect, min_area_fraction: f64) -> Vec<BBox> {
    let frame = BBox::from_xywh(0.0, 0.0, crop.width as f64, crop.height as f64);
    boxes
        .iter()
        .filter_map(|b| {
            let moved = b.translate(-(crop.x as f64), -(crop.y as f64));
            let clipped = moved.intersection(&frame)?;
            (clipped.area() >= min_area_fraction * b.area()).then_some(clipped)
        })
        .collect()
}
