//! Projective geometry: the pinhole camera model, lens distortion,
//! homographies and grayscale image resampling.

mod camera;
mod distortion;
mod homography;
mod image;
mod warp;

pub use camera::{project, Intrinsics, Pose};
pub use distortion::{distort, undistort_point, Distortion};
pub(crate) use distortion::jacobian as distortion_jacobian;
pub use homography::{apply_homography, estimate_homography, Homography};
pub use image::GrayImage;
pub use warp::{undistort_image, warp_image, warp_image_with_fill, warp_valid_mask};

use serde::{Deserialize, Serialize};

/// A position in an image, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// A point on the camera plane at unit depth.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NormalizedPoint {
    pub x: f64,
    pub y: f64,
}

impl NormalizedPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// A point in the world (board) frame, in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }
}
