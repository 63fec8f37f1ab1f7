use super::{distort, Distortion, GrayImage, Homography, Intrinsics, PixelPoint};
use crate::error::Result;

/// Inverse-warps `img` by `h` (source → output) into an `out_w × out_h`
/// frame with bilinear sampling; samples outside the source read 0.
pub fn warp_image(img: &GrayImage, h: &Homography, out_w: usize, out_h: usize) -> Result<GrayImage> {
    warp_image_with_fill(img, h, out_w, out_h, 0.0)
}

pub fn warp_image_with_fill(
    img: &GrayImage,
    h: &Homography,
    out_w: usize,
    out_h: usize,
    fill: f32,
) -> Result<GrayImage> {
    let inv = h.inverse()?;
    Ok(GrayImage::from_fn(out_w, out_h, |x, y| {
        inv.apply(PixelPoint::new(x as f64, y as f64))
            .ok()
            .and_then(|s| img.sample_bilinear(s.u, s.v))
            .unwrap_or(fill)
    }))
}

/// Marks the output pixels of [`warp_image`] whose source sample fell inside
/// the source image.
pub fn warp_valid_mask(
    src_w: usize,
    src_h: usize,
    h: &Homography,
    out_w: usize,
    out_h: usize,
) -> Result<Vec<bool>> {
    let inv = h.inverse()?;
    let probe = GrayImage::new(src_w, src_h);
    let mut mask = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        for x in 0..out_w {
            let ok = inv
                .apply(PixelPoint::new(x as f64, y as f64))
                .ok()
                .and_then(|s| probe.sample_bilinear(s.u, s.v))
                .is_some();
            mask.push(ok);
        }
    }
    Ok(mask)
}

/// Removes lens distortion: every output pixel is treated as an ideal pinhole
/// pixel, pushed through the forward distortion model and sampled from the
/// distorted input.
pub fn undistort_image(img: &GrayImage, k: &Intrinsics, d: &Distortion) -> Result<GrayImage> {
    k.validate()?;
    if d.is_zero() {
        return Ok(img.clone());
    }
    Ok(GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let n = k.to_normalized(PixelPoint::new(x as f64, y as f64));
        let s = k.to_pixel(distort(n, d));
        img.sample_bilinear(s.u, s.v).unwrap_or(0.0)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::undistort_point;

    fn smooth(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            let (x, y) = (x as f32, y as f32);
            0.5 + 0.25 * (x * 0.11).sin() * (y * 0.07).cos() + 0.2 * ((x + y) * 0.03).sin()
        })
    }

    #[test]
    fn identity_warp_is_identity() {
        let img = smooth(40, 30);
        let out = warp_image(&img, &Homography::identity(), 40, 30).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn integer_shift_is_exact() {
        let img = smooth(40, 30);
        let out = warp_image(&img, &Homography::translation(3.0, 0.0), 40, 30).unwrap();
        for y in 0..30 {
            for x in 0..40 {
                let expect = if x >= 3 { img.get(x - 3, y) } else { 0.0 };
                assert_eq!(out.get(x, y), expect, "({x}, {y})");
            }
        }
    }

    #[test]
    fn warp_round_trip_interior() {
        let img = smooth(80, 60);
        let h = Homography::from_row_major([1.02, 0.03, 2.5, -0.02, 0.99, 1.7, 1e-4, -8e-5, 1.0]).unwrap();
        let fwd = warp_image(&img, &h, 80, 60).unwrap();
        let back = warp_image(&fwd, &h.inverse().unwrap(), 80, 60).unwrap();
        let mut worst = 0.0f32;
        for y in 10..50 {
            for x in 10..70 {
                worst = worst.max((back.get(x, y) - img.get(x, y)).abs());
            }
        }
        assert!(worst < 0.02, "worst {worst}");
    }

    #[test]
    fn singular_homography_rejected() {
        use nalgebra::Matrix3;
        assert!(Homography::from_matrix(Matrix3::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn zero_distortion_undistort_is_identity() {
        let img = smooth(30, 20);
        let k = Intrinsics::new(50.0, 50.0, 15.0, 10.0).unwrap();
        assert_eq!(undistort_image(&img, &k, &Distortion::NONE).unwrap(), img);
    }

    /// Renders anti-aliased grid lines as they appear through a distorting
    /// lens, undistorts the image and checks that detected line centers are
    /// straight again.
    #[test]
    fn undistorted_grid_lines_are_straight() {
        let (w, h) = (200usize, 160usize);
        let k = Intrinsics::new(160.0, 160.0, 100.0, 80.0).unwrap();
        let d = Distortion { k1: -0.25, k2: 0.05, k3: 0.0, p1: 0.002, p2: -0.001 };
        let spacing = 25.0;
        let line_x: Vec<f64> = (1..8).map(|i| i as f64 * spacing).collect();
        let line_y: Vec<f64> = (1..6).map(|i| i as f64 * spacing + 5.0).collect();
        // Distorted render: each pixel is mapped back to its ideal position.
        let sub = 4;
        let rendered = GrayImage::from_fn(w, h, |x, y| {
            let mut ink = 0.0;
            for sy in 0..sub {
                for sx in 0..sub {
                    let px = x as f64 + (sx as f64 + 0.5) / sub as f64 - 0.5;
                    let py = y as f64 + (sy as f64 + 0.5) / sub as f64 - 0.5;
                    let n = undistort_point(k.to_normalized(PixelPoint::new(px, py)), &d).unwrap();
                    let ideal = k.to_pixel(n);
                    let near = line_x.iter().any(|lx| (ideal.u - lx).abs() < 1.0)
                        || line_y.iter().any(|ly| (ideal.v - ly).abs() < 1.0);
                    if near {
                        ink += 1.0;
                    }
                }
            }
            1.0 - ink / (sub * sub) as f32
        });
        let fixed = undistort_image(&rendered, &k, &d).unwrap();
        let mut worst = 0.0f64;
        // Vertical lines: per row, intensity-weighted column centroid.
        for lx in &line_x {
            let mut pts = Vec::new();
            for y in 20..h - 20 {
                let (mut s, mut sw) = (0.0, 0.0);
                for x in (*lx as usize - 4)..=(*lx as usize + 4) {
                    let ink = 1.0 - fixed.get(x, y) as f64;
                    s += ink * x as f64;
                    sw += ink;
                }
                if sw > 0.5 {
                    pts.push((y as f64, s / sw));
                }
            }
            worst = worst.max(max_line_residual(&pts));
        }
        for ly in &line_y {
            let mut pts = Vec::new();
            for x in 20..w - 20 {
                let (mut s, mut sw) = (0.0, 0.0);
                for y in (*ly as usize - 4)..=(*ly as usize + 4) {
                    let ink = 1.0 - fixed.get(x, y) as f64;
                    s += ink * y as f64;
                    sw += ink;
                }
                if sw > 0.5 {
                    pts.push((x as f64, s / sw));
                }
            }
            worst = worst.max(max_line_residual(&pts));
        }
        assert!(worst < 0.5, "max deviation from fitted line {worst} px");

        // The same check on the distorted render must fail, or the test
        // would be vacuous.
        let mut pts = Vec::new();
        let lx = line_x[0] as usize;
        for y in 20..h - 20 {
            let (mut s, mut sw) = (0.0, 0.0);
            for x in lx.saturating_sub(12)..=(lx + 12) {
                let ink = 1.0 - rendered.get(x, y) as f64;
                s += ink * x as f64;
                sw += ink;
            }
            if sw > 0.5 {
                pts.push((y as f64, s / sw));
            }
        }
        assert!(max_line_residual(&pts) > 1.0);
    }

    fn max_line_residual(pts: &[(f64, f64)]) -> f64 {
        let n = pts.len() as f64;
        let (mt, mv) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0 / n, b + p.1 / n));
        let cov: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - mv)).sum();
        let var: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
        let slope = cov / var;
        pts.iter()
            .map(|p| (p.1 - (mv + slope * (p.0 - mt))).abs())
            .fold(0.0, f64::max)
    }
}
