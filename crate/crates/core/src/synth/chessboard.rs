use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::calibration::{planar_target_points, ChessboardSpec, CornerObservations};
use crate::error::{Error, Result};
use crate::geometry::{project, undistort_point, Distortion, GrayImage, Intrinsics, PixelPoint, Pose};

/// Board poses for calibration: the board center sits near the optical axis
/// at a depth drawn from `depth`, tilted up to about 30° about x and y and
/// rolled up to about 17°.
pub fn random_board_poses(spec: &ChessboardSpec, n: usize, depth: (f64, f64), seed: u64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = Vector3::new(
        (spec.inner_cols - 1) as f64 * spec.square_size / 2.0,
        (spec.inner_rows - 1) as f64 * spec.square_size / 2.0,
        0.0,
    );
    (0..n)
        .map(|_| {
            let aa = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.3..0.3),
            );
            let z = rng.random_range(depth.0..depth.1);
            let offset = Vector3::new(rng.random_range(-0.08..0.08) * z, rng.random_range(-0.06..0.06) * z, z);
            let mut pose = Pose::from_axis_angle(aa, Vector3::zeros());
            pose.translation = offset - pose.rotation * center;
            pose
        })
        .collect()
}

/// Projected inner corners for each pose, with optional isotropic Gaussian
/// noise of `sigma` pixels. Views are named `v0`, `v1`, ...
pub fn project_views(
    k: &Intrinsics,
    d: &Distortion,
    spec: &ChessboardSpec,
    poses: &[Pose],
    sigma: f64,
    seed: u64,
) -> Result<Vec<CornerObservations>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
    let world = planar_target_points(spec);
    poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let corners = world
                .iter()
                .map(|w| {
                    let p = project(w, pose, k, d)?;
                    Ok(if sigma > 0.0 {
                        PixelPoint::new(p.u + noise.sample(&mut rng), p.v + noise.sample(&mut rng))
                    } else {
                        p
                    })
                })
                .collect::<Result<_>>()?;
            Ok(CornerObservations {
                view_id: format!("v{i}"),
                corners,
            })
        })
        .collect()
}

/// Two rigidly mounted cameras looking at the same scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoRig {
    pub ir: (Intrinsics, Distortion),
    pub thermal: (Intrinsics, Distortion),
    /// Maps IR-camera coordinates to thermal-camera coordinates.
    pub thermal_from_ir: Pose,
    pub width: usize,
    pub height: usize,
}

impl StereoRig {
    /// 640×480 pair with a 40 mm baseline, slightly different lenses and a
    /// small relative rotation.
    pub fn example() -> Self {
        Self {
            ir: (
                Intrinsics::new(600.0, 610.0, 320.0, 240.0).expect("valid"),
                Distortion {
                    k1: -0.2,
                    k2: 0.05,
                    k3: 0.0,
                    p1: 0.001,
                    p2: -0.0005,
                },
            ),
            thermal: (
                Intrinsics::new(560.0, 565.0, 326.0, 236.0).expect("valid"),
                Distortion {
                    k1: -0.15,
                    k2: 0.03,
                    k3: 0.0,
                    p1: -0.0008,
                    p2: 0.0004,
                },
            ),
            thermal_from_ir: Pose::from_axis_angle(Vector3::new(0.01, -0.02, 0.005), Vector3::new(-40.0, 2.0, 1.0)),
            width: 640,
            height: 480,
        }
    }

    /// Board pose as seen from the thermal camera.
    pub fn thermal_pose(&self, ir_pose: &Pose) -> Pose {
        let r = &self.thermal_from_ir;
        Pose {
            rotation: r.rotation * ir_pose.rotation,
            translation: r.rotation * ir_pose.translation + r.translation,
        }
    }

    /// Corner observations of the same board poses (given in the IR frame)
    /// in both cameras.
    pub fn views(
        &self,
        spec: &ChessboardSpec,
        ir_poses: &[Pose],
        sigma: f64,
        seed: u64,
    ) -> Result<(Vec<CornerObservations>, Vec<CornerObservations>)> {
        let th_poses: Vec<Pose> = ir_poses.iter().map(|p| self.thermal_pose(p)).collect();
        Ok((
            project_views(&self.ir.0, &self.ir.1, spec, ir_poses, sigma, seed)?,
            project_views(&self.thermal.0, &self.thermal.1, spec, &th_poses, sigma, seed ^ 0x7E57)?,
        ))
    }
}

/// Samples per pixel side for anti-aliasing.
const SUPERSAMPLE: usize = 3;
const BACKGROUND: f32 = 0.5;

/// Board brightness seen along the camera ray through a distorted pixel, or
/// `None` off the board.
fn board_value(px: f64, py: f64, k: &Intrinsics, d: &Distortion, pose: &Pose, spec: &ChessboardSpec) -> Option<f32> {
    let n = undistort_point(k.to_normalized(PixelPoint::new(px, py)), d).ok()?;
    let ray = Vector3::new(n.x, n.y, 1.0);
    // R·(X, Y, 0) + t = λ·ray
    let m = Matrix3::from_columns(&[pose.rotation.column(0).into(), pose.rotation.column(1).into(), -ray]);
    let sol = m.lu().solve(&-pose.translation)?;
    if sol[2] <= 0.0 {
        return None;
    }
    let (i, j) = ((sol[0] / spec.square_size).floor(), (sol[1] / spec.square_size).floor());
    let (cols, rows) = (spec.inner_cols as f64, spec.inner_rows as f64);
    if i < -1.0 || j < -1.0 || i > cols - 1.0 || j > rows - 1.0 {
        return None;
    }
    Some(if (i + j).rem_euclid(2.0) == 0.0 { 0.0 } else { 1.0 })
}

/// Renders a chessboard view through the full camera model (pose, pinhole,
/// lens distortion) and returns it with the exactly projected inner corners.
/// The board has one square of margin beyond the inner-corner grid.
pub fn render_chessboard(
    k: &Intrinsics,
    d: &Distortion,
    pose: &Pose,
    spec: &ChessboardSpec,
    width: usize,
    height: usize,
    view_id: &str,
) -> Result<(GrayImage, CornerObservations)> {
    spec.validate()?;
    k.validate()?;
    let corners: Vec<PixelPoint> = planar_target_points(spec)
        .iter()
        .map(|w| project(w, pose, k, d))
        .collect::<Result<_>>()?;
    let visible = corners
        .iter()
        .any(|c| c.u >= 0.0 && c.v >= 0.0 && c.u <= (width - 1) as f64 && c.v <= (height - 1) as f64);
    if !visible {
        return Err(Error::Invalid(format!("board is entirely out of view in {view_id}")));
    }
    let step = 1.0 / SUPERSAMPLE as f64;
    let img = GrayImage::from_fn(width, height, |x, y| {
        let mut sum = 0.0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let px = x as f64 - 0.5 + (sx as f64 + 0.5) * step;
                let py = y as f64 - 0.5 + (sy as f64 + 0.5) * step;
                sum += board_value(px, py, k, d, pose, spec).unwrap_or(BACKGROUND);
            }
        }
        sum / (SUPERSAMPLE * SUPERSAMPLE) as f32
    });
    Ok((
        img,
        CornerObservations {
            view_id: view_id.to_string(),
            corners,
        },
    ))
}
