//! Planar chessboard calibration.
//!
//! [`calibrate`] chains the closed-form steps (per-view homographies,
//! intrinsics from the image of the absolute conic, per-view poses) with a
//! two-pass Levenberg–Marquardt refinement of every parameter.

mod io;
mod refine;
mod zhang;

pub use io::{read_corner_csv, write_corner_csv};
pub use refine::{refine_calibration, RefineOptions};
pub use zhang::{init_extrinsics, init_intrinsics_zhang};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    estimate_homography, project, Distortion, Homography, Intrinsics, PixelPoint, Pose, WorldPoint,
};

/// Inner-corner layout of a chessboard target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChessboardSpec {
    pub inner_rows: usize,
    pub inner_cols: usize,
    /// Square edge, millimeters.
    pub square_size: f64,
}

impl ChessboardSpec {
    pub fn new(inner_rows: usize, inner_cols: usize, square_size: f64) -> Result<Self> {
        let spec = Self {
            inner_rows,
            inner_cols,
            square_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_rows < 2 || self.inner_cols < 2 || !(self.square_size > 0.0) {
            return Err(Error::Invalid(format!("invalid chessboard {self:?}")));
        }
        Ok(())
    }

    pub fn corner_count(&self) -> usize {
        self.inner_rows * self.inner_cols
    }

    /// Row-major index of inner corner `(row, col)`.
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.inner_cols + col
    }
}

/// Detected (or rendered) inner corners of one view, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerObservations {
    pub view_id: String,
    pub corners: Vec<PixelPoint>,
}

/// Estimated camera model plus one pose per calibration view.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub intrinsics: Intrinsics,
    pub distortion: Distortion,
    pub poses: Vec<Pose>,
    pub rms_reprojection: f64,
}

/// Board-frame corner positions: `x = col·s`, `y = row·s`, `z = 0`.
pub fn planar_target_points(spec: &ChessboardSpec) -> Vec<WorldPoint> {
    (0..spec.inner_rows)
        .flat_map(|r| {
            (0..spec.inner_cols).map(move |c| {
                WorldPoint::new(c as f64 * spec.square_size, r as f64 * spec.square_size, 0.0)
            })
        })
        .collect()
}

/// Root mean squared corner distance (pixels) between the model and the
/// observations.
pub fn reprojection_rms(
    result: &CalibrationResult,
    observations: &[CornerObservations],
    spec: &ChessboardSpec,
) -> Result<f64> {
    if result.poses.len() != observations.len() {
        return Err(Error::Shape(format!(
            "{} poses for {} views",
            result.poses.len(),
            observations.len()
        )));
    }
    let world = planar_target_points(spec);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pose, obs) in result.poses.iter().zip(observations) {
        for e in per_view_errors(result, pose, obs, &world)? {
            sum += e * e;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { (sum / count as f64).sqrt() })
}

/// Per-view RMS reprojection error, in view order.
pub fn per_view_rms(
    result: &CalibrationResult,
    observations: &[CornerObservations],
    spec: &ChessboardSpec,
) -> Result<Vec<f64>> {
    let world = planar_target_points(spec);
    result
        .poses
        .iter()
        .zip(observations)
        .map(|(pose, obs)| {
            let errs = per_view_errors(result, pose, obs, &world)?;
            Ok((errs.iter().map(|e| e * e).sum::<f64>() / errs.len().max(1) as f64).sqrt())
        })
        .collect()
}

fn per_view_errors(
    result: &CalibrationResult,
    pose: &Pose,
    obs: &CornerObservations,
    world: &[WorldPoint],
) -> Result<Vec<f64>> {
    if obs.corners.len() != world.len() {
        return Err(Error::in_view(
            &obs.view_id,
            Error::Shape(format!("{} corners, board has {}", obs.corners.len(), world.len())),
        ));
    }
    world
        .iter()
        .zip(&obs.corners)
        .map(|(w, o)| {
            project(w, pose, &result.intrinsics, &result.distortion)
                .map(|p| p.distance(o))
                .map_err(|e| Error::in_view(&obs.view_id, e))
        })
        .collect()
}

/// Options for [`calibrate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrateOptions {
    pub refine: RefineOptions,
    /// Release `k3` in a second refinement pass (it is held at 0 in the first).
    pub release_k3: bool,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        Self {
            refine: RefineOptions::default(),
            release_k3: true,
        }
    }
}

fn validate_observations(observations: &[CornerObservations], spec: &ChessboardSpec) -> Result<()> {
    spec.validate()?;
    for obs in observations {
        if obs.corners.len() != spec.corner_count() {
            return Err(Error::in_view(
                &obs.view_id,
                Error::Shape(format!(
                    "{} corners, expected {}x{} = {}",
                    obs.corners.len(),
                    spec.inner_rows,
                    spec.inner_cols,
                    spec.corner_count()
                )),
            ));
        }
        if obs.corners.iter().any(|p| !p.u.is_finite() || !p.v.is_finite()) {
            return Err(Error::in_view(&obs.view_id, Error::Invalid("non-finite corner".into())));
        }
    }
    for (i, a) in observations.iter().enumerate() {
        for b in &observations[i + 1..] {
            if a.corners == b.corners {
                return Err(Error::DegenerateViews(format!(
                    "views {} and {} have identical corners",
                    a.view_id, b.view_id
                )));
            }
        }
    }
    if observations.len() < 3 {
        return Err(Error::Arity {
            what: "views",
            required: 3,
            got: observations.len(),
        });
    }
    Ok(())
}

/// Full calibration: homographies → intrinsics → poses → refinement.
pub fn calibrate(
    observations: &[CornerObservations],
    spec: &ChessboardSpec,
    options: &CalibrateOptions,
) -> Result<CalibrationResult> {
    validate_observations(observations, spec)?;
    let world = planar_target_points(spec);
    let homographies = observations
        .iter()
        .map(|obs| {
            let pairs: Vec<_> = world
                .iter()
                .zip(&obs.corners)
                .map(|(w, p)| (PixelPoint::new(w.x, w.y), *p))
                .collect();
            estimate_homography(&pairs).map_err(|e| Error::in_view(&obs.view_id, e))
        })
        .collect::<Result<Vec<Homography>>>()?;
    let intrinsics = init_intrinsics_zhang(&homographies)?;
    let poses = homographies
        .iter()
        .zip(observations)
        .map(|(h, obs)| init_extrinsics(h, &intrinsics).map_err(|e| Error::in_view(&obs.view_id, e)))
        .collect::<Result<Vec<_>>>()?;
    let mut result = CalibrationResult {
        intrinsics,
        distortion: Distortion::NONE,
        poses,
        rms_reprojection: 0.0,
    };
    result.rms_reprojection = reprojection_rms(&result, observations, spec)?;

    let first = RefineOptions {
        freeze_k3: true,
        ..options.refine
    };
    result = refine_calibration(&result, observations, spec, &first)?;
    if options.release_k3 {
        let second = RefineOptions {
            freeze_k3: false,
            ..options.refine
        };
        result = refine_calibration(&result, observations, spec, &second)?;
    }
    Ok(result)
}
