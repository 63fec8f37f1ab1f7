use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use super::{distort, Distortion, NormalizedPoint, PixelPoint, WorldPoint};
use crate::error::{Error, Result};

/// Pinhole intrinsics with zero skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 || self.cx < 0.0 || self.cy < 0.0 {
            return Err(Error::Invalid(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn to_pixel(&self, p: NormalizedPoint) -> PixelPoint {
        PixelPoint::new(self.fx * p.x + self.cx, self.fy * p.y + self.cy)
    }

    pub fn to_normalized(&self, p: PixelPoint) -> NormalizedPoint {
        NormalizedPoint::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy)
    }
}

/// Rigid transform from the world frame to the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from an axis-angle vector (radians) and a translation.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::from_scaled_axis(axis_angle).into_inner(),
            translation,
        }
    }

    pub fn axis_angle(&self) -> Vector3<f64> {
        Rotation3::from_matrix_unchecked(self.rotation).scaled_axis()
    }

    pub fn transform(&self, w: &WorldPoint) -> Vector3<f64> {
        self.rotation * Vector3::new(w.x, w.y, w.z) + self.translation
    }

    /// Largest deviation of `RᵀR` from the identity and of `det R` from one.
    pub fn rotation_error(&self) -> f64 {
        let orth = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        orth.max((self.rotation.determinant() - 1.0).abs())
    }
}

/// Projects a world point through the pose, the lens distortion and the
/// intrinsics.
pub fn project(w: &WorldPoint, pose: &Pose, k: &Intrinsics, d: &Distortion) -> Result<PixelPoint> {
    let pc = pose.transform(w);
    if pc.z <= 0.0 {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    let n = NormalizedPoint::new(pc.x / pc.z, pc.y / pc.z);
    Ok(k.to_pixel(distort(n, d)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k600() -> Intrinsics {
        Intrinsics::new(600.0, 600.0, 320.0, 240.0).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let k = k600();
        for z in [1.0, 10.0, 1000.0, 1e6] {
            let p = project(&WorldPoint::new(0.0, 0.0, z), &Pose::identity(), &k, &Distortion::NONE).unwrap();
            assert_eq!(p, PixelPoint::new(320.0, 240.0));
        }
    }

    #[test]
    fn off_axis_point() {
        let p = project(
            &WorldPoint::new(100.0, 0.0, 1000.0),
            &Pose::identity(),
            &k600(),
            &Distortion::NONE,
        )
        .unwrap();
        assert!((p.u - 380.0).abs() < 1e-12);
        assert!((p.v - 240.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let err = project(&WorldPoint::new(0.0, 0.0, -1.0), &Pose::identity(), &k600(), &Distortion::NONE);
        assert!(matches!(err, Err(Error::BehindCamera { .. })));
    }

    /// Independent projector: homogeneous K·[R|t] product followed by the
    /// distortion polynomial written out in expanded form.
    fn reference_project(w: [f64; 3], aa: [f64; 3], t: [f64; 3], k: [f64; 4], d: [f64; 5]) -> (f64, f64) {
        let theta = (aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2]).sqrt();
        let (ax, ay, az) = (aa[0] / theta, aa[1] / theta, aa[2] / theta);
        let (c, s) = (theta.cos(), theta.sin());
        let cc = 1.0 - c;
        // Rodrigues, row by row.
        let r = [
            [c + ax * ax * cc, ax * ay * cc - az * s, ax * az * cc + ay * s],
            [ay * ax * cc + az * s, c + ay * ay * cc, ay * az * cc - ax * s],
            [az * ax * cc - ay * s, az * ay * cc + ax * s, c + az * az * cc],
        ];
        let mut pc = [0.0; 3];
        for i in 0..3 {
            pc[i] = r[i][0] * w[0] + r[i][1] * w[1] + r[i][2] * w[2] + t[i];
        }
        let (x, y) = (pc[0] / pc[2], pc[1] / pc[2]);
        let r2 = x * x + y * y;
        let r4 = r2 * r2;
        let r6 = r4 * r2;
        let [k1, k2, k3, p1, p2] = d;
        let xd = x + x * k1 * r2 + x * k2 * r4 + x * k3 * r6 + 2.0 * p1 * x * y + p2 * r2 + 2.0 * p2 * x * x;
        let yd = y + y * k1 * r2 + y * k2 * r4 + y * k3 * r6 + p1 * r2 + 2.0 * p1 * y * y + 2.0 * p2 * x * y;
        (k[0] * xd + k[2], k[1] * yd + k[3])
    }

    #[test]
    fn matches_reference_projector() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let w = [rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0), rng.random_range(-50.0..50.0)];
            let aa = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let t = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(600.0..1200.0)];
            let k = [rng.random_range(400.0..900.0), rng.random_range(400.0..900.0), rng.random_range(200.0..400.0), rng.random_range(150.0..300.0)];
            let d = [
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
            ];
            let pose = Pose::from_axis_angle(Vector3::from(aa), Vector3::from(t));
            let intr = Intrinsics::new(k[0], k[1], k[2], k[3]).unwrap();
            let dist = Distortion { k1: d[0], k2: d[1], k3: d[2], p1: d[3], p2: d[4] };
            let p = project(&WorldPoint::new(w[0], w[1], w[2]), &pose, &intr, &dist).unwrap();
            let (u, v) = reference_project(w, aa, t, k, d);
            assert!((p.u - u).abs() < 1e-9 && (p.v - v).abs() < 1e-9, "{p:?} vs ({u}, {v})");
        }
    }
}
