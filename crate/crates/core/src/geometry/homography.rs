use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::PixelPoint;
use crate::error::{Error, Result};

const INFINITY_EPS: f64 = 1e-12;

/// A planar projective map stored in canonical form: unit Frobenius norm,
/// `h33 ≥ 0` (or, when `h33 = 0`, the first nonzero entry positive).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    h: Matrix3<f64>,
}

impl Homography {
    /// Normalizes `m` into canonical form. Fails when `m` is singular.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let norm = m.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::SingularHomography);
        }
        let mut h = m / norm;
        if h.determinant().abs() < 1e-14 {
            return Err(Error::SingularHomography);
        }
        // Row-major scan for the sign anchor.
        let anchor = if h[(2, 2)] != 0.0 {
            h[(2, 2)]
        } else {
            (0..9)
                .map(|i| h[(i / 3, i % 3)])
                .find(|v| *v != 0.0)
                .unwrap_or(1.0)
        };
        if anchor < 0.0 {
            h = -h;
        }
        Ok(Self { h })
    }

    pub fn identity() -> Self {
        Self::from_matrix(Matrix3::identity()).unwrap()
    }

    pub fn translation(du: f64, dv: f64) -> Self {
        Self::from_matrix(Matrix3::new(1.0, 0.0, du, 0.0, 1.0, dv, 0.0, 0.0, 1.0)).unwrap()
    }

    /// Builds a canonical homography from nine row-major entries.
    pub fn from_row_major(v: [f64; 9]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_row_slice(&v))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.h
    }

    pub fn row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.h[(i / 3, i % 3)];
        }
        out
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.h.try_inverse().ok_or(Error::SingularHomography)?;
        Self::from_matrix(inv)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_matrix(self.h * other.h)
    }

    /// Frobenius distance between canonical forms.
    pub fn distance(&self, other: &Homography) -> f64 {
        (self.h - other.h).norm()
    }

    pub fn apply(&self, p: PixelPoint) -> Result<PixelPoint> {
        apply_homography(self, p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse().map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                location: path.display().to_string(),
                message,
            },
            other => other,
        })
    }
}

/// Nine whitespace-separated entries, row-major, one row per line.
impl fmt::Display for Homography {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..3 {
            writeln!(
                f,
                "{:.17e} {:.17e} {:.17e}",
                self.h[(r, 0)],
                self.h[(r, 1)],
                self.h[(r, 2)]
            )?;
        }
        Ok(())
    }
}

impl FromStr for Homography {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            location: "homography".into(),
            message,
        };
        let vals = s
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| parse_err(format!("{t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let arr: [f64; 9] = vals
            .try_into()
            .map_err(|v: Vec<f64>| parse_err(format!("expected 9 numbers, found {}", v.len())))?;
        let canonical = Self::from_row_major(arr)?;
        // Keep the file's digits verbatim when they already are canonical so
        // that save/load is bit-exact.
        let raw = Matrix3::from_row_slice(&arr);
        if (raw - canonical.h).abs().max() < 1e-12 {
            Ok(Self { h: raw })
        } else {
            Ok(canonical)
        }
    }
}

/// Maps `p` through `h` with the perspective divide.
pub fn apply_homography(h: &Homography, p: PixelPoint) -> Result<PixelPoint> {
    let m = &h.h;
    let w = m[(2, 0)] * p.u + m[(2, 1)] * p.v + m[(2, 2)];
    if w.abs() < INFINITY_EPS {
        return Err(Error::PointAtInfinity {
            x: p.u,
            y: p.v,
            denominator: w,
        });
    }
    Ok(PixelPoint::new(
        (m[(0, 0)] * p.u + m[(0, 1)] * p.v + m[(0, 2)]) / w,
        (m[(1, 0)] * p.u + m[(1, 1)] * p.v + m[(1, 2)]) / w,
    ))
}

/// Similarity that moves the centroid to the origin and scales the mean
/// distance to √2.
fn hartley_normalization(points: &[PixelPoint]) -> Result<Matrix3<f64>> {
    let n = points.len() as f64;
    let (mu, mv) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.u / n, b + p.v / n));
    let mean_dist = points
        .iter()
        .map(|p| (p.u - mu).hypot(p.v - mv))
        .sum::<f64>()
        / n;
    if !(mean_dist > 0.0) || !mean_dist.is_finite() {
        return Err(Error::DegenerateCorrespondences(
            "all points coincide".into(),
        ));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * mu, 0.0, s, -s * mv, 0.0, 0.0, 1.0))
}

fn transform(t: &Matrix3<f64>, p: &PixelPoint) -> (f64, f64) {
    let v = t * Vector3::new(p.u, p.v, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// Normalized DLT homography mapping each `pairs[i].0` onto `pairs[i].1`.
pub fn estimate_homography(pairs: &[(PixelPoint, PixelPoint)]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::Arity {
            what: "point correspondences",
            required: 4,
            got: pairs.len(),
        });
    }
    let src: Vec<_> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.1).collect();
    let ts = hartley_normalization(&src)?;
    let td = hartley_normalization(&dst)?;

    // Padded to at least 9 rows so the SVD exposes the full right null space.
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(&dst).enumerate() {
        let (x, y) = transform(&ts, s);
        let (u, v) = transform(&td, d);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateCorrespondences("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |k: usize| svd.singular_values[order[k]];
    let (largest, second_smallest, smallest) = (sv(0), sv(7), sv(8));
    if second_smallest <= 1e-10 * largest {
        return Err(Error::DegenerateCorrespondences(format!(
            "system rank < 8 (singular values {largest:.3e} … {second_smallest:.3e})"
        )));
    }
    if smallest / second_smallest > 0.99 {
        return Err(Error::DegenerateCorrespondences(format!(
            "ambiguous null space (σ₉/σ₈ = {:.4})",
            smallest / second_smallest
        )));
    }
    let hn = Matrix3::from_fn(|r, c| v_t[(order[8], 3 * r + c)]);
    let td_inv = td.try_inverse().ok_or(Error::SingularHomography)?;
    Homography::from_matrix(td_inv * hn * ts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle_apply(m: &Matrix3<f64>, p: PixelPoint) -> PixelPoint {
        let v = m * Vector3::new(p.u, p.v, 1.0);
        PixelPoint::new(v.x / v.z, v.y / v.z)
    }

    #[test]
    fn identity_and_translation() {
        let p = Homography::identity().apply(PixelPoint::new(5.0, 7.0)).unwrap();
        assert!((p.u - 5.0).abs() < 1e-12 && (p.v - 7.0).abs() < 1e-12);
        let p = Homography::translation(10.0, -3.0).apply(PixelPoint::new(0.0, 0.0)).unwrap();
        assert!((p.u - 10.0).abs() < 1e-12 && (p.v + 3.0).abs() < 1e-12);
    }

    #[test]
    fn canonical_sign_and_norm() {
        let h = Homography::from_matrix(-3.0 * Matrix3::identity()).unwrap();
        assert!((h.matrix().norm() - 1.0).abs() < 1e-15);
        assert!(h.matrix()[(2, 2)] > 0.0);
        let m = Matrix3::new(0.0, -1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0);
        let h = Homography::from_matrix(m).unwrap();
        assert!(h.matrix()[(0, 1)] > 0.0);
        assert!(Homography::from_matrix(Matrix3::zeros()).is_err());
    }

    #[test]
    fn point_at_infinity() {
        let h = Homography::from_row_major([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            h.apply(PixelPoint::new(-1.0, 3.0)),
            Err(Error::PointAtInfinity { .. })
        ));
    }

    #[test]
    fn apply_matches_matrix_oracle_and_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let m = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0)) + Matrix3::identity() * 2.0;
            let p = PixelPoint::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let Ok(h) = Homography::from_matrix(m) else { continue };
            let Ok(q) = h.apply(p) else { continue };
            let o = oracle_apply(&m, p);
            assert!((q.u - o.u).abs() < 1e-12 * (1.0 + o.u.abs()));
            assert!((q.v - o.v).abs() < 1e-12 * (1.0 + o.v.abs()));
            let scaled = Homography::from_matrix(m * rng.random_range(0.1..50.0)).unwrap();
            let q2 = scaled.apply(p).unwrap();
            assert!((q2.u - q.u).abs() < 1e-12 * (1.0 + q.u.abs()));
        }
    }

    #[test]
    fn estimate_identity_from_four_pairs() {
        let pts = [(0.0, 0.0), (100.0, 0.0), (100.0, 80.0), (0.0, 80.0)].map(|(u, v)| PixelPoint::new(u, v));
        let pairs: Vec<_> = pts.iter().map(|p| (*p, *p)).collect();
        let h = estimate_homography(&pairs).unwrap();
        assert!(h.distance(&Homography::identity()) < 1e-12);
    }

    #[test]
    fn too_few_pairs() {
        let p = PixelPoint::new(1.0, 2.0);
        assert!(matches!(estimate_homography(&[(p, p); 3]), Err(Error::Arity { .. })));
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pairs: Vec<_> = (0..5)
            .map(|i| {
                let p = PixelPoint::new(i as f64 * 10.0, i as f64 * 5.0);
                (p, PixelPoint::new(p.u + 1.0, p.v))
            })
            .collect();
        assert!(matches!(
            estimate_homography(&pairs),
            Err(Error::DegenerateCorrespondences(_))
        ));
    }

    #[test]
    fn noisy_twenty_pairs_transfer_error() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = Homography::from_row_major([1.05, 0.02, 12.0, -0.01, 0.98, -7.0, 1e-4, -5e-5, 1.0]).unwrap();
        let noise = Normal::new(0.0, 0.5).unwrap();
        let src: Vec<_> = (0..20)
            .map(|_| PixelPoint::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)))
            .collect();
        let pairs: Vec<_> = src
            .iter()
            .map(|p| {
                let q = truth.apply(*p).unwrap();
                (*p, PixelPoint::new(q.u + noise.sample(&mut rng), q.v + noise.sample(&mut rng)))
            })
            .collect();
        let h = estimate_homography(&pairs).unwrap();
        let mean_err = src
            .iter()
            .map(|p| h.apply(*p).unwrap().distance(&truth.apply(*p).unwrap()))
            .sum::<f64>()
            / src.len() as f64;
        assert!(mean_err < 1.0, "mean transfer error {mean_err}");
    }

    #[test]
    fn text_round_trip_is_exact() {
        let h = Homography::from_row_major([1.05, 0.02, 12.0, -0.01, 0.98, -7.0, 1e-4, -5e-5, 1.0]).unwrap();
        let back: Homography = h.to_string().parse().unwrap();
        assert_eq!(h, back);
        assert!("1 2 3".parse::<Homography>().is_err());
    }
}
