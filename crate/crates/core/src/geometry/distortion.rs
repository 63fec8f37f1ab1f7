use serde::{Deserialize, Serialize};

use super::NormalizedPoint;
use crate::error::{Error, Result};

const UNDISTORT_MAX_ITERS: usize = 20;
const UNDISTORT_TOL: f64 = 1e-10;

/// Brown–Conrady lens distortion: three radial and two tangential terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub p1: f64,
    pub p2: f64,
}

impl Distortion {
    pub const NONE: Distortion = Distortion {
        k1: 0.0,
        k2: 0.0,
        k3: 0.0,
        p1: 0.0,
        p2: 0.0,
    };

    pub fn radial(k1: f64, k2: f64, k3: f64) -> Self {
        Self {
            k1,
            k2,
            k3,
            ..Self::NONE
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::NONE
    }

    fn radial_scale(&self, r2: f64) -> f64 {
        1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
    }

    fn tangential(&self, x: f64, y: f64, r2: f64) -> (f64, f64) {
        (
            2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x),
            self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y,
        )
    }
}

/// Applies radial scaling plus the additive tangential displacement.
pub fn distort(p: NormalizedPoint, d: &Distortion) -> NormalizedPoint {
    let r2 = p.x * p.x + p.y * p.y;
    let s = d.radial_scale(r2);
    let (tx, ty) = d.tangential(p.x, p.y, r2);
    NormalizedPoint::new(p.x * s + tx, p.y * s + ty)
}

/// Inverts [`distort`] by fixed-point iteration
/// `x ← (x_d − tangential(x)) / radial_scale(x)`.
pub fn undistort_point(p_distorted: NormalizedPoint, d: &Distortion) -> Result<NormalizedPoint> {
    if d.is_zero() {
        return Ok(p_distorted);
    }
    let (xd, yd) = (p_distorted.x, p_distorted.y);
    let (mut x, mut y) = (xd, yd);
    for _ in 0..UNDISTORT_MAX_ITERS {
        let r2 = x * x + y * y;
        let s = d.radial_scale(r2);
        let (tx, ty) = d.tangential(x, y, r2);
        let nx = (xd - tx) / s;
        let ny = (yd - ty) / s;
        let step = (nx - x).abs().max((ny - y).abs());
        x = nx;
        y = ny;
        if !x.is_finite() || !y.is_finite() {
            break;
        }
        if step < UNDISTORT_TOL {
            return Ok(NormalizedPoint::new(x, y));
        }
    }
    // Fixed-point iteration stalls or oscillates for strong distortion near
    // the edge of the field. Otherwise continue the identity branch by homotopy in
    // the coefficients, then fall back to plain Newton from the distorted
    // point.
    // A slowly contracting iteration that ended close to a root is polished
    // in place first.
    if x.is_finite() && y.is_finite() {
        if let Some(q) = newton_inverse(xd, yd, d, x, y) {
            if (q.x - x).abs().max((q.y - y).abs()) < 1e-6 {
                return Ok(q);
            }
        }
    }
    if let Some(q) = homotopy_inverse(xd, yd, d).or_else(|| newton_inverse(xd, yd, d, xd, yd)) {
        return Ok(q);
    }
    Err(Error::UndistortNoConvergence { x: xd, y: yd })
}

const HOMOTOPY_STEPS: usize = 16;

/// Tracks the root of `distort_t(q) = x_d` for coefficients `t·d`,
/// `t = 0 → 1`, starting from `q = x_d` at `t = 0`.
fn homotopy_inverse(xd: f64, yd: f64, d: &Distortion) -> Option<NormalizedPoint> {
    let (mut x, mut y) = (xd, yd);
    for step in 1..=HOMOTOPY_STEPS {
        let t = step as f64 / HOMOTOPY_STEPS as f64;
        let dt = Distortion {
            k1: d.k1 * t,
            k2: d.k2 * t,
            k3: d.k3 * t,
            p1: d.p1 * t,
            p2: d.p2 * t,
        };
        let q = newton_inverse(xd, yd, &dt, x, y)?;
        (x, y) = (q.x, q.y);
    }
    Some(NormalizedPoint::new(x, y))
}

fn newton_inverse(xd: f64, yd: f64, d: &Distortion, x0: f64, y0: f64) -> Option<NormalizedPoint> {
    let residual = |x: f64, y: f64| {
        let f = distort(NormalizedPoint::new(x, y), d);
        (f.x - xd, f.y - yd)
    };
    let (mut x, mut y) = (x0, y0);
    let (mut ex, mut ey) = residual(x, y);
    for _ in 0..100 {
        if ex.abs().max(ey.abs()) < UNDISTORT_TOL * 1e-2 {
            return Some(NormalizedPoint::new(x, y));
        }
        let [[a, b], [c, e]] = jacobian(x, y, d);
        let det = a * e - b * c;
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let dx = (e * ex - b * ey) / det;
        let dy = (a * ey - c * ex) / det;
        let norm = ex.hypot(ey);
        let mut t = 1.0;
        loop {
            let (nx, ny) = (x - t * dx, y - t * dy);
            let (nex, ney) = residual(nx, ny);
            if nex.hypot(ney) < norm {
                (x, y, ex, ey) = (nx, ny, nex, ney);
                break;
            }
            t *= 0.5;
            if t < 1e-8 {
                return None;
            }
        }
    }
    None
}

/// Jacobian of [`distort`] with respect to (x, y).
pub(crate) fn jacobian(x: f64, y: f64, d: &Distortion) -> [[f64; 2]; 2] {
    let r2 = x * x + y * y;
    let s = d.radial_scale(r2);
    // ds/d(r²)
    let ds = d.k1 + r2 * (2.0 * d.k2 + 3.0 * d.k3 * r2);
    let dxdx = s + x * ds * 2.0 * x + 2.0 * d.p1 * y + d.p2 * 6.0 * x;
    let dxdy = x * ds * 2.0 * y + 2.0 * d.p1 * x + d.p2 * 2.0 * y;
    let dydx = y * ds * 2.0 * x + d.p1 * 2.0 * x + 2.0 * d.p2 * y;
    let dydy = s + y * ds * 2.0 * y + d.p1 * 6.0 * y + 2.0 * d.p2 * x;
    [[dxdx, dxdy], [dydx, dydy]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_coefficients_are_identity() {
        let p = NormalizedPoint::new(0.3, 0.4);
        assert_eq!(distort(p, &Distortion::NONE), p);
        assert_eq!(undistort_point(p, &Distortion::NONE).unwrap(), p);
    }

    #[test]
    fn origin_is_fixed() {
        let d = Distortion {
            k1: 0.3,
            k2: -0.1,
            k3: 0.05,
            p1: 0.01,
            p2: -0.02,
        };
        assert_eq!(distort(NormalizedPoint::new(0.0, 0.0), &d), NormalizedPoint::new(0.0, 0.0));
    }

    #[test]
    fn hand_evaluated_radial_case() {
        let d = Distortion::radial(0.1, 0.0, 0.0);
        let q = distort(NormalizedPoint::new(0.3, 0.4), &d);
        assert!((q.x - 0.3075).abs() < 1e-15);
        assert!((q.y - 0.41).abs() < 1e-15);

        let back = undistort_point(NormalizedPoint::new(0.3075, 0.41), &d).unwrap();
        assert!((back.x - 0.3).abs() < 1e-8);
        assert!((back.y - 0.4).abs() < 1e-8);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let d = Distortion {
            k1: -0.2,
            k2: 0.07,
            k3: 0.01,
            p1: 0.003,
            p2: -0.004,
        };
        let (x, y) = (0.37, -0.21);
        let j = jacobian(x, y, &d);
        let h = 1e-6;
        let fx = |x: f64, y: f64| distort(NormalizedPoint::new(x, y), &d);
        let dx = (fx(x + h, y).x - fx(x - h, y).x) / (2.0 * h);
        let dy = (fx(x, y + h).x - fx(x, y - h).x) / (2.0 * h);
        let ex = (fx(x + h, y).y - fx(x - h, y).y) / (2.0 * h);
        let ey = (fx(x, y + h).y - fx(x, y - h).y) / (2.0 * h);
        for (a, b) in [(j[0][0], dx), (j[0][1], dy), (j[1][0], ex), (j[1][1], ey)] {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    /// `distort = id + g` is injective on a convex set where `‖∂g‖₂ < 1`,
    /// which makes the left inverse well defined there.
    fn contraction_certified(d: &Distortion, half: f64) -> bool {
        let n = 40;
        (0..=n).all(|i| {
            (0..=n).all(|j| {
                let x = -half + 2.0 * half * i as f64 / n as f64;
                let y = -half + 2.0 * half * j as f64 / n as f64;
                let [[a, b], [c, e]] = jacobian(x, y, d);
                let m = nalgebra::Matrix2::new(a - 1.0, b, c, e - 1.0);
                m.singular_values().max() < 0.9
            })
        })
    }

    proptest! {
        #[test]
        fn undistort_inverts_distort(
            fx in -1.0f64..1.0, fy in -1.0f64..1.0,
            k1 in -0.2f64..0.2, k2 in -0.2f64..0.2, k3 in -0.2f64..0.2,
            p1 in -0.2f64..0.2, p2 in -0.2f64..0.2,
        ) {
            let d = Distortion { k1, k2, k3, p1, p2 };
            // Largest certified field for this lens; the sample point is
            // scaled into it.
            let half = [1.0, 0.8, 0.6, 0.5, 0.4, 0.3, 0.2]
                .into_iter()
                .find(|h| contraction_certified(&d, *h))
                .unwrap();
            let p = NormalizedPoint::new(fx * half, fy * half);
            let back = undistort_point(distort(p, &d), &d).unwrap();
            prop_assert!((back.x - p.x).abs() < 1e-8 && (back.y - p.y).abs() < 1e-8);
        }

        #[test]
        fn mild_distortion_round_trips(
            x in -0.7f64..0.7, y in -0.7f64..0.7,
            k1 in -0.1f64..0.1, k2 in -0.05f64..0.05,
            p1 in -0.01f64..0.01, p2 in -0.01f64..0.01,
        ) {
            let d = Distortion { k1, k2, k3: 0.0, p1, p2 };
            let p = NormalizedPoint::new(x, y);
            let back = undistort_point(distort(p, &d), &d).unwrap();
            prop_assert!((back.x - p.x).abs() < 1e-8 && (back.y - p.y).abs() < 1e-8);
        }
    }
}
