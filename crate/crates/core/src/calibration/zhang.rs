use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{Homography, Intrinsics, Pose};

/// Row of the zero-skew IAC system: `h_iᵀ·B·h_j` as a dot product with
/// `b = (B11, B22, B13, B23, B33)`.
fn v_row(h: &Matrix3<f64>, i: usize, j: usize) -> [f64; 5] {
    let (a, b) = (h.column(i), h.column(j));
    [
        a[0] * b[0],
        a[1] * b[1],
        a[2] * b[0] + a[0] * b[2],
        a[2] * b[1] + a[1] * b[2],
        a[2] * b[2],
    ]
}

/// Closed-form zero-skew intrinsics from board-to-image homographies.
pub fn init_intrinsics_zhang(view_homographies: &[Homography]) -> Result<Intrinsics> {
    let n = view_homographies.len();
    if n < 3 {
        return Err(Error::Arity {
            what: "views",
            required: 3,
            got: n,
        });
    }
    let mut distinct = 0;
    for (i, h) in view_homographies.iter().enumerate() {
        if view_homographies[..i].iter().all(|o| o.distance(h) > 1e-9) {
            distinct += 1;
        }
    }
    if distinct < 3 {
        return Err(Error::DegenerateViews(format!(
            "only {distinct} distinct board orientations"
        )));
    }

    let mut v = DMatrix::<f64>::zeros(2 * n, 5);
    for (k, h) in view_homographies.iter().enumerate() {
        let h = h.matrix();
        let v12 = v_row(h, 0, 1);
        let v11 = v_row(h, 0, 0);
        let v22 = v_row(h, 1, 1);
        for c in 0..5 {
            v[(2 * k, c)] = v12[c];
            v[(2 * k + 1, c)] = v11[c] - v22[c];
        }
    }
    // Column equilibration: the unknowns differ by many orders of magnitude.
    let scales: Vec<f64> = (0..5)
        .map(|c| {
            let n = v.column(c).norm();
            if n > 0.0 {
                n
            } else {
                1.0
            }
        })
        .collect();
    for (c, s) in scales.iter().enumerate() {
        v.column_mut(c).unscale_mut(*s);
    }
    let svd = v.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateViews("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |k: usize| svd.singular_values[order[k]];
    if sv(3) <= 1e-9 * sv(0) {
        return Err(Error::DegenerateViews(format!(
            "rank-deficient conic system (σ₄/σ₁ = {:.3e})",
            sv(3) / sv(0)
        )));
    }
    let mut b: Vec<f64> = (0..5).map(|c| v_t[(order[4], c)] / scales[c]).collect();
    if b[0] < 0.0 {
        b.iter_mut().for_each(|x| *x = -*x);
    }
    let [b11, b22, b13, b23, b33] = [b[0], b[1], b[2], b[3], b[4]];
    let cx = -b13 / b11;
    let cy = -b23 / b22;
    let lambda = b33 - b13 * b13 / b11 - b23 * b23 / b22;
    let fx = (lambda / b11).sqrt();
    let fy = (lambda / b22).sqrt();
    Intrinsics::new(fx, fy, cx, cy)
        .map_err(|_| Error::DegenerateViews(format!("no valid intrinsics (fx={fx}, fy={fy}, cx={cx}, cy={cy})")))
}

/// Board pose from its homography: `[r1 r2 t] ∝ K⁻¹H`, completed with
/// `r3 = r1 × r2` and projected onto the nearest rotation.
pub fn init_extrinsics(h: &Homography, k: &Intrinsics) -> Result<Pose> {
    k.validate()?;
    let m = k.inverse_matrix() * h.matrix();
    let scale = 1.0 / m.column(0).norm();
    let mut r1: Vector3<f64> = m.column(0) * scale;
    let mut r2: Vector3<f64> = m.column(1) * scale;
    let mut t: Vector3<f64> = m.column(2) * scale;
    if t.z < 0.0 {
        r1 = -r1;
        r2 = -r2;
        t = -t;
    }
    if !(t.z > 0.0) {
        return Err(Error::BoardBehindCamera {
            view: "?".into(),
        });
    }
    let r3 = r1.cross(&r2);
    let q = Matrix3::from_columns(&[r1, r2, r3]);
    let svd = q.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut rotation = u * v_t;
    if rotation.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        rotation = u * v_t;
    }
    Ok(Pose {
        rotation,
        translation: t,
    })
}
