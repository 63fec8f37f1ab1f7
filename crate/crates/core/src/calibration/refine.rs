use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3};

use super::{planar_target_points, reprojection_rms, CalibrationResult, ChessboardSpec, CornerObservations};
use crate::error::{Error, Result};
use crate::geometry::{Distortion, Intrinsics, Pose, WorldPoint};

const N_INTR: usize = 9;
const K3: usize = 6;
const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e16;

/// Levenberg–Marquardt settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub relative_tolerance: f64,
    pub freeze_k3: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            relative_tolerance: 1e-12,
            freeze_k3: false,
        }
    }
}

/// Intrinsic block layout: fx, fy, cx, cy, k1, k2, k3, p1, p2.
fn pack_intrinsics(k: &Intrinsics, d: &Distortion) -> [f64; N_INTR] {
    [k.fx, k.fy, k.cx, k.cy, d.k1, d.k2, d.k3, d.p1, d.p2]
}

fn unpack_intrinsics(p: &[f64; N_INTR]) -> (Intrinsics, Distortion) {
    (
        Intrinsics {
            fx: p[0],
            fy: p[1],
            cx: p[2],
            cy: p[3],
        },
        Distortion {
            k1: p[4],
            k2: p[5],
            k3: p[6],
            p1: p[7],
            p2: p[8],
        },
    )
}

struct State {
    intr: [f64; N_INTR],
    poses: Vec<Pose>,
}

impl State {
    fn cost(&self, world: &[WorldPoint], obs: &[CornerObservations]) -> f64 {
        let (k, d) = unpack_intrinsics(&self.intr);
        let mut cost = 0.0;
        for (pose, o) in self.poses.iter().zip(obs) {
            for (w, m) in world.iter().zip(&o.corners) {
                let r = corner_residual(w, pose, &k, &d, m.u, m.v);
                match r {
                    Some((ru, rv)) => cost += ru * ru + rv * rv,
                    None => return f64::INFINITY,
                }
            }
        }
        cost
    }

    /// Applies a step: additive on intrinsics and translations, left
    /// multiplicative `exp(δ)·R` on rotations.
    fn stepped(&self, delta: &DVector<f64>) -> State {
        let mut intr = self.intr;
        for (i, v) in intr.iter_mut().enumerate() {
            *v += delta[i];
        }
        let poses = self
            .poses
            .iter()
            .enumerate()
            .map(|(v, pose)| {
                let o = N_INTR + 6 * v;
                let dr = Vector3::new(delta[o], delta[o + 1], delta[o + 2]);
                let dt = Vector3::new(delta[o + 3], delta[o + 4], delta[o + 5]);
                let r = Rotation3::from_scaled_axis(dr) * Rotation3::from_matrix_unchecked(pose.rotation);
                // Re-derive from axis-angle so the stored matrix stays orthonormal.
                Pose::from_axis_angle(r.scaled_axis(), pose.translation + dt)
            })
            .collect();
        State { intr, poses }
    }
}

fn corner_residual(w: &WorldPoint, pose: &Pose, k: &Intrinsics, d: &Distortion, u: f64, v: f64) -> Option<(f64, f64)> {
    crate::geometry::project(w, pose, k, d)
        .ok()
        .map(|p| (p.u - u, p.v - v))
}

/// Residual and its 2×15 Jacobian row block (9 intrinsic + 6 pose columns).
fn corner_jacobian(
    w: &WorldPoint,
    pose: &Pose,
    intr: &[f64; N_INTR],
    u: f64,
    v: f64,
) -> Option<([f64; 2], [[f64; 15]; 2])> {
    let (k, d) = unpack_intrinsics(intr);
    let rx = pose.rotation * Vector3::new(w.x, w.y, w.z);
    let pc = rx + pose.translation;
    if pc.z <= 0.0 {
        return None;
    }
    let iz = 1.0 / pc.z;
    let (x, y) = (pc.x * iz, pc.y * iz);
    let r2 = x * x + y * y;
    let r4 = r2 * r2;
    let r6 = r4 * r2;
    let nd = crate::geometry::distort(crate::geometry::NormalizedPoint::new(x, y), &d);
    let res = [k.fx * nd.x + k.cx - u, k.fy * nd.y + k.cy - v];

    let jd = crate::geometry::distortion_jacobian(x, y, &d);
    // ∂(x, y)/∂Pc
    let dn = [[iz, 0.0, -x * iz], [0.0, iz, -y * iz]];
    // ∂Pc/∂(δω, δt): [-[R·X]ₓ | I]
    let skew = Matrix3::new(0.0, -rx.z, rx.y, rx.z, 0.0, -rx.x, -rx.y, rx.x, 0.0);
    let mut dpc = [[0.0; 6]; 3];
    for i in 0..3 {
        for j in 0..3 {
            dpc[i][j] = -skew[(i, j)];
        }
        dpc[i][3 + i] = 1.0;
    }
    let mut jac = [[0.0; 15]; 2];
    let f = [k.fx, k.fy];
    let dd = [
        [x * r2, x * r4, x * r6, 2.0 * x * y, r2 + 2.0 * x * x],
        [y * r2, y * r4, y * r6, r2 + 2.0 * y * y, 2.0 * x * y],
    ];
    for row in 0..2 {
        jac[row][row] = if row == 0 { nd.x } else { nd.y };
        jac[row][2 + row] = 1.0;
        for c in 0..5 {
            jac[row][4 + c] = f[row] * dd[row][c];
        }
        for c in 0..6 {
            let mut acc = 0.0;
            for a in 0..2 {
                let mut inner = 0.0;
                for b in 0..3 {
                    inner += dn[a][b] * dpc[b][c];
                }
                acc += jd[row][a] * inner;
            }
            jac[row][N_INTR + c] = f[row] * acc;
        }
    }
    Some((res, jac))
}

/// Builds `JᵀJ` and `Jᵀr`, visiting views and corners in order.
fn normal_equations(
    state: &State,
    world: &[WorldPoint],
    obs: &[CornerObservations],
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = N_INTR + 6 * state.poses.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut g = DVector::<f64>::zeros(n);
    for (vi, (pose, o)) in state.poses.iter().zip(obs).enumerate() {
        let off = N_INTR + 6 * vi;
        let col = |c: usize| if c < N_INTR { c } else { off + c - N_INTR };
        for (w, m) in world.iter().zip(&o.corners) {
            let (res, jac) = corner_jacobian(w, pose, &state.intr, m.u, m.v).ok_or_else(|| {
                Error::in_view(&o.view_id, Error::BehindCamera { depth: 0.0 })
            })?;
            for row in 0..2 {
                for i in 0..15 {
                    let ji = jac[row][i];
                    if ji == 0.0 {
                        continue;
                    }
                    g[col(i)] += ji * res[row];
                    for j in 0..15 {
                        a[(col(i), col(j))] += ji * jac[row][j];
                    }
                }
            }
        }
    }
    Ok((a, g))
}

fn solve_damped(a: &DMatrix<f64>, g: &DVector<f64>, lambda: f64, frozen: &[usize]) -> Option<DVector<f64>> {
    let mut m = a.clone();
    let mut rhs = -g.clone();
    for i in 0..m.nrows() {
        let d = m[(i, i)];
        m[(i, i)] = d + lambda * d.max(1e-12);
    }
    for &f in frozen {
        m.row_mut(f).fill(0.0);
        m.column_mut(f).fill(0.0);
        m[(f, f)] = 1.0;
        rhs[f] = 0.0;
    }
    m.cholesky().map(|c| c.solve(&rhs))
}

/// Levenberg–Marquardt refinement of intrinsics, distortion and every view
/// pose, minimizing the summed squared reprojection error.
pub fn refine_calibration(
    init: &CalibrationResult,
    observations: &[CornerObservations],
    spec: &ChessboardSpec,
    options: &RefineOptions,
) -> Result<CalibrationResult> {
    if init.poses.len() != observations.len() {
        return Err(Error::Shape(format!(
            "{} poses for {} views",
            init.poses.len(),
            observations.len()
        )));
    }
    let world = planar_target_points(spec);
    for o in observations {
        if o.corners.len() != world.len() {
            return Err(Error::in_view(
                &o.view_id,
                Error::Shape(format!("{} corners, board has {}", o.corners.len(), world.len())),
            ));
        }
    }
    let mut intr = pack_intrinsics(&init.intrinsics, &init.distortion);
    let frozen: Vec<usize> = if options.freeze_k3 {
        intr[K3] = 0.0;
        vec![K3]
    } else {
        vec![]
    };
    let mut state = State {
        intr,
        poses: init.poses.clone(),
    };
    let mut cost = state.cost(&world, observations);
    if !cost.is_finite() {
        return Err(Error::Invalid("initial model projects a corner behind the camera".into()));
    }
    let mut lambda = LAMBDA_INIT;

    for _ in 0..options.max_iterations {
        if cost == 0.0 {
            break;
        }
        let (a, g) = normal_equations(&state, &world, observations)?;
        let mut accepted = None;
        while lambda <= LAMBDA_MAX {
            if let Some(delta) = solve_damped(&a, &g, lambda, &frozen) {
                let candidate = state.stepped(&delta);
                let new_cost = candidate.cost(&world, observations);
                if new_cost < cost {
                    lambda = (lambda / 10.0).max(1e-15);
                    accepted = Some((candidate, new_cost));
                    break;
                }
            }
            lambda *= 10.0;
        }
        match accepted {
            Some((candidate, new_cost)) => {
                let rel = (cost - new_cost) / cost;
                state = candidate;
                cost = new_cost;
                if rel < options.relative_tolerance {
                    break;
                }
            }
            None => {
                // Residuals at the rounding floor count as an exact fit.
                let residuals: usize = observations.iter().map(|o| 2 * o.corners.len()).sum();
                if cost <= EXACT_FIT_RMS * EXACT_FIT_RMS * residuals as f64
                    || at_stationary_point(&a, &g, cost, &frozen)
                {
                    break;
                }
                let best = finish(&state, observations, spec)?;
                return Err(Error::RefinementDiverged {
                    best_rms: best.rms_reprojection,
                });
            }
        }
    }
    finish(&state, observations, spec)
}

const EXACT_FIT_RMS: f64 = 1e-9;

/// True when even the undamped Gauss–Newton model predicts no meaningful
/// decrease: every damped retry failed because there is nothing left to gain.
fn at_stationary_point(a: &DMatrix<f64>, g: &DVector<f64>, cost: f64, frozen: &[usize]) -> bool {
    match solve_damped(a, g, 1e-12, frozen) {
        Some(delta) => -g.dot(&delta) <= 1e-10 * cost.max(f64::MIN_POSITIVE),
        None => true,
    }
}

fn finish(state: &State, observations: &[CornerObservations], spec: &ChessboardSpec) -> Result<CalibrationResult> {
    let (intrinsics, distortion) = unpack_intrinsics(&state.intr);
    let mut out = CalibrationResult {
        intrinsics,
        distortion,
        poses: state.poses.clone(),
        rms_reprojection: 0.0,
    };
    out.rms_reprojection = reprojection_rms(&out, observations, spec)?;
    Ok(out)
}
