use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{CalibrationResult, CornerObservations};
use crate::error::{Error, Result};
use crate::geometry::{Distortion, Intrinsics, PixelPoint, Pose};

const CORNER_HEADER: &str = "view_id,corner_index,u,v";

/// Parses `view_id,corner_index,u,v` rows. Views keep their order of first
/// appearance; corner indices must cover `0..n` for each view.
pub fn parse_corner_csv(text: &str, source: &str) -> Result<Vec<CornerObservations>> {
    let err = |line: usize, message: String| Error::Parse {
        location: format!("{source}:{line}"),
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CORNER_HEADER => {}
        Some((_, h)) => return Err(err(1, format!("expected header `{CORNER_HEADER}`, found `{h}`"))),
        None => return Err(err(1, "empty file".into())),
    }
    let mut views: Vec<(String, Vec<Option<PixelPoint>>)> = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(lineno, format!("expected 4 fields, found {}", fields.len())));
        }
        let index: usize = fields[1]
            .parse()
            .map_err(|e| err(lineno, format!("corner_index {:?}: {e}", fields[1])))?;
        let u: f64 = fields[2]
            .parse()
            .map_err(|e| err(lineno, format!("u {:?}: {e}", fields[2])))?;
        let v: f64 = fields[3]
            .parse()
            .map_err(|e| err(lineno, format!("v {:?}: {e}", fields[3])))?;
        if !u.is_finite() || !v.is_finite() {
            return Err(err(lineno, "non-finite coordinate".into()));
        }
        let slot = match views.iter().position(|(id, _)| id == fields[0]) {
            Some(p) => p,
            None => {
                views.push((fields[0].to_string(), Vec::new()));
                views.len() - 1
            }
        };
        let corners = &mut views[slot].1;
        if corners.len() <= index {
            corners.resize(index + 1, None);
        }
        if corners[index].replace(PixelPoint::new(u, v)).is_some() {
            return Err(err(lineno, format!("duplicate corner {index} in view {}", fields[0])));
        }
    }
    views
        .into_iter()
        .map(|(view_id, corners)| {
            let corners = corners
                .into_iter()
                .enumerate()
                .map(|(i, c)| {
                    c.ok_or_else(|| Error::Parse {
                        location: source.to_string(),
                        message: format!("view {view_id} is missing corner {i}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CornerObservations { view_id, corners })
        })
        .collect()
}

pub fn read_corner_csv(path: &Path) -> Result<Vec<CornerObservations>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corner_csv(&text, &path.display().to_string())
}

pub fn format_corner_csv(views: &[CornerObservations]) -> String {
    let mut out = String::from(CORNER_HEADER);
    out.push('\n');
    for v in views {
        for (i, c) in v.corners.iter().enumerate() {
            let _ = writeln!(out, "{},{},{:.17e},{:.17e}", v.view_id, i, c.u, c.v);
        }
    }
    out
}

pub fn write_corner_csv(path: &Path, views: &[CornerObservations]) -> Result<()> {
    std::fs::write(path, format_corner_csv(views)).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct ViewJson {
    rotation_axis_angle: [f64; 3],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct CalibrationJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    k1: f64,
    k2: f64,
    k3: f64,
    p1: f64,
    p2: f64,
    rms: f64,
    views: Vec<ViewJson>,
}

impl CalibrationResult {
    pub fn to_json(&self) -> String {
        let aa = |p: &Pose| {
            let v = p.axis_angle();
            [v.x, v.y, v.z]
        };
        let j = CalibrationJson {
            fx: self.intrinsics.fx,
            fy: self.intrinsics.fy,
            cx: self.intrinsics.cx,
            cy: self.intrinsics.cy,
            k1: self.distortion.k1,
            k2: self.distortion.k2,
            k3: self.distortion.k3,
            p1: self.distortion.p1,
            p2: self.distortion.p2,
            rms: self.rms_reprojection,
            views: self
                .poses
                .iter()
                .map(|p| ViewJson {
                    rotation_axis_angle: aa(p),
                    translation: [p.translation.x, p.translation.y, p.translation.z],
                })
                .collect(),
        };
        crate::json::to_string_pretty(&j)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: CalibrationJson = serde_json::from_str(text)?;
        let intrinsics = Intrinsics::new(j.fx, j.fy, j.cx, j.cy)?;
        Ok(Self {
            intrinsics,
            distortion: Distortion {
                k1: j.k1,
                k2: j.k2,
                k3: j.k3,
                p1: j.p1,
                p2: j.p2,
            },
            poses: j
                .views
                .iter()
                .map(|v| Pose::from_axis_angle(Vector3::from(v.rotation_axis_angle), Vector3::from(v.translation)))
                .collect(),
            rms_reprojection: j.rms,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
