//! Deterministic synthetic IR/thermal scenes standing in for the smoke-room
//! captures: human figures built from soft ellipses, smoke that blinds the
//! IR camera, heat sources that confuse the thermal camera, and a known
//! thermal → IR homography.

mod chessboard;
mod dataset;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GroundTruthBox};
use crate::error::{Error, Result};
use crate::geometry::{Distortion, GrayImage, Homography, Intrinsics, PixelPoint};

pub use chessboard::{project_views, random_board_poses, render_chessboard, StereoRig};
pub use dataset::{
    frame_id, frame_seed, make_dataset, make_frame, sample_scene, split_of, DatasetManifest,
    FrameRecord, GeneratorConfig, Recipe, Split, MANIFEST_FILE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Posture {
    Standing,
    ArmsRaised,
    Crouching,
    Lying,
}

impl Posture {
    pub const ALL: [Posture; 4] = [Posture::Standing, Posture::ArmsRaised, Posture::Crouching, Posture::Lying];
}

/// One figure: `height` is the body length in pixels along its long axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanSpec {
    pub cx: f64,
    pub cy: f64,
    pub height: f64,
    pub posture: Posture,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatSource {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub intensity: f64,
}

/// The two-camera rig. Renders are in each camera's undistorted frame; the
/// intrinsics and distortion describe the lenses for chessboard views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    /// Row-major thermal → IR homography.
    pub thermal_to_ir: [f64; 9],
    pub ir_intrinsics: Intrinsics,
    pub ir_distortion: Distortion,
    pub thermal_intrinsics: Intrinsics,
    pub thermal_distortion: Distortion,
}

impl RigSpec {
    /// A rig whose thermal view is slightly wider, rotated and shifted
    /// relative to the IR view, so it covers the whole IR frame.
    pub fn default_for(width: usize, height: usize) -> Self {
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let (s, th) = (1.10, 1.0f64.to_radians());
        let (c, si) = (s * th.cos(), s * th.sin());
        let (tx, ty) = (1.5, -1.0);
        let p = 2e-5;
        // IR = T(c + t) · [sR | 0] · T(-c), with a mild projective row.
        let h = [
            c,
            -si,
            cx + tx - c * cx + si * cy,
            si,
            c,
            cy + ty - si * cx - c * cy,
            p,
            0.0,
            1.0 - p * cx,
        ];
        let f = width.max(height) as f64 * 1.2;
        Self {
            thermal_to_ir: h,
            ir_intrinsics: Intrinsics::new(f, f, cx, cy).expect("positive focal length"),
            ir_distortion: Distortion {
                k1: -0.12,
                k2: 0.03,
                ..Distortion::default()
            },
            thermal_intrinsics: Intrinsics::new(f / s, f / s, cx, cy).expect("positive focal length"),
            thermal_distortion: Distortion {
                k1: -0.05,
                ..Distortion::default()
            },
        }
    }

    pub fn homography(&self) -> Result<Homography> {
        Homography::from_row_major(self.thermal_to_ir)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub humans: Vec<HumanSpec>,
    pub smoke_density: f64,
    pub heat_sources: Vec<HeatSource>,
    pub rig: RigSpec,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn empty(width: usize, height: usize, seed: u64) -> Self {
        Self {
            width,
            height,
            humans: Vec::new(),
            smoke_density: 0.0,
            heat_sources: Vec::new(),
            rig: RigSpec::default_for(width, height),
            noise_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.width < 8 || self.height < 8 {
            return bad(format!("scene {}x{} is too small", self.width, self.height));
        }
        if !(0.0..=1.0).contains(&self.smoke_density) {
            return bad(format!("smoke density {} outside [0, 1]", self.smoke_density));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {}", self.noise_sigma));
        }
        let frame = BBox::from_xywh(0.0, 0.0, self.width as f64, self.height as f64);
        for h in &self.humans {
            let e = figure_extent(h);
            if !(h.height > 2.0) || e.intersection(&frame).map(|i| i.area()) != Some(e.area()) {
                return bad(format!("human {h:?} is not inside the frame"));
            }
        }
        for s in &self.heat_sources {
            let inside = (0.0..=self.width as f64).contains(&s.cx) && (0.0..=self.height as f64).contains(&s.cy);
            if !(s.radius > 0.0) || !(0.0..=1.0).contains(&s.intensity) || !inside {
                return bad(format!("heat source {s:?} is invalid"));
            }
        }
        self.rig.homography()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPair {
    pub ir: GrayImage,
    /// In the thermal camera's own frame, before alignment.
    pub thermal: GrayImage,
    /// Tight boxes of each figure's rendered IR support.
    pub gt_boxes: Vec<GroundTruthBox>,
    pub gt_homography: Homography,
}

/// Axis-aligned ellipse `(cx, cy, a, b)` relative to the figure center, in
/// units of body height, plus its heat level.
type Part = (f64, f64, f64, f64, f64);

fn parts(posture: Posture) -> Vec<Part> {
    let head = 1.0;
    let body = 0.85;
    let limb = 0.75;
    match posture {
        Posture::Standing => vec![
            (0.0, -0.42, 0.075, 0.08, head),
            (0.0, -0.14, 0.12, 0.21, body),
            (-0.06, 0.27, 0.05, 0.23, limb),
            (0.06, 0.27, 0.05, 0.23, limb),
            (-0.165, -0.13, 0.04, 0.18, limb),
            (0.165, -0.13, 0.04, 0.18, limb),
        ],
        Posture::ArmsRaised => vec![
            (0.0, -0.32, 0.075, 0.08, head),
            (0.0, -0.04, 0.12, 0.21, body),
            (-0.06, 0.32, 0.05, 0.18, limb),
            (0.06, 0.32, 0.05, 0.18, limb),
            (-0.15, -0.33, 0.04, 0.17, limb),
            (0.15, -0.33, 0.04, 0.17, limb),
        ],
        Posture::Crouching => vec![
            (0.0, -0.38, 0.11, 0.12, head),
            (0.0, -0.05, 0.19, 0.24, body),
            (-0.14, 0.33, 0.1, 0.17, limb),
            (0.14, 0.33, 0.1, 0.17, limb),
            (-0.24, -0.02, 0.06, 0.18, limb),
            (0.24, -0.02, 0.06, 0.18, limb),
        ],
        // Standing figure turned on its side.
        Posture::Lying => parts(Posture::Standing)
            .into_iter()
            .map(|(x, y, a, b, t)| (y, x, b, a, t))
            .collect(),
    }
}

/// Analytic bounding box of a figure's ellipses.
pub fn figure_extent(h: &HumanSpec) -> BBox {
    parts(h.posture)
        .iter()
        .map(|&(x, y, a, b, _)| {
            BBox::from_center(h.cx + x * h.height, h.cy + y * h.height, 2.0 * a * h.height, 2.0 * b * h.height)
        })
        .reduce(|a, b| a.union_with(&b))
        .expect("figures have parts")
}

/// Coverage in [0, 1] and heat level of a figure at a point; edges are
/// anti-aliased over about one pixel.
fn figure_at(h: &HumanSpec, x: f64, y: f64) -> (f64, f64) {
    let mut cover: f64 = 0.0;
    let mut heat: f64 = 0.0;
    for &(px, py, a, b, t) in &parts(h.posture) {
        let (a, b) = (a * h.height, b * h.height);
        let (dx, dy) = (x - (h.cx + px * h.height), y - (h.cy + py * h.height));
        let r = ((dx / a).powi(2) + (dy / b).powi(2)).sqrt();
        let signed = (r - 1.0) * a.min(b);
        let c = (0.5 - signed).clamp(0.0, 1.0);
        if c > cover {
            cover = c;
        }
        if c > 0.0 {
            heat = heat.max(t);
        }
    }
    (cover, heat)
}

/// Smooth random field in [0, 1]: bilinear interpolation of a coarse grid.
struct LowFreq {
    grid: Vec<f64>,
    n: usize,
    sx: f64,
    sy: f64,
}

impl LowFreq {
    fn new(rng: &mut ChaCha8Rng, n: usize, width: usize, height: usize) -> Self {
        Self {
            grid: (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect(),
            n,
            sx: (n - 1) as f64 / width.max(1) as f64,
            sy: (n - 1) as f64 / height.max(1) as f64,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let m = (self.n - 1) as f64;
        let (u, v) = ((x * self.sx).clamp(0.0, m), (y * self.sy).clamp(0.0, m));
        let (i, j) = ((u.floor() as usize).min(self.n - 2), (v.floor() as usize).min(self.n - 2));
        let (fu, fv) = (u - i as f64, v - j as f64);
        let g = |a: usize, b: usize| self.grid[b * self.n + a];
        (g(i, j) * (1.0 - fu) + g(i + 1, j) * fu) * (1.0 - fv) + (g(i, j + 1) * (1.0 - fu) + g(i + 1, j + 1) * fu) * fv
    }
}

const IR_BACKGROUND: f64 = 0.28;
const IR_FIGURE: f64 = 0.62;
const THERMAL_BACKGROUND: f64 = 0.06;
const THERMAL_BODY: f64 = 0.82;
/// Fraction of IR contrast removed at full smoke density.
const SMOKE_ATTENUATION: f64 = 0.93;
const SMOKE_HAZE: f64 = 0.55;

/// Scene appearance as seen by both cameras at a point of the IR frame.
struct Scene<'a> {
    spec: &'a SceneSpec,
    ir_bg: LowFreq,
    thermal_bg: LowFreq,
    smoke: LowFreq,
    stripes: Vec<(f64, f64, f64)>,
}

impl<'a> Scene<'a> {
    fn new(spec: &'a SceneSpec, rng: &mut ChaCha8Rng) -> Self {
        let (w, h) = (spec.width, spec.height);
        Self {
            spec,
            ir_bg: LowFreq::new(rng, 6, w, h),
            thermal_bg: LowFreq::new(rng, 4, w, h),
            smoke: LowFreq::new(rng, 5, w, h),
            stripes: spec
                .humans
                .iter()
                .map(|_| {
                    (
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.25..0.6),
                        rng.random_range(-0.1..0.1),
                    )
                })
                .collect(),
        }
    }

    fn ir_clean(&self, x: f64, y: f64) -> f64 {
        let mut v = IR_BACKGROUND + 0.12 * (self.ir_bg.at(x, y) - 0.5);
        for (h, &(phase, freq, shade)) in self.spec.humans.iter().zip(&self.stripes) {
            let (c, _) = figure_at(h, x, y);
            if c > 0.0 {
                let texture = 0.06 * (freq * y + phase).sin() + shade;
                v = v * (1.0 - c) + (IR_FIGURE + texture) * c;
            }
        }
        v
    }

    fn ir(&self, x: f64, y: f64) -> f64 {
        let d = self.spec.smoke_density;
        let s = self.smoke.at(x, y);
        let keep = 1.0 - d * (SMOKE_ATTENUATION + (1.0 - SMOKE_ATTENUATION) * s);
        self.ir_clean(x, y) * keep + d * SMOKE_HAZE * (0.85 + 0.15 * s)
    }

    fn thermal(&self, x: f64, y: f64) -> f64 {
        let mut v = THERMAL_BACKGROUND + 0.05 * self.thermal_bg.at(x, y);
        for h in &self.spec.humans {
            let (c, heat) = figure_at(h, x, y);
            if c > 0.0 {
                v = v * (1.0 - c) + THERMAL_BODY * heat * c;
            }
        }
        for s in &self.spec.heat_sources {
            let r2 = ((x - s.cx).powi(2) + (y - s.cy).powi(2)) / (s.radius * s.radius);
            // Hot core with a broad glow around it.
            v += s.intensity * ((-r2 * r2).exp() + 0.35 * (-r2 / 6.0).exp());
        }
        v
    }
}

fn add_noise(img: &mut GrayImage, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        for p in img.pixels_mut() {
            *p += n.sample(rng) as f32;
        }
    }
    img.clamp();
}

/// Bounding box of the pixels a figure covers by at least half; pixel `x`
/// spans `[x, x + 1)`.
fn support_box(h: &HumanSpec, width: usize, height: usize) -> Option<BBox> {
    let e = figure_extent(h);
    let x0 = (e.x_min.floor().max(0.0)) as usize;
    let y0 = (e.y_min.floor().max(0.0)) as usize;
    let x1 = (e.x_max.ceil() as usize).min(width - 1);
    let y1 = (e.y_max.ceil() as usize).min(height - 1);
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if figure_at(h, x as f64, y as f64).0 >= 0.5 {
                b = Some(match b {
                    None => (x, y, x, y),
                    Some((a, c, d, e)) => (a.min(x), c.min(y), d.max(x), e.max(y)),
                });
            }
        }
    }
    b.map(|(a, c, d, e)| BBox::new(a as f64, c as f64, (d + 1) as f64, (e + 1) as f64))
}

/// Renders the IR view, the thermal view in its own frame (the scene seen
/// through the inverse rig homography) and one box per figure.
pub fn render_pair(spec: &SceneSpec) -> Result<RenderedPair> {
    spec.validate()?;
    let h = spec.rig.homography()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene = Scene::new(spec, &mut rng);
    let (w, hgt) = (spec.width, spec.height);
    let mut ir = GrayImage::from_fn(w, hgt, |x, y| scene.ir(x as f64, y as f64) as f32);
    let mut thermal = GrayImage::from_fn(w, hgt, |x, y| {
        // Thermal pixels outside the IR frame still see the (extended) scene.
        let p = h.apply(PixelPoint::new(x as f64, y as f64)).unwrap_or_default();
        scene.thermal(p.u, p.v) as f32
    });
    add_noise(&mut ir, spec.noise_sigma, &mut rng);
    add_noise(&mut thermal, spec.noise_sigma, &mut rng);
    let gt_boxes = spec
        .humans
        .iter()
        .filter_map(|hs| support_box(hs, w, hgt))
        .map(|b| GroundTruthBox::from_bbox(&b, 0))
        .collect();
    Ok(RenderedPair {
        ir,
        thermal,
        gt_boxes,
        gt_homography: h,
    })
}

/// Per-pixel coverage of one figure in the IR frame.
pub fn figure_mask(h: &HumanSpec, width: usize, height: usize) -> Vec<f64> {
    let mut m = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            m[y * width + x] = figure_at(h, x as f64, y as f64).0;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn person(cx: f64, cy: f64) -> HumanSpec {
        HumanSpec {
            cx,
            cy,
            height: 50.0,
            posture: Posture::Standing,
        }
    }

    #[test]
    fn validation() {
        let mut s = SceneSpec::empty(128, 128, 0);
        s.validate().unwrap();
        s.humans.push(person(5.0, 64.0));
        assert!(s.validate().is_err());
        let mut s = SceneSpec::empty(128, 128, 0);
        s.smoke_density = 1.5;
        assert!(render_pair(&s).is_err());
    }

    #[test]
    fn extent_contains_support() {
        for posture in Posture::ALL {
            let h = HumanSpec {
                cx: 60.3,
                cy: 62.8,
                height: 44.0,
                posture,
            };
            let e = figure_extent(&h);
            let s = support_box(&h, 128, 128).unwrap();
            assert!(s.x_min >= e.x_min - 1.0 && s.x_max <= e.x_max + 1.0);
            assert!(s.y_min >= e.y_min - 1.0 && s.y_max <= e.y_max + 1.0);
            assert!(crate::boxes::iou(&s, &e) > 0.85, "{posture:?}");
        }
        let lying = figure_extent(&HumanSpec {
            posture: Posture::Lying,
            ..person(64.0, 64.0)
        });
        assert!(lying.width() > lying.height());
    }

    #[test]
    fn low_frequency_field_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = LowFreq::new(&mut rng, 5, 100, 80);
        for y in 0..80 {
            for x in 0..100 {
                let v = f.at(x as f64, y as f64);
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
