use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{figure_extent, render_pair, HeatSource, HumanSpec, Posture, RigSpec, SceneSpec};
use crate::alignment::{align_pair, propagate_labels, write_frame, CropRect, DatasetPaths, LabeledFrame, MIN_KEPT_AREA};
use crate::boxes::{iou, BBox, GroundTruthBox};
use crate::error::{Error, Result};

/// How smoke and heat sources are drawn per frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// Moderate smoke and a few weak heat sources.
    Standard,
    /// Even frames: heavy smoke, no heat sources. Odd frames: light smoke,
    /// several strong heat sources, most of them on top of people. Each
    /// modality is crippled on half the data.
    Complementary,
}

impl Recipe {
    pub fn describe(&self) -> &'static str {
        match self {
            Recipe::Standard => "standard: smoke density U(0, 0.6); 0-2 heat sources, radius U(0.04, 0.08)*size, intensity U(0.4, 0.8)",
            Recipe::Complementary => {
                "complementary: even frames smoke U(0.85, 1.0) with no heat sources; odd frames smoke U(0, 0.2) with 3-6 heat sources, radius U(0.05, 0.12)*size, intensity U(0.7, 1.0), each person covered by one of them with probability 0.7 (radius U(0.35, 0.5)*person height)"
            }
        }
    }
}

impl std::str::FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Recipe::Standard),
            "complementary" => Ok(Recipe::Complementary),
            _ => Err(Error::Config(format!("unknown recipe {s:?} (standard | complementary)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub size: usize,
    pub master_seed: u64,
    pub recipe: Recipe,
    pub noise_sigma: f64,
    pub max_humans: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            size: 128,
            master_seed: 0,
            recipe: Recipe::Standard,
            noise_sigma: 0.02,
            max_humans: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (train | val | test)"))),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn frame_id(index: usize) -> String {
    format!("frame_{index:05}")
}

/// Per-frame seed; independent of generation order.
pub fn frame_seed(master_seed: u64, index: usize) -> u64 {
    splitmix64(master_seed ^ splitmix64(index as u64))
}

/// 70/15/15 assignment from a hash of the master seed and frame id.
pub fn split_of(master_seed: u64, id: &str) -> Split {
    let h = id
        .bytes()
        .fold(splitmix64(master_seed ^ 0x5EED_5917), |acc, b| splitmix64(acc ^ b as u64));
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    if u < 0.70 {
        Split::Train
    } else if u < 0.85 {
        Split::Val
    } else {
        Split::Test
    }
}

fn sample_human(rng: &mut ChaCha8Rng, s: f64) -> HumanSpec {
    let posture = Posture::ALL[rng.random_range(0..4)];
    let height = match posture {
        Posture::Crouching => rng.random_range(0.22..0.40),
        _ => rng.random_range(0.30..0.55),
    } * s;
    let e = figure_extent(&HumanSpec {
        cx: 0.0,
        cy: 0.0,
        height,
        posture,
    });
    HumanSpec {
        cx: rng.random_range(1.0 - e.x_min..s - 1.0 - e.x_max),
        cy: rng.random_range(1.0 - e.y_min..s - 1.0 - e.y_max),
        height,
        posture,
    }
}

/// Draws the scene for frame `index`; a pure function of the config and index.
pub fn sample_scene(config: &GeneratorConfig, index: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(config.master_seed, index));
    let s = config.size as f64;
    let mut humans: Vec<HumanSpec> = Vec::new();
    let target = rng.random_range(1..=config.max_humans.max(1));
    for _ in 0..20 * target {
        if humans.len() == target {
            break;
        }
        let h = sample_human(&mut rng, s);
        let e = figure_extent(&h);
        if humans.iter().all(|o| iou(&figure_extent(o), &e) < 0.1) {
            humans.push(h);
        }
    }
    let heavy = index.is_multiple_of(2);
    let (smoke, n_heat, radius, intensity) = match (config.recipe, heavy) {
        (Recipe::Standard, _) => (rng.random_range(0.0..0.6), rng.random_range(0..=2), (0.04, 0.08), (0.4, 0.8)),
        (Recipe::Complementary, true) => (rng.random_range(0.85..=1.0), 0, (0.05, 0.12), (0.7, 1.0)),
        (Recipe::Complementary, false) => (rng.random_range(0.0..0.2), rng.random_range(3..=6), (0.05, 0.12), (0.7, 1.0)),
    };
    let mut heat_sources: Vec<HeatSource> = (0..n_heat)
        .map(|_| HeatSource {
            cx: rng.random_range(0.0..s),
            cy: rng.random_range(0.0..s),
            radius: rng.random_range(radius.0..radius.1) * s,
            intensity: rng.random_range(intensity.0..=intensity.1),
        })
        .collect();
    if config.recipe == Recipe::Complementary && !heavy {
        // Glare sitting on people is what actually confuses the thermal view.
        for (h, src) in humans.iter().zip(heat_sources.iter_mut()) {
            if rng.random_bool(0.7) {
                let j = 0.1 * h.height;
                src.cx = (h.cx + rng.random_range(-j..j)).clamp(0.0, s);
                src.cy = (h.cy + rng.random_range(-j..j)).clamp(0.0, s);
                src.radius = rng.random_range(0.35..0.5) * h.height;
            }
        }
    }
    SceneSpec {
        width: config.size,
        height: config.size,
        humans,
        smoke_density: smoke,
        heat_sources,
        rig: RigSpec::default_for(config.size, config.size),
        noise_sigma: config.noise_sigma,
        seed: rng.random(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: String,
    pub index: usize,
    pub split: Split,
    pub crop: CropRect,
    pub boxes: usize,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: String,
    pub version: String,
    pub config: GeneratorConfig,
    pub recipe: String,
    pub split_rule: String,
    pub frames: Vec<FrameRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let p = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn frames_in(&self, split: Split) -> Vec<String> {
        self.frames.iter().filter(|f| f.split == split).map(|f| f.id.clone()).collect()
    }
}

/// Renders, aligns and crops one frame and propagates its labels.
pub fn make_frame(spec: &SceneSpec) -> Result<LabeledFrame> {
    let pair = render_pair(spec)?;
    let mut aligned = align_pair(&pair.ir, &pair.thermal, &pair.gt_homography)?;
    aligned.ir = aligned.ir.quantized();
    aligned.thermal_warped = aligned.thermal_warped.quantized();
    let boxes: Vec<BBox> = pair.gt_boxes.iter().map(|b| b.bbox()).collect();
    let boxes = propagate_labels(&boxes, &aligned.crop, MIN_KEPT_AREA)
        .iter()
        .map(|b| GroundTruthBox::from_bbox(b, 0))
        .collect();
    Ok(LabeledFrame { pair: aligned, boxes })
}

/// Writes `n_frames` aligned, labeled frames and `manifest.json` under
/// `root`. Output bytes depend only on the config.
pub fn make_dataset(n_frames: usize, config: &GeneratorConfig, root: &Path) -> Result<DatasetManifest> {
    if config.size < 32 {
        return Err(Error::Config(format!("image size {} is below 32", config.size)));
    }
    let paths = DatasetPaths::new(root);
    paths.create_dirs()?;
    let mut frames = Vec::with_capacity(n_frames);
    for index in 0..n_frames {
        let id = frame_id(index);
        let spec = sample_scene(config, index);
        let frame = make_frame(&spec)?;
        write_frame(&paths, &id, &frame)?;
        frames.push(FrameRecord {
            split: split_of(config.master_seed, &id),
            id,
            index,
            crop: frame.pair.crop,
            boxes: frame.boxes.len(),
            spec,
        });
    }
    let manifest = DatasetManifest {
        generator: "smokesight-synth".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: *config,
        recipe: config.recipe.describe().into(),
        split_rule: "train/val/test = 70/15/15 by splitmix64 hash of (master seed, frame id)".into(),
        frames,
    };
    let p = root.join(MANIFEST_FILE);
    let tmp = root.join(format!("{MANIFEST_FILE}.tmp"));
    std::fs::write(&tmp, crate::json::to_string_pretty(&manifest)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &p).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}
