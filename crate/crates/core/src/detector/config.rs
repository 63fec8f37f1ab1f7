use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ActivationKind;

/// Which inputs the network consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fusion,
    SingleIr,
    SingleThermal,
}

impl Mode {
    pub fn streams(self) -> usize {
        match self {
            Mode::Fusion => 2,
            _ => 1,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(Mode::Fusion),
            "single_ir" => Ok(Mode::SingleIr),
            "single_thermal" => Ok(Mode::SingleThermal),
            _ => Err(Error::Config(format!(
                "mode must be fusion, single_ir or single_thermal, got {s:?}"
            ))),
        }
    }
}

/// Localization term of the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocLoss {
    Ciou,
    Iou,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub loc: f64,
    pub obj: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            loc: 1.0,
            obj: 1.0,
            cls: 0.5,
        }
    }
}

/// Public YOLOv4-Tiny anchors at 416 px: stride-16 scale, then stride-32.
pub const ANCHORS_416: [[[f64; 2]; 3]; 2] = [
    [[10.0, 14.0], [23.0, 27.0], [37.0, 58.0]],
    [[81.0, 82.0], [135.0, 169.0], [344.0, 319.0]],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub width_multiplier: f64,
    pub num_classes: usize,
    /// Per scale (stride 16, stride 32), three `(w, h)` pairs in pixels.
    pub anchors: [[[f64; 2]; 3]; 2],
    pub mode: Mode,
    pub activation: ActivationKind,
    pub loss_weights: LossWeights,
    pub loc_loss: LocLoss,
    pub ignore_iou_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(416, 1.0, Mode::Fusion)
    }
}

impl ModelConfig {
    /// Defaults with anchors scaled linearly from the 416 px set.
    pub fn new(input_size: usize, width_multiplier: f64, mode: Mode) -> Self {
        let s = input_size as f64 / 416.0;
        let anchors = ANCHORS_416.map(|scale| scale.map(|[w, h]| [w * s, h * s]));
        Self {
            input_size,
            width_multiplier,
            num_classes: 1,
            anchors,
            mode,
            activation: ActivationKind::Mish,
            loss_weights: LossWeights::default(),
            loc_loss: LocLoss::Ciou,
            ignore_iou_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return bad(format!("input_size {} is not a positive multiple of 32", self.input_size));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return bad(format!("width_multiplier {} is outside (0, 1]", self.width_multiplier));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.anchors.iter().flatten().flatten().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("anchors must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ignore_iou_threshold) {
            return bad(format!("ignore_iou_threshold {} is outside [0, 1]", self.ignore_iou_threshold));
        }
        let w = self.loss_weights;
        if [w.loc, w.obj, w.cls].iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return bad("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }

    /// `⌈base·α⌉` channels.
    pub fn width(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiplier).ceil() as usize).max(1)
    }

    pub fn outputs_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn head_channels(&self) -> usize {
        3 * self.outputs_per_anchor()
    }

    pub fn strides(&self) -> [usize; 2] {
        [16, 32]
    }

    pub fn grids(&self) -> [usize; 2] {
        [self.input_size / 16, self.input_size / 32]
    }

    pub fn to_json(&self) -> String {
        crate::json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
