use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use smokesight::{Error, Result};

/// One accepted configuration key.
#[derive(Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    /// `None` marks a required key.
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Some(default),
        help,
    }
}

const fn required(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: None,
        help,
    }
}

/// Keys every subcommand accepts; the only ones allowed outside a section.
pub const COMMON: &[Key] = &[
    key("seed", "0", "master seed for every random choice of the run"),
    key("out_dir", "out", "directory receiving outputs and run_manifest.json"),
];

pub struct Subcommand {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: &'static [Key],
}

const BOARD: [Key; 3] = [
    key("rows", "6", "inner-corner rows of the chessboard"),
    key("cols", "9", "inner-corner columns of the chessboard"),
    key("square_size", "25", "chessboard square edge in millimeters"),
];

pub const SUBCOMMANDS: &[Subcommand] = &[
    Subcommand {
        name: "calibrate",
        about: "Calibrate one camera from chessboard corners",
        keys: &[
            required("corners", "corner CSV (view_id,corner_index,u,v), at least 3 views"),
            BOARD[0],
            BOARD[1],
            BOARD[2],
            key("release_k3", "true", "refine k3 in a second pass"),
        ],
    },
    Subcommand {
        name: "undistort",
        about: "Remove lens distortion from an image",
        keys: &[
            required("calibration", "calibration JSON of the camera"),
            required("image", "input PNG"),
        ],
    },
    Subcommand {
        name: "align",
        about: "Register a thermal image onto an IR image via a shared chessboard view",
        keys: &[
            required("ir_calibration", "IR camera calibration JSON"),
            required("thermal_calibration", "thermal camera calibration JSON"),
            required("ir_corners", "corner CSV of the IR view of the board"),
            required("thermal_corners", "corner CSV of the thermal view of the board"),
            key("view", "", "view id to use from both corner files (empty: first view)"),
            required("ir_image", "IR PNG to align"),
            required("thermal_image", "thermal PNG to align"),
            BOARD[0],
            BOARD[1],
            BOARD[2],
            key("checker", "16", "tile edge in pixels of the checker-blend overlay"),
        ],
    },
    Subcommand {
        name: "synth",
        about: "Generate a synthetic aligned IR/thermal dataset",
        keys: &[
            key("frames", "300", "number of frames"),
            key("size", "128", "frame width and height in pixels"),
            key("recipe", "standard", "corruption recipe: standard | complementary"),
            key("noise_sigma", "0.02", "sensor noise standard deviation"),
            key("max_humans", "3", "maximum people per frame"),
        ],
    },
    Subcommand {
        name: "train",
        about: "Train a detector on a dataset",
        keys: &[
            required("data", "dataset directory"),
            key("split", "train", "frames to train on: train | val | test | all"),
            key("eval_split", "val", "frames scored after training: train | val | test | all | none"),
            key("mode", "fusion", "input streams: fusion | single_ir | single_thermal"),
            key("input_size", "416", "network input size (multiple of 32)"),
            key("width_multiplier", "1.0", "channel width multiplier"),
            key("epochs", "100", "training epochs"),
            key("batch_size", "32", "minibatch size"),
            key("lr", "0.003", "Adam learning rate"),
        ],
    },
    Subcommand {
        name: "detect",
        about: "Run a trained detector over dataset frames",
        keys: &[
            required("weights", "weights file (config sidecar next to it)"),
            required("data", "dataset directory"),
            key("split", "test", "frames to process: train | val | test | all"),
            key("conf_threshold", "0.25", "minimum detection score"),
            key("nms_iou", "0.45", "NMS overlap threshold"),
            key("overlays", "true", "write overlay PNGs"),
        ],
    },
    Subcommand {
        name: "eval",
        about: "Score detections against dataset labels",
        keys: &[
            required("detections", "JSON-lines detections from `detect`"),
            required("data", "dataset directory"),
            key("split", "test", "frames to score: train | val | test | all"),
            key("conf_threshold", "0.25", "score cut for precision, recall and F1"),
            key("bench", "", "bench.json whose FPS fills the report's FPS column (empty: none)"),
        ],
    },
    Subcommand {
        name: "bench",
        about: "Measure inference throughput",
        keys: &[
            required("weights", "weights file (config sidecar next to it)"),
            required("data", "dataset directory"),
            key("split", "test", "frames to cycle through: train | val | test | all"),
            key("warmup", "10", "untimed warm-up frames"),
            key("measured", "100", "timed frames"),
        ],
    },
];

pub fn subcommand(name: &str) -> Option<&'static Subcommand> {
    SUBCOMMANDS.iter().find(|s| s.name == name)
}

impl Subcommand {
    pub fn all_keys(&self) -> impl Iterator<Item = &'static Key> {
        COMMON.iter().chain(self.keys.iter())
    }

    fn find(&self, name: &str) -> Option<&'static Key> {
        self.all_keys().find(|k| k.name == name)
    }
}

/// Effective key-value configuration of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub subcommand: String,
    pub values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Defaults, then the config file (top-level keys, then the
    /// subcommand's section), then command-line overrides.
    pub fn resolve(cmd: &Subcommand, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut values: BTreeMap<String, Option<String>> = cmd
            .all_keys()
            .map(|k| (k.name.to_string(), k.default.map(str::to_string)))
            .collect();
        if let Some(path) = file {
            for (k, v) in read_ini(path, cmd)? {
                values.insert(k, Some(v));
            }
        }
        for (k, v) in overrides {
            if cmd.find(k).is_none() {
                return Err(Error::Config(format!("unknown key {k:?} for {}", cmd.name)));
            }
            values.insert(k.clone(), Some(v.clone()));
        }
        let mut out = BTreeMap::new();
        for (k, v) in values {
            let v = v.ok_or_else(|| Error::Config(format!("{}: required key {k:?} is not set", cmd.name)))?;
            out.insert(k, v);
        }
        Ok(Self {
            subcommand: cmd.name.to_string(),
            values: out,
        })
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key {key} is not declared for {}", self.subcommand))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.str(key);
        raw.parse()
            .map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.str(key))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        self.path("out_dir")
    }
}

/// Reads the keys that apply to `cmd`. Every section must name a subcommand
/// and every key must belong to its section; sections of other subcommands
/// are checked but not applied.
fn read_ini(path: &Path, cmd: &Subcommand) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let ini = ini::Ini::load_from_str(&text).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut general = Vec::new();
    let mut own = Vec::new();
    for (section, props) in ini.iter() {
        for (k, v) in props.iter() {
            let known = match section {
                None => COMMON.iter().any(|c| c.name == k),
                Some(s) => match subcommand(s) {
                    Some(sc) => sc.find(k).is_some(),
                    None => {
                        return Err(Error::Config(format!("{}: unknown section [{s}]", path.display())));
                    }
                },
            };
            if !known {
                let place = section.map_or("top level".to_string(), |s| format!("[{s}]"));
                return Err(Error::Config(format!("{}: unknown key {k:?} in {place}", path.display())));
            }
            match section {
                None => general.push((k.to_string(), v.to_string())),
                Some(s) if s == cmd.name => own.push((k.to_string(), v.to_string())),
                Some(_) => {}
            }
        }
    }
    general.extend(own);
    Ok(general)
}

/// Renders a config as an INI file that [`RunConfig::resolve`] reads back.
pub fn to_ini(cfg: &RunConfig) -> String {
    let mut s = format!("[{}]\n", cfg.subcommand);
    for (k, v) in &cfg.values {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s
}
