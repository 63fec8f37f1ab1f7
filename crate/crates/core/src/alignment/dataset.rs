//! On-disk layout: `<root>/ir/<frame>.png`, `<root>/thermal/<frame>.png`,
//! `<root>/labels/<frame>.txt` with `class cx cy w h` lines normalized to the
//! cropped frame.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{AlignedPair, CropRect, LabeledFrame};
use crate::boxes::GroundTruthBox;
use crate::error::{Error, Result};
use crate::geometry::GrayImage;

#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub root: PathBuf,
}

impl DatasetPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn ir(&self, frame: &str) -> PathBuf {
        self.root.join("ir").join(format!("{frame}.png"))
    }

    pub fn thermal(&self, frame: &str) -> PathBuf {
        self.root.join("thermal").join(format!("{frame}.png"))
    }

    pub fn labels(&self, frame: &str) -> PathBuf {
        self.root.join("labels").join(format!("{frame}.txt"))
    }

    pub fn create_dirs(&self) -> Result<()> {
        for d in ["ir", "thermal", "labels"] {
            let p = self.root.join(d);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

pub fn format_labels(boxes: &[GroundTruthBox], width: usize, height: usize) -> String {
    let (w, h) = (width as f64, height as f64);
    let mut out = String::new();
    for b in boxes {
        let _ = writeln!(
            out,
            "{} {:.8} {:.8} {:.8} {:.8}",
            b.class_id,
            b.cx / w,
            b.cy / h,
            b.w / w,
            b.h / h
        );
    }
    out
}

/// Parses normalized label lines back into pixel boxes of a `width × height` frame.
pub fn parse_labels(text: &str, width: usize, height: usize, source: &str) -> Result<Vec<GroundTruthBox>> {
    let (w, h) = (width as f64, height as f64);
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            location: format!("{source}:{}", i + 1),
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0].parse().map_err(|e| err(format!("class {:?}: {e}", fields[0])))?;
        let mut v = [0.0f64; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|e| err(format!("{f:?}: {e}")))?;
            if !(0.0..=1.0).contains(slot) {
                return Err(err(format!("{f} is outside [0, 1]")));
            }
        }
        if v[2] <= 0.0 || v[3] <= 0.0 {
            return Err(err("box has no area".into()));
        }
        boxes.push(GroundTruthBox::new(v[0] * w, v[1] * h, v[2] * w, v[3] * h, class_id));
    }
    Ok(boxes)
}

pub fn write_frame(paths: &DatasetPaths, frame: &str, data: &LabeledFrame) -> Result<()> {
    let (w, h) = data.pair.ir.dims();
    data.pair.ir.save_png(&paths.ir(frame))?;
    data.pair.thermal_warped.save_png(&paths.thermal(frame))?;
    let p = paths.labels(frame);
    std::fs::write(&p, format_labels(&data.boxes, w, h)).map_err(|e| Error::io(&p, e))
}

/// Reads one frame. The crop recorded in the result is the whole stored image,
/// since frames on disk are already cropped.
pub fn read_frame(paths: &DatasetPaths, frame: &str) -> Result<LabeledFrame> {
    let ir = GrayImage::load_png(&paths.ir(frame))?;
    let thermal = GrayImage::load_png(&paths.thermal(frame))?;
    if ir.dims() != thermal.dims() {
        return Err(Error::Shape(format!(
            "frame {frame}: IR is {}x{}, thermal is {}x{}",
            ir.width(),
            ir.height(),
            thermal.width(),
            thermal.height()
        )));
    }
    let lp = paths.labels(frame);
    let text = std::fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
    let (w, h) = ir.dims();
    let boxes = parse_labels(&text, w, h, &lp.display().to_string())?;
    Ok(LabeledFrame {
        pair: AlignedPair {
            ir,
            thermal_warped: thermal,
            crop: CropRect::full(w, h),
        },
        boxes,
    })
}

/// Frame names with an IR image, sorted.
pub fn list_frames(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("ir");
    let mut names = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        let boxes = vec![GroundTruthBox::new(32.0, 40.0, 10.0, 24.0, 0)];
        let text = format_labels(&boxes, 64, 80);
        assert_eq!(text, "0 0.50000000 0.50000000 0.15625000 0.30000000\n");
        let back = parse_labels(&text, 64, 80, "t").unwrap();
        assert!((back[0].w - 10.0).abs() < 1e-9 && (back[0].h - 24.0).abs() < 1e-9);
        let err = parse_labels("0 0.5 0.5 1.5 0.1\n", 10, 10, "f.txt").unwrap_err();
        assert!(err.to_string().contains("f.txt:1"));
    }

    #[test]
    fn frame_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths::new(dir.path());
        paths.create_dirs().unwrap();
        let img = GrayImage::from_fn(16, 12, |x, y| ((x + y) % 5) as f32 / 4.0);
        let frame = LabeledFrame {
            pair: AlignedPair {
                ir: img.clone(),
                thermal_warped: img.clone(),
                crop: CropRect::full(16, 12),
            },
            boxes: vec![GroundTruthBox::new(8.0, 6.0, 4.0, 4.0, 0)],
        };
        write_frame(&paths, "f0001", &frame).unwrap();
        let back = read_frame(&paths, "f0001").unwrap();
        assert_eq!(back.pair.ir, img.quantized());
        assert_eq!(list_frames(dir.path()).unwrap(), vec!["f0001".to_string()]);
    }
}
