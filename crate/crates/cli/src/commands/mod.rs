mod camera;
mod pipeline;

use std::path::Path;

use smokesight::alignment::list_frames;
use smokesight::geometry::GrayImage;
use smokesight::synth::{DatasetManifest, Split, MANIFEST_FILE};
use smokesight::{Error, Result};

use crate::config::RunConfig;
use crate::manifest::{Run, RunManifest};

/// Runs one subcommand and writes its manifest.
pub fn dispatch(cfg: RunConfig) -> Result<RunManifest> {
    let mut run = Run::start(cfg)?;
    run.write("config.ini", crate::config::to_ini(&run.cfg).as_bytes())?;
    match run.cfg.subcommand.as_str() {
        "calibrate" => camera::calibrate(&mut run)?,
        "undistort" => camera::undistort(&mut run)?,
        "align" => camera::align(&mut run)?,
        "synth" => pipeline::synth(&mut run)?,
        "train" => pipeline::train(&mut run)?,
        "detect" => pipeline::detect(&mut run)?,
        "eval" => pipeline::eval(&mut run)?,
        "bench" => pipeline::bench(&mut run)?,
        other => return Err(Error::Config(format!("unknown subcommand {other:?}"))),
    }
    run.finish()
}

/// Frame ids of a dataset split; `all` lists every frame without needing
/// the generator manifest.
fn frames_of(root: &Path, split: &str) -> Result<Vec<String>> {
    let ids = if split == "all" {
        list_frames(root)?
    } else {
        let split: Split = split.parse()?;
        if !root.join(MANIFEST_FILE).exists() {
            return Err(Error::Config(format!(
                "{} has no {MANIFEST_FILE}; use split = all",
                root.display()
            )));
        }
        DatasetManifest::load(root)?.frames_in(split)
    };
    if ids.is_empty() {
        return Err(Error::Config(format!("no frames in split {split:?} of {}", root.display())));
    }
    Ok(ids)
}

fn save_png(run: &mut Run, rel: &str, img: &GrayImage) -> Result<()> {
    let path = run.output_path(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| crate::manifest::io_err(parent, e))?;
    }
    img.save_png(&path)?;
    run.record(rel);
    Ok(())
}
