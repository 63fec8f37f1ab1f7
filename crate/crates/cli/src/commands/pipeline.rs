use std::collections::BTreeMap;

use serde_json::json;
use smokesight::alignment::{read_frame, DatasetPaths, LabeledFrame};
use smokesight::boxes::BBox;
use smokesight::detector::{
    build_model, draw_boxes, infer_pair, loss_curve_csv, sidecar_path, train as run_training, DetectorModel,
    FrameDetections, Mode, ModelConfig, TrainOptions, TrainSample, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU,
};
use smokesight::evalkit::{fps_bench, scored_boxes, summarize, EvalReport, FpsReport, FrameEval, ScoredBox};
use smokesight::geometry::GrayImage;
use smokesight::synth::{make_dataset, GeneratorConfig, Recipe};
use smokesight::{Error, Result};

use super::{frames_of, save_png};
use crate::manifest::{io_err, Run};

/// Score floor used when collecting detections for AP.
const AP_CONF_FLOOR: f64 = 0.001;

fn load_frames(root: &std::path::Path, split: &str) -> Result<Vec<(String, LabeledFrame)>> {
    let paths = DatasetPaths::new(root);
    frames_of(root, split)?
        .into_iter()
        .map(|id| read_frame(&paths, &id).map(|f| (id, f)))
        .collect()
}

fn load_model(run: &mut Run) -> Result<DetectorModel<f32>> {
    let weights = run.input("weights")?;
    let sidecar = sidecar_path(&weights);
    if !sidecar.exists() {
        return Err(Error::Config(format!("weights: config sidecar {} is missing", sidecar.display())));
    }
    DetectorModel::load(&weights)
}

pub fn synth(run: &mut Run) -> Result<()> {
    let config = GeneratorConfig {
        size: run.cfg.get("size")?,
        master_seed: run.cfg.seed()?,
        recipe: run.cfg.get::<Recipe>("recipe")?,
        noise_sigma: run.cfg.get("noise_sigma")?,
        max_humans: run.cfg.get("max_humans")?,
    };
    let frames: usize = run.cfg.get("frames")?;
    let root = run.output_path("dataset");
    let manifest = run.timed("synth", |_| make_dataset(frames, &config, &root))?;
    run.record("dataset");
    let count = |s| manifest.frames.iter().filter(|f| f.split == s).count();
    use smokesight::synth::Split::*;
    run.results = json!({
        "frames": frames,
        "train": count(Train),
        "val": count(Val),
        "test": count(Test),
        "boxes": manifest.frames.iter().map(|f| f.boxes).sum::<usize>(),
    });
    eprintln!("wrote {frames} frames to {}", root.display());
    Ok(())
}

/// Detections for every frame, scored against the frame labels.
fn score(model: &DetectorModel<f32>, frames: &[(String, LabeledFrame)]) -> Result<EvalReport> {
    let evals = frames
        .iter()
        .map(|(_, f)| {
            let d = infer_pair(model, &f.pair.ir, Some(&f.pair.thermal_warped), AP_CONF_FLOOR, DEFAULT_NMS_IOU)?;
            Ok(FrameEval {
                detections: scored_boxes(&d),
                ground_truth: f.boxes.iter().map(|b| b.bbox()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&evals, DEFAULT_CONF_THRESHOLD))
}

pub fn train(run: &mut Run) -> Result<()> {
    let data = run.input("data")?;
    let mode: Mode = run.cfg.get("mode")?;
    let config = ModelConfig::new(run.cfg.get("input_size")?, run.cfg.get("width_multiplier")?, mode);
    config.validate()?;
    let seed = run.cfg.seed()?;
    let options = TrainOptions {
        epochs: run.cfg.get("epochs")?,
        batch_size: run.cfg.get("batch_size")?,
        lr: run.cfg.get("lr")?,
        seed,
    };
    let eval_split = run.cfg.str("eval_split").to_string();
    let frames = load_frames(&data, run.cfg.str("split"))?;
    let samples: Vec<TrainSample> = frames.iter().map(|(_, f)| TrainSample::from_frame(f, config.input_size)).collect();
    drop(frames);
    let mut model = build_model::<f32>(&config, seed)?;
    eprintln!(
        "training {} parameters on {} frames for {} epochs",
        model.param_count(),
        samples.len(),
        options.epochs
    );
    let log = run.timed("train", |_| {
        run_training(&mut model, &samples, &options, |e, _| {
            eprintln!(
                "epoch {:>4}  loss {:.5}  (loc {:.5}  obj {:.5}  cls {:.5})",
                e.epoch, e.loss.total, e.loss.loc, e.loss.obj, e.loss.cls
            );
            Ok(())
        })
    })?;

    let weights = run.output_path("model.fvw");
    model.save(&weights)?;
    run.record("model.fvw");
    run.record("model.json");
    run.write("loss_curve.csv", loss_curve_csv(&log).as_bytes())?;

    let metrics = if eval_split == "none" {
        serde_json::Value::Null
    } else {
        let held_out = load_frames(&data, &eval_split)?;
        let report = run.timed("eval", |_| score(&model, &held_out))?;
        eprint!("{eval_split} split:\n{}", report.table());
        serde_json::to_value(&report)?
    };
    run.results = json!({
        "parameters": model.param_count(),
        "epochs": log.iter().map(|e| json!({
            "epoch": e.epoch,
            "loss_total": e.loss.total,
            "loss_loc": e.loss.loc,
            "loss_obj": e.loss.obj,
            "loss_cls": e.loss.cls,
        })).collect::<Vec<_>>(),
        "final_metrics": { "split": eval_split, "report": metrics },
    });
    Ok(())
}

/// IR and thermal side by side with the detections drawn on both.
fn overlay(f: &LabeledFrame, dets: &[smokesight::detector::Detection]) -> GrayImage {
    let ir = draw_boxes(&f.pair.ir, dets, 1.0);
    let th = draw_boxes(&f.pair.thermal_warped, dets, 1.0);
    let (w, h) = ir.dims();
    GrayImage::from_fn(2 * w, h, |x, y| if x < w { ir.get(x, y) } else { th.get(x - w, y) })
}

pub fn detect(run: &mut Run) -> Result<()> {
    let model = load_model(run)?;
    let data = run.input("data")?;
    let conf: f64 = run.cfg.get("conf_threshold")?;
    let nms_iou: f64 = run.cfg.get("nms_iou")?;
    let overlays: bool = run.cfg.get("overlays")?;
    let frames = load_frames(&data, run.cfg.str("split"))?;
    let (lines, total) = run.timed("detect", |run| {
        let mut lines = String::new();
        let mut total = 0;
        for (id, f) in &frames {
            let dets = infer_pair(&model, &f.pair.ir, Some(&f.pair.thermal_warped), conf, nms_iou)?;
            total += dets.len();
            lines.push_str(&smokesight::json::to_string_line(&FrameDetections::new(id, &dets)));
            lines.push('\n');
            if overlays {
                save_png(run, &format!("overlays/{id}.png"), &overlay(f, &dets))?;
            }
        }
        Ok((lines, total))
    })?;
    eprintln!("{total} detections in {} frames", frames.len());
    run.write("detections.jsonl", lines.as_bytes())?;
    run.results = json!({ "frames": frames.len(), "detections": total });
    Ok(())
}

fn read_detections(path: &std::path::Path) -> Result<BTreeMap<String, Vec<ScoredBox>>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fd: FrameDetections = serde_json::from_str(line).map_err(|e| Error::Parse {
            location: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?;
        let boxes = fd
            .boxes
            .iter()
            .map(|b| ScoredBox::new(BBox::from_center(b.cx, b.cy, b.w, b.h), b.score))
            .collect();
        if out.insert(fd.frame.clone(), boxes).is_some() {
            return Err(Error::Parse {
                location: format!("{}:{}", path.display(), i + 1),
                message: format!("frame {} listed twice", fd.frame),
            });
        }
    }
    Ok(out)
}

pub fn eval(run: &mut Run) -> Result<()> {
    let mut dets = read_detections(&run.input("detections")?)?;
    let data = run.input("data")?;
    let conf: f64 = run.cfg.get("conf_threshold")?;
    let fps = match run.cfg.str("bench") {
        "" => None,
        _ => {
            let p = run.input("bench")?;
            let text = std::fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
            Some(serde_json::from_str::<FpsReport>(&text)?.fps)
        }
    };
    let frames = load_frames(&data, run.cfg.str("split"))?;
    let evals: Vec<FrameEval> = frames
        .iter()
        .map(|(id, f)| FrameEval {
            detections: dets.remove(id).unwrap_or_default(),
            ground_truth: f.boxes.iter().map(|b| b.bbox()).collect(),
        })
        .collect();
    let mut report = summarize(&evals, conf);
    report.fps = fps;
    if !dets.is_empty() {
        report
            .warnings
            .push(format!("{} frames with detections are outside the scored split and were ignored", dets.len()));
    }
    print!("{}", report.table());
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    run.write("report.json", smokesight::json::to_string_pretty(&report).as_bytes())?;
    run.write("report.txt", report.table().as_bytes())?;
    run.results = serde_json::to_value(&report)?;
    Ok(())
}

pub fn bench(run: &mut Run) -> Result<()> {
    let model = load_model(run)?;
    let data = run.input("data")?;
    let warmup: usize = run.cfg.get("warmup")?;
    let measured: usize = run.cfg.get("measured")?;
    let pairs: Vec<(GrayImage, GrayImage)> = load_frames(&data, run.cfg.str("split"))?
        .into_iter()
        .map(|(_, f)| (f.pair.ir, f.pair.thermal_warped))
        .collect();
    let report = run.timed("bench", |_| fps_bench(&model, &pairs, warmup, measured))?;
    println!("{:.2} FPS (median frame {:.3} ms) on {}", report.fps, 1e3 * report.median_frame_seconds, report.hardware);
    run.write("bench.json", smokesight::json::to_string_pretty(&report).as_bytes())?;
    run.results = serde_json::to_value(&report)?;
    Ok(())
}
