use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use smokesight::alignment::{list_frames, read_frame, DatasetPaths};
use smokesight::calibration::{write_corner_csv, CalibrationResult, ChessboardSpec, CornerObservations};
use smokesight::detector::{FrameDetections, OutputBox};
use smokesight::geometry::{Distortion, Homography, PixelPoint};
use smokesight::synth::{random_board_poses, render_chessboard, StereoRig};

fn smokesight(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smokesight"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr:\n{}", stderr(&out));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn board() -> ChessboardSpec {
    ChessboardSpec::new(6, 9, 25.0).unwrap()
}

fn write_views(dir: &Path, name: &str, views: &[CornerObservations]) -> PathBuf {
    let p = dir.join(name);
    write_corner_csv(&p, views).unwrap();
    p
}

#[test]
fn calibrate_recovers_synthetic_camera() {
    let d = tempfile::tempdir().unwrap();
    let rig = StereoRig::example();
    let poses = random_board_poses(&board(), 12, (450.0, 800.0), 3);
    let (ir, _) = rig.views(&board(), &poses, 0.0, 0).unwrap();
    let csv = write_views(d.path(), "ir.csv", &ir);
    let out_dir = d.path().join("cal");
    let out = ok(smokesight(&["calibrate", "--corners", s(&csv), "--out-dir", s(&out_dir)]));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("v11"), "{table}");
    let cal = CalibrationResult::load(&out_dir.join("calibration.json")).unwrap();
    assert!(cal.rms_reprojection < 0.05);
    assert!((cal.intrinsics.fx / 600.0 - 1.0).abs() < 5e-3);
    let m = manifest(&out_dir);
    assert_eq!(m["subcommand"], "calibrate");
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert!(m["outputs"].as_array().unwrap().iter().any(|o| o == "calibration.json"));
    assert!(m["timings"]["total"].as_f64().unwrap() > 0.0);
}

#[test]
fn calibrate_validation_and_numerical_failures() {
    let d = tempfile::tempdir().unwrap();
    let poses = random_board_poses(&board(), 3, (450.0, 800.0), 3);
    let (views, _) = StereoRig::example().views(&board(), &poses, 0.0, 0).unwrap();
    let out_dir = d.path().join("o");

    let two = write_views(d.path(), "two.csv", &views[..2]);
    let out = smokesight(&["calibrate", "--corners", s(&two), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("at least 3 views required"), "{}", stderr(&out));

    let bad = d.path().join("bad.csv");
    std::fs::write(&bad, "view_id,corner_index,u,v\nv0,0,1.0,2.0\nv0,1,oops,2.0\n").unwrap();
    let out = smokesight(&["calibrate", "--corners", s(&bad), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad.csv:3"), "{}", stderr(&out));

    let mut same = vec![views[0].clone(), views[0].clone(), views[1].clone()];
    same[1].view_id = "copy".into();
    let same = write_views(d.path(), "same.csv", &same);
    let out = smokesight(&["calibrate", "--corners", s(&same), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("v0") && stderr(&out).contains("copy"), "{}", stderr(&out));

    let missing = d.path().join("nope.csv");
    assert_eq!(code(&smokesight(&["calibrate", "--corners", s(&missing), "--out-dir", s(&out_dir)])), 2);
    assert_eq!(code(&smokesight(&["calibrate", "--out-dir", s(&out_dir)])), 2);
    assert_eq!(code(&smokesight(&["calibrate", "--corners", s(&same), "--rows", "x"])), 2);
    assert_eq!(code(&smokesight(&["calibrate", "--no-such-flag"])), 2);
}

/// Calibrations, corner files and chessboard renders for a rig.
struct RigFixture {
    ir_cal: PathBuf,
    th_cal: PathBuf,
    ir_corners: PathBuf,
    th_corners: PathBuf,
    ir_png: PathBuf,
    th_png: PathBuf,
}

fn rig_fixture(dir: &Path, rig: &StereoRig) -> RigFixture {
    let spec = board();
    let poses = random_board_poses(&spec, 12, (450.0, 800.0), 5);
    let (ir, th) = rig.views(&spec, &poses, 0.0, 0).unwrap();
    let mut cal_paths = Vec::new();
    for (name, views) in [("ir", &ir), ("thermal", &th)] {
        let csv = write_views(dir, &format!("{name}_cal.csv"), views);
        let out = dir.join(format!("{name}_cal"));
        ok(smokesight(&["calibrate", "--corners", s(&csv), "--out-dir", s(&out)]));
        cal_paths.push(out.join("calibration.json"));
    }
    // The shared view used for registration: board centered and close.
    let shared = random_board_poses(&spec, 1, (500.0, 520.0), 11)[0];
    let (ir_v, th_v) = rig.views(&spec, &[shared], 0.0, 0).unwrap();
    let (ir_img, _) = render_chessboard(&rig.ir.0, &rig.ir.1, &shared, &spec, rig.width, rig.height, "s").unwrap();
    let th_pose = rig.thermal_pose(&shared);
    let (th_img, _) =
        render_chessboard(&rig.thermal.0, &rig.thermal.1, &th_pose, &spec, rig.width, rig.height, "s").unwrap();
    let (ir_png, th_png) = (dir.join("ir.png"), dir.join("thermal.png"));
    ir_img.save_png(&ir_png).unwrap();
    th_img.save_png(&th_png).unwrap();
    RigFixture {
        ir_cal: cal_paths[0].clone(),
        th_cal: cal_paths[1].clone(),
        ir_corners: write_views(dir, "ir_shared.csv", &ir_v),
        th_corners: write_views(dir, "th_shared.csv", &th_v),
        ir_png,
        th_png,
    }
}

fn align_args<'a>(f: &'a RigFixture, out: &'a Path) -> Vec<&'a str> {
    vec![
        "align",
        "--ir-calibration",
        s(&f.ir_cal),
        "--thermal-calibration",
        s(&f.th_cal),
        "--ir-corners",
        s(&f.ir_corners),
        "--thermal-corners",
        s(&f.th_corners),
        "--ir-image",
        s(&f.ir_png),
        "--thermal-image",
        s(&f.th_png),
        "--out-dir",
        s(out),
    ]
}

#[test]
fn align_synthetic_rig() {
    let d = tempfile::tempdir().unwrap();
    let f = rig_fixture(d.path(), &StereoRig::example());
    let out = d.path().join("aligned");
    ok(smokesight(&align_args(&f, &out)));
    let m = manifest(&out);
    let dev = m["results"]["corner_deviation_max_px"].as_f64().unwrap();
    assert!(dev < 0.5, "{dev}");
    for name in ["homography.txt", "overlay.png", "ir_aligned.png", "thermal_aligned.png", "thermal_warped.png"] {
        assert!(out.join(name).exists(), "{name}");
    }
    Homography::load(&out.join("homography.txt")).unwrap();
}

#[test]
fn align_identity_rig_gives_identity_homography() {
    let d = tempfile::tempdir().unwrap();
    let rig = StereoRig::example();
    let twin = StereoRig {
        thermal: rig.ir,
        thermal_from_ir: smokesight::geometry::Pose::identity(),
        ..rig
    };
    let f = rig_fixture(d.path(), &twin);
    // Same calibration for both cameras, so the undistorted corners coincide.
    let out = d.path().join("aligned");
    let mut args = align_args(&f, &out);
    args[4] = s(&f.ir_cal);
    ok(smokesight(&args));
    let h = Homography::load(&out.join("homography.txt")).unwrap();
    assert!(h.distance(&Homography::identity()) < 1e-6, "{h}");
}

#[test]
fn align_failure_paths() {
    let d = tempfile::tempdir().unwrap();
    let f = rig_fixture(d.path(), &StereoRig::example());
    let out = d.path().join("aligned");
    let mut args = align_args(&f, &out);
    let missing = d.path().join("missing.json");
    args[2] = s(&missing);
    assert_eq!(code(&smokesight(&args)), 2);

    // Thermal corners 5000 px to the left: the warped thermal frame lands
    // entirely right of the IR frame.
    let pinhole = CalibrationResult {
        intrinsics: StereoRig::example().ir.0,
        distortion: Distortion::NONE,
        poses: vec![],
        rms_reprojection: 0.0,
    };
    let cal = d.path().join("pinhole.json");
    pinhole.save(&cal).unwrap();
    let ir_view = smokesight::calibration::read_corner_csv(&f.ir_corners).unwrap();
    let shifted: Vec<CornerObservations> = ir_view
        .iter()
        .map(|v| CornerObservations {
            view_id: v.view_id.clone(),
            corners: v.corners.iter().map(|p| PixelPoint::new(p.u - 5000.0, p.v)).collect(),
        })
        .collect();
    let far = write_views(d.path(), "far.csv", &shifted);
    let mut args = align_args(&f, &out);
    args[2] = s(&cal);
    args[4] = s(&cal);
    args[8] = s(&far);
    let o = smokesight(&args);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("no overlap"), "{}", stderr(&o));
}

fn synth(dir: &Path, frames: &str, seed: &str) -> PathBuf {
    ok(smokesight(&[
        "synth", "--frames", frames, "--seed", seed, "--size", "64", "--out-dir", s(dir),
    ]));
    dir.join("dataset")
}

#[test]
fn synth_is_byte_identical_and_replayable() {
    let d = tempfile::tempdir().unwrap();
    let a = synth(&d.path().join("a"), "10", "7");
    let b = synth(&d.path().join("b"), "10", "7");
    let ta = tree(&a);
    assert_eq!(ta.len(), 31);
    assert_eq!(ta, tree(&b));
    let m = manifest(&d.path().join("a"));
    assert_eq!(m["config"]["seed"], "7");
    let replay = d.path().join("r");
    ok(smokesight(&["replay", s(&d.path().join("a/run_manifest.json")), "--out-dir", s(&replay)]));
    assert_eq!(ta, tree(&replay.join("dataset")));
    assert_ne!(ta, tree(&synth(&d.path().join("c"), "10", "8")));
}

#[test]
fn config_file_precedence_and_rejection() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.ini");
    std::fs::write(&cfg, "seed = 3\n[synth]\nframes = 2\nsize = 64\n[train]\nepochs = 1\n").unwrap();
    let out = d.path().join("o");
    ok(smokesight(&["synth", "--config", s(&cfg), "--frames", "3", "--out-dir", s(&out)]));
    let m = manifest(&out);
    assert_eq!(m["config"]["frames"], "3");
    assert_eq!(m["config"]["size"], "64");
    assert_eq!(m["config"]["seed"], "3");
    assert_eq!(m["results"]["frames"], 3);
    // The echoed config reproduces the run.
    let echoed = std::fs::read_to_string(out.join("config.ini")).unwrap();
    assert!(echoed.starts_with("[synth]\n") && echoed.contains("frames = 3\n"), "{echoed}");

    for text in ["[synth]\nframes = 2\nbogus = 1\n", "[sinth]\nframes = 2\n", "epochs = 3\n"] {
        std::fs::write(&cfg, text).unwrap();
        let o = smokesight(&["synth", "--config", s(&cfg), "--out-dir", s(&out)]);
        assert_eq!(code(&o), 2, "{text}");
    }
    let o = smokesight(&["synth", "--config", s(&d.path().join("none.ini"))]);
    assert_eq!(code(&o), 2);
    let o = smokesight(&["synth", "--recipe", "foggy", "--out-dir", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("foggy"));
}

#[test]
fn help_documents_every_key() {
    let out = ok(smokesight(&["train", "--help"]));
    let text = String::from_utf8(out.stdout).unwrap();
    for k in ["--seed", "--out-dir", "--data", "--epochs", "--batch-size", "--lr", "--mode", "--width-multiplier"] {
        assert!(text.contains(k), "{k}");
    }
    assert_eq!(code(&smokesight(&[])), 2);
}

fn perfect_detections(data: &Path, path: &Path) {
    let paths = DatasetPaths::new(data);
    let mut text = String::new();
    for id in list_frames(data).unwrap() {
        let f = read_frame(&paths, &id).unwrap();
        let fd = FrameDetections {
            frame: id,
            boxes: f
                .boxes
                .iter()
                .map(|b| {
                    let bb = b.bbox();
                    let (cx, cy) = bb.center();
                    OutputBox {
                        cx,
                        cy,
                        w: bb.width(),
                        h: bb.height(),
                        score: 0.9,
                    }
                })
                .collect(),
        };
        text.push_str(&serde_json::to_string(&fd).unwrap());
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let d = tempfile::tempdir().unwrap();
    let data = synth(&d.path().join("s"), "8", "1");
    let dets = d.path().join("dets.jsonl");
    perfect_detections(&data, &dets);
    let out = d.path().join("e");
    let o = ok(smokesight(&[
        "eval", "--detections", s(&dets), "--data", s(&data), "--split", "all", "--out-dir", s(&out),
    ]));
    assert!(String::from_utf8(o.stdout).unwrap().contains("mAP@0.5:0.95"));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for k in ["precision", "recall", "f1", "avg_iou", "map_50", "map_50_95"] {
        assert_eq!(r[k].as_f64().unwrap(), 1.0, "{k}");
    }
    assert!(out.join("report.txt").exists());

    std::fs::write(&dets, "{\"frame\": \"frame_00000\", \"boxes\": []}\nnot json\n").unwrap();
    let o = smokesight(&["eval", "--detections", s(&dets), "--data", s(&data), "--split", "all", "--out-dir", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dets.jsonl:2"), "{}", stderr(&o));
}

#[test]
fn train_detect_eval_bench_and_replay() {
    let d = tempfile::tempdir().unwrap();
    let data = synth(&d.path().join("s"), "12", "2");
    let train_dir = d.path().join("t");
    let train_args = [
        "train",
        "--data",
        s(&data),
        "--split",
        "all",
        "--eval-split",
        "all",
        "--input-size",
        "64",
        "--width-multiplier",
        "0.25",
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--seed",
        "5",
        "--out-dir",
        s(&train_dir),
    ];
    ok(smokesight(&train_args));
    let csv = std::fs::read_to_string(train_dir.join("loss_curve.csv")).unwrap();
    assert!(csv.starts_with("epoch,loss_total,loss_loc,loss_obj,loss_cls\n"));
    assert_eq!(csv.lines().count(), 3);
    let m = manifest(&train_dir);
    assert_eq!(m["results"]["epochs"].as_array().unwrap().len(), 2);
    assert!(m["results"]["final_metrics"]["report"]["map_50"].is_number());

    let replay = d.path().join("t2");
    ok(smokesight(&["replay", s(&train_dir.join("run_manifest.json")), "--out-dir", s(&replay)]));
    for f in ["model.fvw", "model.json", "loss_curve.csv"] {
        let (a, b) = (std::fs::read(train_dir.join(f)).unwrap(), std::fs::read(replay.join(f)).unwrap());
        assert!(a == b, "{f} differs after replay");
    }

    let weights = train_dir.join("model.fvw");
    let det_dir = d.path().join("d");
    ok(smokesight(&[
        "detect", "--weights", s(&weights), "--data", s(&data), "--split", "all", "--conf-threshold", "0.01",
        "--out-dir", s(&det_dir),
    ]));
    let jsonl = std::fs::read_to_string(det_dir.join("detections.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 12);
    assert!(det_dir.join("overlays/frame_00000.png").exists());

    let bench_dir = d.path().join("b");
    let o = ok(smokesight(&[
        "bench", "--weights", s(&weights), "--data", s(&data), "--split", "all", "--warmup", "1", "--measured", "3",
        "--out-dir", s(&bench_dir),
    ]));
    assert!(String::from_utf8(o.stdout).unwrap().contains("FPS"));
    let b: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(bench_dir.join("bench.json")).unwrap()).unwrap();
    assert!(b["fps"].as_f64().unwrap() > 0.0);
    assert!(b["hardware"].as_str().unwrap().contains("logical cores"));

    let eval_dir = d.path().join("e");
    ok(smokesight(&[
        "eval", "--detections", s(&det_dir.join("detections.jsonl")), "--data", s(&data), "--split", "all",
        "--bench", s(&bench_dir.join("bench.json")), "--out-dir", s(&eval_dir),
    ]));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert!(r["fps"].as_f64().unwrap() > 0.0);

    let no_sidecar = d.path().join("lonely.fvw");
    std::fs::copy(&weights, &no_sidecar).unwrap();
    let o = smokesight(&["detect", "--weights", s(&no_sidecar), "--data", s(&data), "--out-dir", s(&det_dir)]);
    assert_eq!(code(&o), 2);
    let o = smokesight(&["train", "--data", s(&d.path().join("nothing")), "--out-dir", s(&train_dir)]);
    assert_eq!(code(&o), 2);
    let o = smokesight(&["train", "--data", s(&data), "--input-size", "100", "--out-dir", s(&train_dir)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
