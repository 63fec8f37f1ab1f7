use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use smokesight::alignment::align_pair;
use smokesight::boxes::{iou, BBox};
use smokesight::calibration::ChessboardSpec;
use smokesight::evalkit::{average_precision, FrameEval, ScoredBox};
use smokesight::geometry::{distort, Distortion, GrayImage, Intrinsics, NormalizedPoint, Pose};
use smokesight::synth::*;

fn person(cx: f64, cy: f64, height: f64, posture: Posture) -> HumanSpec {
    HumanSpec {
        cx,
        cy,
        height,
        posture,
    }
}

fn one_person(smoke: f64) -> SceneSpec {
    let mut s = SceneSpec::empty(128, 128, 11);
    s.humans.push(person(60.0, 66.0, 56.0, Posture::Standing));
    s.smoke_density = smoke;
    s
}

/// |mean over the figure − mean over clear background|.
fn contrast(img: &GrayImage, mask: &[f64]) -> f64 {
    let (mut f, mut nf, mut b, mut nb) = (0.0, 0, 0.0, 0);
    for (p, &m) in img.pixels().iter().zip(mask) {
        if m >= 0.99 {
            f += *p as f64;
            nf += 1;
        } else if m == 0.0 {
            b += *p as f64;
            nb += 1;
        }
    }
    (f / nf as f64 - b / nb as f64).abs()
}

#[test]
fn heavy_smoke_blinds_ir_but_not_thermal() {
    let spec = one_person(0.0);
    let mask = figure_mask(&spec.humans[0], 128, 128);
    let clear = render_pair(&spec).unwrap();
    let smoky = render_pair(&one_person(1.0)).unwrap();
    let (c0, c1) = (contrast(&clear.ir, &mask), contrast(&smoky.ir, &mask));
    assert!(c1 < 0.2 * c0, "{c1} vs {c0}");
    assert_eq!(clear.thermal, smoky.thermal);
}

#[test]
fn empty_scene_thermal_is_background() {
    let mut s = SceneSpec::empty(128, 128, 3);
    s.noise_sigma = 0.02;
    let r = render_pair(&s).unwrap();
    assert!(r.thermal.max() < 0.2, "{}", r.thermal.max());
    assert!(r.gt_boxes.is_empty());
}

#[test]
fn same_seed_same_pixels() {
    let cfg = GeneratorConfig::default();
    for i in 0..4 {
        let a = render_pair(&sample_scene(&cfg, i)).unwrap();
        let b = render_pair(&sample_scene(&cfg, i)).unwrap();
        assert_eq!(a, b);
    }
    let other = GeneratorConfig {
        master_seed: 1,
        ..cfg
    };
    assert_ne!(sample_scene(&cfg, 0), sample_scene(&other, 0));
}

/// Box of pixels brighter than the midpoint between background and figure.
fn bright_box(img: &GrayImage, thr: f32) -> Option<BBox> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for y in 0..img.height() {
        for x in 0..img.width() {
            if img.get(x, y) > thr {
                b = Some(match b {
                    None => (x, y, x, y),
                    Some((a, c, d, e)) => (a.min(x), c.min(y), d.max(x), e.max(y)),
                });
            }
        }
    }
    b.map(|(a, c, d, e)| BBox::new(a as f64, c as f64, (d + 1) as f64, (e + 1) as f64))
}

#[test]
fn boxes_bound_the_rendered_figure_in_both_modalities() {
    for posture in Posture::ALL {
        let mut s = SceneSpec::empty(128, 128, 5);
        s.humans.push(person(63.0, 61.0, 50.0, posture));
        let r = render_pair(&s).unwrap();
        let gt = r.gt_boxes[0].bbox();
        let ir_box = bright_box(&r.ir, 0.45).unwrap();
        assert!(iou(&gt, &ir_box) >= 0.95, "{posture:?}: {gt:?} vs {ir_box:?}");
        // After alignment the thermal figure lines up with the same label;
        // 0.33 is halfway between background and the coolest limbs.
        let aligned = align_pair(&r.ir, &r.thermal, &r.gt_homography).unwrap();
        let moved = smokesight::alignment::propagate_labels(&[gt], &aligned.crop, 0.2)[0];
        let th_box = bright_box(&aligned.thermal_warped, 0.33).unwrap();
        assert!(iou(&moved, &th_box) > 0.95, "{posture:?}: {moved:?} vs {th_box:?}");
    }
}

#[test]
fn aligned_thermal_centroid_matches_ir() {
    let mut s = SceneSpec::empty(128, 128, 9);
    s.humans.push(person(40.0, 50.0, 40.0, Posture::ArmsRaised));
    s.humans.push(person(95.0, 70.0, 44.0, Posture::Standing));
    let r = render_pair(&s).unwrap();
    let aligned = align_pair(&r.ir, &r.thermal, &r.gt_homography).unwrap();
    let c = aligned.crop;
    for h in &s.humans {
        let mask = figure_mask(h, 128, 128);
        let (mut ix, mut iy, mut iw) = (0.0, 0.0, 0.0);
        let (mut tx, mut ty, mut tw) = (0.0, 0.0, 0.0);
        for y in 0..c.height {
            for x in 0..c.width {
                if mask[(y + c.y) * 128 + x + c.x] < 0.5 {
                    continue;
                }
                let a = aligned.ir.get(x, y) as f64;
                let t = aligned.thermal_warped.get(x, y) as f64;
                ix += a * x as f64;
                iy += a * y as f64;
                iw += a;
                tx += t * x as f64;
                ty += t * y as f64;
                tw += t;
            }
        }
        let d = ((ix / iw - tx / tw).powi(2) + (iy / iw - ty / tw).powi(2)).sqrt();
        assert!(d < 1.0, "{d}");
    }
}

#[test]
fn chessboard_corners_follow_the_distortion_model() {
    let k = Intrinsics::new(600.0, 610.0, 320.0, 240.0).unwrap();
    let spec = ChessboardSpec::new(6, 9, 25.0).unwrap();
    let pose = Pose::from_axis_angle(Vector3::new(0.1, -0.15, 0.05), Vector3::new(-100.0, -60.0, 600.0));
    let d = Distortion {
        k1: -0.3,
        ..Distortion::default()
    };
    let (_, ideal) = render_chessboard(&k, &Distortion::NONE, &pose, &spec, 640, 480, "a").unwrap();
    let (img, bent) = render_chessboard(&k, &d, &pose, &spec, 640, 480, "b").unwrap();
    assert_eq!(bent.corners.len(), 54);
    assert_eq!(img.dims(), (640, 480));
    let mut inward = 0;
    for (a, b) in ideal.corners.iter().zip(&bent.corners) {
        let n = k.to_normalized(*a);
        let want = k.to_pixel(distort(NormalizedPoint::new(n.x, n.y), &d));
        assert!(want.distance(b) < 1e-9);
        let (ra, rb) = ((a.u - 320.0).hypot(a.v - 240.0), (b.u - 320.0).hypot(b.v - 240.0));
        if rb < ra {
            inward += 1;
        }
    }
    assert_eq!(inward, 54);
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["", "ir", "thermal", "labels"] {
        for e in std::fs::read_dir(root.join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn dataset_layout_and_byte_identical_regeneration() {
    let cfg = GeneratorConfig {
        master_seed: 7,
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = make_dataset(10, &cfg, a.path()).unwrap();
    make_dataset(10, &cfg, b.path()).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert_eq!(ta, tb);
    for d in ["ir", "thermal", "labels"] {
        assert_eq!(ta.keys().filter(|k| k.starts_with(d)).count(), 10);
    }
    assert!(ta.contains_key(MANIFEST_FILE));
    assert_eq!(DatasetManifest::load(a.path()).unwrap(), m);
    let frame = smokesight::alignment::read_frame(&smokesight::alignment::DatasetPaths::new(a.path()), "frame_00003").unwrap();
    assert_eq!(frame.boxes.len(), m.frames[3].boxes);
}

#[test]
fn split_is_roughly_70_15_15() {
    let ids: Vec<String> = (0..3000).map(frame_id).collect();
    let mut n = [0usize; 3];
    for id in &ids {
        n[split_of(0, id) as usize] += 1;
    }
    assert!((n[0] as f64 / 3000.0 - 0.70).abs() < 0.03, "{n:?}");
    assert!((n[1] as f64 / 3000.0 - 0.15).abs() < 0.03, "{n:?}");
    assert!((n[2] as f64 / 3000.0 - 0.15).abs() < 0.03, "{n:?}");
}

/// Strawman: 4-connected bright regions of at least 30 pixels, scored by
/// their mean brightness.
fn threshold_detector(img: &GrayImage, thr: f32) -> Vec<ScoredBox> {
    let (w, h) = img.dims();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        if seen[start] || img.pixels()[start] <= thr {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let (mut x0, mut y0, mut x1, mut y1, mut sum, mut n) = (w, h, 0, 0, 0.0, 0);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            sum += img.pixels()[i] as f64;
            n += 1;
            let mut push = |j: usize| {
                if !seen[j] && img.pixels()[j] > thr {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        if n >= 30 {
            out.push(ScoredBox::new(
                BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64),
                sum / n as f64,
            ));
        }
    }
    out
}

#[test]
fn corruptions_hurt_the_intended_modality() {
    let cfg = GeneratorConfig {
        recipe: Recipe::Complementary,
        master_seed: 3,
        ..Default::default()
    };
    // Index parity selects heavy smoke (even) or heat glare (odd).
    let mut groups: [[Vec<FrameEval>; 2]; 2] = Default::default();
    for i in 0..40 {
        let f = make_frame(&sample_scene(&cfg, i)).unwrap();
        let gt: Vec<BBox> = f.boxes.iter().map(|b| b.bbox()).collect();
        for (m, img) in [&f.pair.ir, &f.pair.thermal_warped].into_iter().enumerate() {
            groups[m][i % 2].push(FrameEval {
                detections: threshold_detector(img, 0.45),
                ground_truth: gt.clone(),
            });
        }
    }
    let ap = |g: &Vec<FrameEval>| average_precision(g, 0.5).ap;
    let (ir_smoke, ir_heat) = (ap(&groups[0][0]), ap(&groups[0][1]));
    let (th_smoke, th_heat) = (ap(&groups[1][0]), ap(&groups[1][1]));
    assert!(ir_smoke + 0.2 < ir_heat, "IR: smoke {ir_smoke}, heat {ir_heat}");
    assert!(th_heat + 0.2 < th_smoke, "thermal: smoke {th_smoke}, heat {th_heat}");
}
