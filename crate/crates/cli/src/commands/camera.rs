use serde_json::json;
use smokesight::alignment::{align_pair, align_thermal_to_ir, outer_corner_correspondences};
use smokesight::calibration::{
    calibrate as run_calibration, per_view_rms, read_corner_csv, CalibrateOptions, CalibrationResult, ChessboardSpec,
    CornerObservations,
};
use smokesight::geometry::{undistort_image, undistort_point, GrayImage, PixelPoint};
use smokesight::{Error, Result};

use super::save_png;
use crate::manifest::Run;

fn board(run: &Run) -> Result<ChessboardSpec> {
    ChessboardSpec::new(run.cfg.get("rows")?, run.cfg.get("cols")?, run.cfg.get("square_size")?)
}

pub fn calibrate(run: &mut Run) -> Result<()> {
    let corners = run.input("corners")?;
    let spec = board(run)?;
    let views = read_corner_csv(&corners)?;
    let options = CalibrateOptions {
        release_k3: run.cfg.get("release_k3")?,
        ..Default::default()
    };
    let result = run.timed("calibrate", |_| run_calibration(&views, &spec, &options))?;
    let per_view = per_view_rms(&result, &views, &spec)?;
    println!("{:<24} {:>10}", "view", "rms_px");
    for (v, e) in views.iter().zip(&per_view) {
        println!("{:<24} {:>10.4}", v.view_id, e);
    }
    println!("{:<24} {:>10.4}", "all", result.rms_reprojection);
    run.write("calibration.json", result.to_json().as_bytes())?;
    run.results = json!({
        "rms_px": result.rms_reprojection,
        "per_view_rms_px": views.iter().zip(&per_view).map(|(v, e)| json!({"view": v.view_id, "rms_px": e})).collect::<Vec<_>>(),
    });
    Ok(())
}

pub fn undistort(run: &mut Run) -> Result<()> {
    let cal = CalibrationResult::load(&run.input("calibration")?)?;
    let path = run.input("image")?;
    let img = GrayImage::load_png(&path)?;
    let out = run.timed("undistort", |_| undistort_image(&img, &cal.intrinsics, &cal.distortion))?;
    let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    save_png(run, &format!("{stem}_undistorted.png"), &out)
}

fn pick_view(views: Vec<CornerObservations>, id: &str, key: &str) -> Result<CornerObservations> {
    if id.is_empty() {
        return views
            .into_iter()
            .next()
            .ok_or_else(|| Error::Config(format!("{key}: no views")));
    }
    views
        .into_iter()
        .find(|v| v.view_id == id)
        .ok_or_else(|| Error::Config(format!("{key}: no view {id:?}")))
}

/// Corners moved into the undistorted image.
fn undistort_corners(obs: &CornerObservations, cal: &CalibrationResult) -> Result<CornerObservations> {
    let k = &cal.intrinsics;
    let corners = obs
        .corners
        .iter()
        .map(|p| {
            let n = undistort_point(k.to_normalized(*p), &cal.distortion)?;
            Ok(k.to_pixel(n))
        })
        .collect::<Result<Vec<PixelPoint>>>()?;
    Ok(CornerObservations {
        view_id: obs.view_id.clone(),
        corners,
    })
}

/// Alternating tiles of the two images; misregistration shows as broken
/// edges at tile borders.
fn checker_blend(a: &GrayImage, b: &GrayImage, tile: usize) -> GrayImage {
    GrayImage::from_fn(a.width(), a.height(), |x, y| {
        if (x / tile + y / tile).is_multiple_of(2) {
            a.get(x, y)
        } else {
            b.get(x, y)
        }
    })
}

pub fn align(run: &mut Run) -> Result<()> {
    let ir_cal = CalibrationResult::load(&run.input("ir_calibration")?)?;
    let th_cal = CalibrationResult::load(&run.input("thermal_calibration")?)?;
    let view = run.cfg.str("view").to_string();
    let ir_obs = pick_view(read_corner_csv(&run.input("ir_corners")?)?, &view, "ir_corners")?;
    let th_obs = pick_view(read_corner_csv(&run.input("thermal_corners")?)?, &view, "thermal_corners")?;
    let ir_raw = GrayImage::load_png(&run.input("ir_image")?)?;
    let th_raw = GrayImage::load_png(&run.input("thermal_image")?)?;
    let spec = board(run)?;
    let tile: usize = run.cfg.get("checker")?;
    if tile == 0 {
        return Err(Error::Config("checker must be positive".into()));
    }

    let (ir, th, h, aligned) = run.timed("align", |_| {
        let ir = undistort_image(&ir_raw, &ir_cal.intrinsics, &ir_cal.distortion)?;
        let th = undistort_image(&th_raw, &th_cal.intrinsics, &th_cal.distortion)?;
        let ir_u = undistort_corners(&ir_obs, &ir_cal)?;
        let th_u = undistort_corners(&th_obs, &th_cal)?;
        let h = outer_corner_correspondences(&ir_u, &th_u, &spec)?.thermal_to_ir()?;
        let aligned = align_pair(&ir, &th, &h)?;
        Ok((ir, th, h, (aligned, ir_u, th_u)))
    })?;
    let (aligned, ir_u, th_u) = aligned;

    // Every board corner, not just the four used for the fit.
    let dev = ir_u
        .corners
        .iter()
        .zip(&th_u.corners)
        .map(|(a, t)| h.apply(*t).map(|p| p.distance(a)))
        .collect::<Result<Vec<f64>>>()?;
    let max_dev = dev.iter().cloned().fold(0.0, f64::max);
    let mean_dev = dev.iter().sum::<f64>() / dev.len() as f64;
    println!("corner deviation after alignment: mean {mean_dev:.4} px, max {max_dev:.4} px");

    run.write("homography.txt", h.to_string().as_bytes())?;
    save_png(run, "ir_undistorted.png", &ir)?;
    save_png(run, "thermal_undistorted.png", &th)?;
    save_png(run, "thermal_warped.png", &align_thermal_to_ir(&th, &h, ir.dims())?)?;
    save_png(run, "ir_aligned.png", &aligned.ir)?;
    save_png(run, "thermal_aligned.png", &aligned.thermal_warped)?;
    save_png(run, "overlay.png", &checker_blend(&aligned.ir, &aligned.thermal_warped, tile))?;
    run.results = json!({
        "thermal_to_ir": h.row_major(),
        "crop": aligned.crop,
        "corner_deviation_mean_px": mean_dev,
        "corner_deviation_max_px": max_dev,
    });
    Ok(())
}
