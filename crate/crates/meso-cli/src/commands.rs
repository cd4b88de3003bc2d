//! The four CLI commands: reconstruct, synth, eval, inspect-distortion.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use meso_core::dipnet::Network;
use meso_core::distortion::RadialUndistortion;
use meso_core::geometry::{AutofocusContext, Vec2};
use meso_core::pipeline::{self, Dataset, PipelineError, RunConfig};
use meso_core::synthlab::{self, PhantomSpec, Plateau, PoseJitter, SensorGeometry};

use crate::formats::{
    manifest_from_str, manifest_to_string, parse_key_values, read_file, read_rgb_image,
    recon_from_bytes, recon_to_bytes, write_file, write_height_preview, write_profile_plot,
    write_rgb_png, Checkpoint, HeightMapFile, MaskFile,
};
use crate::CliError;

fn pipeline_error(e: PipelineError) -> CliError {
    match e {
        PipelineError::Config(msg) => {
            if msg.contains("magnification") {
                CliError::usage("magnification required (set `magnification` in the config)")
            } else {
                CliError::usage(format!("configuration: {msg}"))
            }
        }
        PipelineError::Dataset(msg) => CliError::data(format!("dataset: {msg}")),
        other => CliError::numerical(format!("{other}")),
    }
}

/// `meso reconstruct --config <file>`: run the full optimization and
/// write the orthomosaic, height map, manifest, progress log, preview,
/// and checkpoint into the output directory.
pub fn cmd_reconstruct(config_path: &Path) -> Result<(), CliError> {
    let text = String::from_utf8(read_file(config_path)?)
        .map_err(|_| CliError::usage("config file is not UTF-8"))?;
    let mut cfg = RunConfig::default();
    let mut input_dir: Option<PathBuf> = None;
    let mut output_dir: Option<PathBuf> = None;
    let mut input_downsample = 1usize;
    for (key, value) in parse_key_values(&text)? {
        match key.as_str() {
            "input_dir" => input_dir = Some(PathBuf::from(&value)),
            "output_dir" => output_dir = Some(PathBuf::from(&value)),
            "input_downsample" => {
                input_downsample = value
                    .parse()
                    .map_err(|_| CliError::usage("bad input_downsample"))?
            }
            _ => {
                let consumed = cfg
                    .apply_key(&key, &value)
                    .map_err(|e| CliError::usage(format!("{e}")))?;
                if !consumed {
                    return Err(CliError::usage(format!("unknown config key `{key}`")));
                }
            }
        }
    }
    let input_dir = input_dir.ok_or_else(|| CliError::usage("config needs `input_dir`"))?;
    let output_dir = output_dir.ok_or_else(|| CliError::usage("config needs `output_dir`"))?;
    if cfg.magnification <= 0.0 {
        return Err(CliError::usage(
            "magnification required (set `magnification` in the config)",
        ));
    }

    // Load frames in filename order.
    let mut paths: Vec<PathBuf> = fs::read_dir(&input_dir)
        .map_err(|e| CliError::data(format!("{}: {e}", input_dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("ppm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::data(format!(
            "no PNG or PPM frames in {}",
            input_dir.display()
        )));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let mut frame = read_rgb_image(p)?;
        if input_downsample > 1 {
            frame = pipeline::downsample_frame(&frame, input_downsample);
        }
        frames.push(frame);
    }
    if input_downsample > 1 {
        cfg.sensor_pitch_mm *= input_downsample as f64;
    }
    let dataset = Dataset {
        frames,
        sensor_pitch_mm: cfg.sensor_pitch_mm,
    };

    fs::create_dir_all(&output_dir)
        .map_err(|e| CliError::data(format!("{}: {e}", output_dir.display())))?;
    let mut log = fs::File::create(output_dir.join("run.log"))
        .map_err(|e| CliError::data(format!("run.log: {e}")))?;

    let out = pipeline::run(&dataset, &cfg, &mut |p| {
        let _ = writeln!(
            log,
            "iter={} stage={} loss={:.6e} rgb_mse={:.6e} h_mse={:.6e} tv={:.6e}",
            p.iteration, p.stage_factor, p.loss, p.rgb_mse, p.h_mse, p.tv
        );
    })
    .map_err(pipeline_error)?;

    let recon = &out.recon;
    let plane = recon.plane();
    write_rgb_png(
        &output_dir.join("orthomosaic.png"),
        recon.rows,
        recon.cols,
        [recon.rgb_plane(0), recon.rgb_plane(1), recon.rgb_plane(2)],
    )?;
    let heights = HeightMapFile {
        rows: recon.rows,
        cols: recon.cols,
        pitch_mm: recon.pitch,
        origin: recon.origin,
        data: recon.data[3 * plane..].to_vec(),
    };
    write_file(&output_dir.join("heights.mesoh"), &heights.to_bytes())?;
    write_height_preview(
        &output_dir.join("height_preview.png"),
        recon.rows,
        recon.cols,
        recon.height_plane(),
        &recon.visited,
    )?;
    let manifest = manifest_to_string(&out.params);
    write_file(&output_dir.join("manifest.txt"), manifest.as_bytes())?;
    let checkpoint = Checkpoint {
        manifest,
        network: out.net.to_bytes(),
        recon: recon_to_bytes(recon),
    };
    write_file(&output_dir.join("checkpoint.bin"), &checkpoint.to_bytes())?;

    println!(
        "reconstructed {} frames -> {} ({} x {} cells, {:.1} um/cell)",
        dataset.frames.len(),
        output_dir.display(),
        recon.rows,
        recon.cols,
        recon.pitch * 1e3
    );
    println!(
        "diagnostics: dropped={} clamped={} skipped={} monotonicity_violations={}",
        out.diagnostics.dropped_samples,
        out.diagnostics.clamped_radii,
        out.diagnostics.skipped_steps,
        out.diagnostics.monotonicity_violations
    );
    Ok(())
}

/// Parsed synthesis specification (scene, plateaus, capture).
struct SynthSpec {
    phantom: PhantomSpec,
    frames: usize,
    width_px: usize,
    height_px: usize,
    sensor_pitch_mm: f64,
    f_eff_mm: f64,
    z_mm: f64,
    span_x_mm: f64,
    span_y_mm: f64,
    jitter: PoseJitter,
    distortion: String,
    noise_sigma: f32,
    seed: u64,
}

fn parse_synth_spec(text: &str) -> Result<SynthSpec, CliError> {
    let mut spec = SynthSpec {
        phantom: PhantomSpec {
            width_mm: 26.0,
            height_mm: 15.0,
            pitch_mm: 0.0,
            plateaus: Vec::new(),
            seed: 0,
        },
        frames: 10,
        width_px: 252,
        height_px: 189,
        sensor_pitch_mm: 0.0028,
        f_eff_mm: 4.3,
        z_mm: 75.0,
        span_x_mm: 11.6,
        span_y_mm: 2.6,
        jitter: PoseJitter::moderate(),
        distortion: "none".to_string(),
        noise_sigma: 0.0,
        seed: 1,
    };
    for (key, value) in parse_key_values(text)? {
        let bad = |k: &str| CliError::usage(format!("bad value for `{k}`"));
        match key.as_str() {
            "frames" => spec.frames = value.parse().map_err(|_| bad(&key))?,
            "width_px" => spec.width_px = value.parse().map_err(|_| bad(&key))?,
            "height_px" => spec.height_px = value.parse().map_err(|_| bad(&key))?,
            "sensor_pitch_mm" => spec.sensor_pitch_mm = value.parse().map_err(|_| bad(&key))?,
            "f_eff_mm" => spec.f_eff_mm = value.parse().map_err(|_| bad(&key))?,
            "z_mm" => spec.z_mm = value.parse().map_err(|_| bad(&key))?,
            "scene_width_mm" => spec.phantom.width_mm = value.parse().map_err(|_| bad(&key))?,
            "scene_height_mm" => spec.phantom.height_mm = value.parse().map_err(|_| bad(&key))?,
            "span_x_mm" => spec.span_x_mm = value.parse().map_err(|_| bad(&key))?,
            "span_y_mm" => spec.span_y_mm = value.parse().map_err(|_| bad(&key))?,
            "seed" => {
                spec.seed = value.parse().map_err(|_| bad(&key))?;
                spec.phantom.seed = spec.seed;
            }
            "noise_sigma" => spec.noise_sigma = value.parse().map_err(|_| bad(&key))?,
            "jitter" => {
                spec.jitter = match value.as_str() {
                    "none" => PoseJitter::none(),
                    "moderate" => PoseJitter::moderate(),
                    _ => return Err(bad(&key)),
                }
            }
            "distortion" => spec.distortion = value,
            "plateau" => {
                let vals: Vec<f64> = value
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| bad("plateau")))
                    .collect::<Result<_, _>>()?;
                if vals.len() != 5 {
                    return Err(CliError::usage(
                        "plateau needs: center-x center-y width height elevation-um",
                    ));
                }
                spec.phantom.plateaus.push(Plateau {
                    center: Vec2::new(vals[0], vals[1]),
                    width: vals[2],
                    height: vals[3],
                    elevation_um: vals[4],
                });
            }
            other => return Err(CliError::usage(format!("unknown spec key `{other}`"))),
        }
    }
    Ok(spec)
}

/// Ground-truth distortion profile named in a spec: `none`,
/// `barrel:<amplitude>`, or `kink:<amplitude>` (slope discontinuity at
/// 60% radius, not representable by low-order polynomials).
fn build_distortion(kind: &str, sensor: &SensorGeometry) -> Result<RadialUndistortion, CliError> {
    let mut model = RadialUndistortion::for_sensor(30, sensor.half_diagonal_px());
    let max_r = model.max_radius();
    let delta = model.delta_r();
    if kind == "none" {
        return Ok(model);
    }
    let (name, amp) = kind.split_once(':').unwrap_or((kind, "0.05"));
    let amp: f64 = amp
        .parse()
        .map_err(|_| CliError::usage("bad distortion amplitude"))?;
    for i in 0..model.node_count() {
        let u = i as f64 * delta / max_r;
        model.samples_mut()[i] = match name {
            "barrel" => 1.0 - amp * u * u,
            "kink" => {
                if u <= 0.6 {
                    1.0
                } else {
                    1.0 - amp * (u - 0.6) / 0.4
                }
            }
            other => {
                return Err(CliError::usage(format!(
                    "unknown distortion `{other}` (none, barrel:<amp>, kink:<amp>)"
                )))
            }
        };
    }
    if !model.is_monotone() {
        return Err(CliError::usage("distortion amplitude too large (not invertible)"));
    }
    Ok(model)
}

/// `meso synth --spec <file> --out <dir>`: render a synthetic dataset
/// with ground truth.
pub fn cmd_synth(spec_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let text = String::from_utf8(read_file(spec_path)?)
        .map_err(|_| CliError::usage("spec file is not UTF-8"))?;
    let mut spec = parse_synth_spec(&text)?;

    let f_ph = 1.0 / (1.0 / spec.f_eff_mm - 1.0 / spec.z_mm);
    let m0 = f_ph / spec.z_mm;
    let ctx = AutofocusContext::new(spec.f_eff_mm, m0)
        .map_err(|e| CliError::usage(format!("{e}")))?;
    if spec.phantom.pitch_mm <= 0.0 {
        spec.phantom.pitch_mm = spec.sensor_pitch_mm / m0;
    }
    let phantom = synthlab::make_phantom(&spec.phantom)
        .map_err(|e| CliError::usage(format!("phantom: {e}")))?;
    let sensor = SensorGeometry {
        width_px: spec.width_px,
        height_px: spec.height_px,
        pitch_mm: spec.sensor_pitch_mm,
    };
    let distortion = build_distortion(&spec.distortion, &sensor)?;
    let poses = synthlab::plan_scan_poses(
        spec.frames,
        spec.span_x_mm,
        spec.span_y_mm,
        ctx.z0,
        ctx.f_ph(),
        spec.jitter,
        spec.seed ^ 0xa5a5,
    );

    let frame_dir = out_dir.join("frames");
    fs::create_dir_all(&frame_dir)
        .map_err(|e| CliError::data(format!("{}: {e}", frame_dir.display())))?;
    for (i, pose) in poses.iter().enumerate() {
        let rendered = synthlab::render_frame(
            &phantom.scene,
            pose,
            &distortion,
            &ctx,
            &sensor,
            spec.noise_sigma,
            spec.seed.wrapping_add(i as u64),
        )
        .map_err(|e| CliError::data(format!("render frame {i}: {e}")))?;
        let plane = sensor.width_px * sensor.height_px;
        write_rgb_png(
            &frame_dir.join(format!("frame_{i:03}.png")),
            sensor.height_px,
            sensor.width_px,
            [
                &rendered.rgb[..plane],
                &rendered.rgb[plane..2 * plane],
                &rendered.rgb[2 * plane..],
            ],
        )?;
    }

    // Ground truth: true parameter manifest, scene heights, masks, and
    // per-region heights.
    let params = pipeline::DeformationParams {
        poses: poses
            .iter()
            .map(|p| pipeline::PoseState {
                x: p.x,
                y: p.y,
                z: p.z,
                n_x: p.n[0],
                n_y: p.n[1],
                theta: p.theta,
            })
            .collect(),
        undist: pipeline::UndistState::Piecewise {
            nodes: distortion.samples().to_vec(),
            delta_r: distortion.delta_r(),
            center: [distortion.center.x, distortion.center.y],
        },
        ctx,
    };
    write_file(
        &out_dir.join("manifest.txt"),
        manifest_to_string(&params).as_bytes(),
    )?;
    let truth = HeightMapFile {
        rows: phantom.scene.rows,
        cols: phantom.scene.cols,
        pitch_mm: phantom.scene.pitch,
        origin: phantom.scene.origin,
        data: phantom.scene.heightfield.clone(),
    };
    write_file(&out_dir.join("truth_heights.mesoh"), &truth.to_bytes())?;
    let masks = MaskFile {
        rows: phantom.scene.rows,
        cols: phantom.scene.cols,
        pitch_mm: phantom.scene.pitch,
        origin: phantom.scene.origin,
        regions: phantom.region_count,
        data: phantom.masks.clone(),
    };
    write_file(&out_dir.join("masks.mesomask"), &masks.to_bytes())?;
    let mut regions = String::from("# region heights, mm (line index = region id)\n");
    for h in &phantom.region_heights_mm {
        let _ = writeln!(regions, "{h}");
    }
    write_file(&out_dir.join("region_heights.txt"), regions.as_bytes())?;

    // A ready-to-run reconstruction config template.
    let config = format!(
        "input_dir = {}\noutput_dir = {}\nmagnification = {}\nsensor_pitch_mm = {}\nf_eff_mm = {}\n",
        frame_dir.display(),
        out_dir.join("recon").display(),
        m0,
        spec.sensor_pitch_mm,
        spec.f_eff_mm,
    );
    write_file(&out_dir.join("recon.cfg"), config.as_bytes())?;

    println!(
        "synthesized {} frames ({} x {} px) over a {:.1} x {:.1} mm scene -> {}",
        spec.frames,
        spec.width_px,
        spec.height_px,
        spec.phantom.width_mm,
        spec.phantom.height_mm,
        out_dir.display()
    );
    Ok(())
}

/// `meso eval --estimate <mesoh> --masks <mesomask> --regions <txt>`:
/// score a height estimate against region ground truths.
pub fn cmd_eval(
    estimate_path: &Path,
    masks_path: &Path,
    regions_path: &Path,
    erode: usize,
    out_path: Option<&Path>,
) -> Result<(), CliError> {
    let estimate = HeightMapFile::from_bytes(&read_file(estimate_path)?)?;
    let masks = MaskFile::from_bytes(&read_file(masks_path)?)?;
    let regions_text = String::from_utf8(read_file(regions_path)?)
        .map_err(|_| CliError::data("region heights file is not UTF-8"))?;
    let region_heights: Vec<f64> = regions_text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse()
                .map_err(|_| CliError::data("bad region height value"))
        })
        .collect::<Result<_, _>>()?;
    if region_heights.len() != masks.regions {
        return Err(CliError::data(format!(
            "{} region heights for {} mask regions",
            region_heights.len(),
            masks.regions
        )));
    }

    // Align the estimate onto the mask grid (nearest neighbor via world
    // coordinates); unobserved cells are excluded.
    let mut aligned = vec![0.0f32; masks.rows * masks.cols];
    let mut mask_data = synthlab::erode_masks(&masks.data, masks.rows, masks.cols, erode);
    for r in 0..masks.rows {
        for c in 0..masks.cols {
            let world_x = masks.origin.x + c as f64 * masks.pitch_mm;
            let world_y = masks.origin.y + r as f64 * masks.pitch_mm;
            let ex = ((world_x - estimate.origin.x) / estimate.pitch_mm).round() as i64;
            let ey = ((world_y - estimate.origin.y) / estimate.pitch_mm).round() as i64;
            let j = r * masks.cols + c;
            if ex < 0 || ey < 0 || ex >= estimate.cols as i64 || ey >= estimate.rows as i64 {
                mask_data[j] = synthlab::MASK_EXCLUDED;
            } else {
                aligned[j] = estimate.data[ey as usize * estimate.cols + ex as usize];
            }
        }
    }

    let eval = synthlab::evaluate_heights(&aligned, &mask_data, &region_heights)
        .map_err(|e| CliError::data(format!("{e}")))?;

    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:>7} {:>8} {:>12} {:>12} {:>12}",
        "region", "cells", "mean-mm", "acc-um", "prec-um"
    );
    for r in &eval.per_region {
        let _ = writeln!(
            table,
            "{:>7} {:>8} {:>12.5} {:>12.1} {:>12.1}",
            r.region,
            r.cells,
            r.mean_mm,
            r.accuracy_mm * 1e3,
            r.precision_mm * 1e3
        );
    }
    let _ = writeln!(table, "global shift: {:+.5} mm", eval.shift_mm);
    let _ = writeln!(table, "optimal rescale: {:.4}", eval.rescale);
    print!("{table}");

    if let Some(out) = out_path {
        let mut machine = String::from("region\tcells\tmean_mm\taccuracy_mm\tprecision_mm\n");
        for r in &eval.per_region {
            let _ = writeln!(
                machine,
                "{}\t{}\t{}\t{}\t{}",
                r.region, r.cells, r.mean_mm, r.accuracy_mm, r.precision_mm
            );
        }
        let _ = writeln!(machine, "# shift_mm\t{}", eval.shift_mm);
        let _ = writeln!(machine, "# rescale\t{}", eval.rescale);
        write_file(out, machine.as_bytes())?;
    }
    Ok(())
}

/// `meso inspect-distortion --checkpoint <file> --out-dir <dir>`: dump
/// the radial profile table, principal point, and a rendered plot.
pub fn cmd_inspect_distortion(checkpoint_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let ckpt = Checkpoint::from_bytes(&read_file(checkpoint_path)?)?;
    let params = manifest_from_str(&ckpt.manifest)?;
    // The other sections must parse too, or the checkpoint is corrupt.
    Network::from_bytes(&ckpt.network).map_err(|e| CliError::data(format!("network: {e}")))?;
    let recon = recon_from_bytes(&ckpt.recon)?;

    let radial = params
        .undist
        .to_radial()
        .ok_or_else(|| CliError::data("checkpoint holds a polynomial model; no radial table"))?;
    let report = radial.fit_report();

    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::data(format!("{}: {e}", out_dir.display())))?;
    let mut table = String::from("# r-px\tmagnification\n");
    for &(r, m) in &report.profile {
        let _ = writeln!(table, "{r}\t{m}");
    }
    write_file(&out_dir.join("profile.tsv"), table.as_bytes())?;
    write_profile_plot(&out_dir.join("profile.png"), &report.profile)?;

    println!(
        "checkpoint: {} poses, reconstruction {} x {} cells at {:.1} um/cell",
        params.poses.len(),
        recon.rows,
        recon.cols,
        recon.pitch * 1e3
    );
    println!(
        "principal point: {:.1} / {:.1} px (relative to the image center)",
        report.center.x, report.center.y
    );
    println!(
        "radial profile: {} nodes, delta_r {:.2} px, magnification range [{:.4}, {:.4}]",
        report.profile.len(),
        radial.delta_r(),
        report
            .profile
            .iter()
            .map(|&(_, m)| m)
            .fold(f64::MAX, f64::min),
        report
            .profile
            .iter()
            .map(|&(_, m)| m)
            .fold(f64::MIN, f64::max),
    );
    println!("wrote {}", out_dir.join("profile.tsv").display());
    println!("wrote {}", out_dir.join("profile.png").display());
    Ok(())
}
