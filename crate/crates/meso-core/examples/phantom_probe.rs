// Tuning probe for the plateau-phantom reconstruction experiment.
use meso_core::distortion::RadialUndistortion;
use meso_core::geometry::{AutofocusContext, Vec2};
use meso_core::pipeline::{self, Dataset, InitMode, RgbFrame, RunConfig};
use meso_core::synthlab::{self, PhantomSpec, Plateau, PoseJitter, SensorGeometry};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iterations: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1200);
    let lr_cnn: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let lambda_h: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);

    let z0 = 75.0f64;
    let f_eff = 4.3f64;
    let f_ph = 1.0 / (1.0 / f_eff - 1.0 / z0);
    let ctx = AutofocusContext::new(f_eff, f_ph / z0).unwrap();
    let pitch = 0.0028f64;
    let grid_pitch = pitch / ctx.m0;

    // Six plateaus at the published card heights on a 26 x 15 mm scene.
    let plateaus: Vec<Plateau> = PhantomSpec::CARD_HEIGHTS_UM
        .iter()
        .enumerate()
        .map(|(i, &h)| Plateau {
            center: Vec2::new(
                -6.5 + 6.5 * (i % 3) as f64,
                if i < 3 { -2.6 } else { 2.6 },
            ),
            width: 2.5,
            height: 2.5,
            elevation_um: h,
        })
        .collect();
    let phantom = synthlab::make_phantom(&PhantomSpec {
        width_mm: 26.0,
        height_mm: 15.0,
        pitch_mm: grid_pitch,
        plateaus,
        seed: 101,
    })
    .unwrap();

    let sensor = SensorGeometry {
        width_px: 252,
        height_px: 189,
        pitch_mm: pitch,
    };

    // Ground-truth barrel distortion (piecewise, normalized to max 1).
    let mut true_undist = RadialUndistortion::for_sensor(30, sensor.half_diagonal_px());
    let max_r = true_undist.max_radius();
    let delta = true_undist.delta_r();
    for i in 0..true_undist.node_count() {
        let r = i as f64 * delta / max_r;
        true_undist.samples_mut()[i] = 1.0 - 0.06 * r * r;
    }
    assert!(true_undist.is_monotone());

    let poses = synthlab::plan_scan_poses(
        10,
        11.6,
        2.6,
        ctx.z0,
        ctx.f_ph(),
        PoseJitter::moderate(),
        202,
    );
    let t_render = Instant::now();
    let frames: Vec<RgbFrame> = poses
        .iter()
        .map(|p| {
            let r = synthlab::render_frame(&phantom.scene, p, &true_undist, &ctx, &sensor, 0.0, 0)
                .unwrap();
            RgbFrame {
                rows: sensor.height_px,
                cols: sensor.width_px,
                rgb: r.rgb,
            }
        })
        .collect();
    println!("rendered 10 frames in {:.1} s", t_render.elapsed().as_secs_f64());
    let dataset = Dataset {
        frames,
        sensor_pitch_mm: pitch,
    };

    let mut cfg = RunConfig::default();
    cfg.magnification = ctx.m0;
    cfg.f_eff_mm = f_eff;
    cfg.sensor_pitch_mm = pitch;
    cfg.iterations = iterations;
    cfg.schedule_fractions = vec![0.3, 0.3, 0.2, 0.2];
    cfg.seed = 33;
    cfg.init_mode = InitMode::CrossCorrelation;
    cfg.lr_cnn = lr_cnn;
    cfg.lambda_h = lambda_h;

    let t_run = Instant::now();
    let mut last = (0usize, 0.0f64, 0.0f64);
    let out = pipeline::run(&dataset, &cfg, &mut |p| {
        if p.iteration % 100 == 0 {
            println!(
                "iter {:5} stage {} loss {:.4e} rgb {:.4e} h {:.3e}",
                p.iteration, p.stage_factor, p.loss, p.rgb_mse, p.h_mse
            );
        }
        last = (p.iteration, p.loss, p.rgb_mse);
    })
    .unwrap();
    println!(
        "run: {:.1} s, final loss {:.4e}",
        t_run.elapsed().as_secs_f64(),
        last.1
    );
    for (i, p) in out.params.poses.iter().enumerate() {
        let t = &poses[i];
        println!(
            "pose {i}: dx={:+.4} dy={:+.4} dz={:+.3} dnx={:+.4} dny={:+.4} dth={:+.4}",
            p.x - t.x,
            p.y - t.y,
            p.z - t.z,
            p.n_x - t.n[0],
            p.n_y - t.n[1],
            p.theta - t.theta
        );
    }

    // Resample the reconstructed height plane onto the scene grid.
    let recon = &out.recon;
    let h_plane = recon.height_plane();
    let mut est = vec![f32::NAN; phantom.scene.rows * phantom.scene.cols];
    for r in 0..phantom.scene.rows {
        for c in 0..phantom.scene.cols {
            let world = Vec2::new(
                phantom.scene.origin.x + c as f64 * phantom.scene.pitch,
                phantom.scene.origin.y + r as f64 * phantom.scene.pitch,
            );
            let (cx, cy) = recon.world_to_cell(world);
            let (bx, by) = (cx.round() as i64, cy.round() as i64);
            if bx >= 0 && by >= 0 && (bx as usize) < recon.cols && (by as usize) < recon.rows {
                let j = by as usize * recon.cols + bx as usize;
                if recon.visited[j] {
                    est[r * phantom.scene.cols + c] = h_plane[j];
                }
            }
        }
    }
    // Exclude unobserved scene cells plus a safety band at region edges.
    let mut masks = synthlab::erode_masks(&phantom.masks, phantom.scene.rows, phantom.scene.cols, 3);
    for (m, &e) in masks.iter_mut().zip(est.iter()) {
        if e.is_nan() {
            *m = synthlab::MASK_EXCLUDED;
        }
    }
    let est: Vec<f32> = est.iter().map(|&e| if e.is_nan() { 0.0 } else { e }).collect();
    let eval = synthlab::evaluate_heights(&est, &masks, &phantom.region_heights_mm).unwrap();
    let mut acc_sum = 0.0;
    for r in &eval.per_region {
        println!(
            "region {}: cells {:6} mean {:+.4} mm acc {:6.1} um prec {:6.1} um",
            r.region,
            r.cells,
            r.mean_mm,
            r.accuracy_mm * 1e3,
            r.precision_mm * 1e3
        );
        if r.region > 0 {
            acc_sum += r.accuracy_mm;
        }
    }
    println!(
        "mean plateau accuracy {:.1} um, background precision {:.1} um, shift {:+.3} mm, rescale {:.3}",
        acc_sum / 6.0 * 1e3,
        eval.per_region[0].precision_mm * 1e3,
        eval.shift_mm,
        eval.rescale
    );
}
