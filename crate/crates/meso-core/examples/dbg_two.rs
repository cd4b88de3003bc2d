use meso_core::distortion::RadialUndistortion;
use meso_core::geometry::*;
use meso_core::pipeline::{self, Dataset, InitMode, RgbFrame, RunConfig};
use meso_core::synthlab::{self, PhantomSpec, SensorGeometry};

fn main() {
    let z0 = 75.0f64;
    let f_eff = 4.3f64;
    let f_ph = 1.0 / (1.0 / f_eff - 1.0 / z0);
    let ctx = AutofocusContext::new(f_eff, f_ph / z0).unwrap();
    let pitch = 0.0028f64;
    let phantom = synthlab::make_phantom(&PhantomSpec {
        width_mm: 9.0,
        height_mm: 5.0,
        pitch_mm: pitch / ctx.m0,
        plateaus: vec![],
        seed: 4,
    })
    .unwrap();
    let sensor = SensorGeometry { width_px: 63, height_px: 47, pitch_mm: pitch };
    let undist = RadialUndistortion::for_sensor(30, sensor.half_diagonal_px());
    let offset = 6.0 * pitch / ctx.m0;
    let poses = [
        CameraPose::with_tilt(0.0, 0.0, ctx.z0, 0.0, 0.0, 0.0, ctx.f_ph()).unwrap(),
        CameraPose::with_tilt(offset, 0.0, ctx.z0, 0.0, 0.0, 0.0, ctx.f_ph()).unwrap(),
    ];
    let frames: Vec<RgbFrame> = poses
        .iter()
        .map(|p| {
            let r = synthlab::render_frame(&phantom.scene, p, &undist, &ctx, &sensor, 0.0, 0).unwrap();
            RgbFrame { rows: sensor.height_px, cols: sensor.width_px, rgb: r.rgb }
        })
        .collect();
    let dataset = Dataset { frames, sensor_pitch_mm: pitch };

    let mut cfg = RunConfig::default();
    cfg.magnification = ctx.m0;
    cfg.f_eff_mm = ctx.f_eff;
    cfg.sensor_pitch_mm = pitch;
    cfg.architecture = vec![8, 8];
    cfg.seed = 17;
    cfg.batch_size = 2;
    cfg.iterations = 420;
    cfg.schedule_factors = vec![4, 2, 1];
    cfg.schedule_fractions = vec![0.4, 0.3, 0.3];
    cfg.init_mode = InitMode::SamePosition;

    let mut losses = Vec::new();
    let out = pipeline::run(&dataset, &cfg, &mut |p| losses.push((p.stage_factor, p.loss))).unwrap();
    println!("true offset {offset:.5}");
    for (i, p) in out.params.poses.iter().enumerate() {
        println!("pose {i}: x={:.5} y={:.5} z={:.4} nx={:+.5} ny={:+.5} th={:+.5}", p.x, p.y, p.z, p.n_x, p.n_y, p.theta);
    }
    if let pipeline::UndistState::Piecewise { nodes, center, .. } = &out.params.undist {
        let lo = nodes.iter().cloned().fold(f64::MAX, f64::min);
        println!("nodes: min {lo:.5} max 1.0 center ({:.3}, {:.3})", center[0], center[1]);
    }
    for factor in [4, 2, 1] {
        let v: Vec<f64> = losses.iter().filter(|(f, _)| *f == factor).map(|(_, l)| *l).collect();
        println!("stage {factor}: first {:.3e} last {:.3e}", v[0], v[v.len()-1]);
    }
}
