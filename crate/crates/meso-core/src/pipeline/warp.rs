//! Differentiable per-pixel warp from camera pixels to reconstruction
//! cells, built from tape primitives so gradients reach every deformation
//! parameter.
//!
//! The chain mirrors the scalar geometry module exactly: undistort in
//! full-resolution pixel units about the principal point, convert to mm,
//! rotate in plane, second-order tilted backprojection, add the lateral
//! position, orthorectify by the camera-centric height, and convert to
//! grid cells. The rectification uses the closed form
//! `r_w = R + d (1 - h / C)` with `d` the backprojected displacement from
//! the vanishing point, which is free of the `|d| -> 0` singularity.

use alloc::vec::Vec;

use crate::autodiff::{AutodiffError, Shape, Tape, Var};
use crate::geometry::{AutofocusContext, Vec2};

/// Pose parameters of one frame as tape nodes (leaves or constants).
#[derive(Debug, Clone, Copy)]
pub(crate) struct PoseVars {
    pub x: Var,
    pub y: Var,
    pub z: Var,
    pub n_x: Var,
    pub n_y: Var,
    pub theta: Var,
}

/// Undistortion parameters as tape nodes.
pub(crate) enum UndistVars {
    Piecewise {
        nodes: Var,
        center_x: Var,
        center_y: Var,
        /// 1 / delta_r, full-resolution pixels.
        inv_delta: f32,
    },
    Polynomial {
        /// Even-power coefficients (r^2, r^4, ...).
        coeffs: Var,
        center_x: Var,
        center_y: Var,
        inv_r_scale: f32,
    },
}

/// Per-stage fixed geometry: coarse frame dims, sensor conversion, and
/// the reconstruction grid.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StageGeom {
    pub factor: usize,
    pub rows: usize,
    pub cols: usize,
    pub full_rows: usize,
    pub full_cols: usize,
    /// mm per full-resolution pixel.
    pub sensor_pitch: f64,
    pub grid_origin: Vec2,
    pub grid_pitch: f64,
}

impl StageGeom {
    /// Full-resolution pixel coordinates (relative to the image center)
    /// of every coarse pixel center, row-major.
    pub fn pixel_coords(&self) -> (Vec<f32>, Vec<f32>) {
        let k = self.factor as f64;
        let cx = 0.5 * (self.full_cols - 1) as f64;
        let cy = 0.5 * (self.full_rows - 1) as f64;
        let mut xs = Vec::with_capacity(self.rows * self.cols);
        let mut ys = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            let y = r as f64 * k + 0.5 * (k - 1.0) - cy;
            for c in 0..self.cols {
                let x = c as f64 * k + 0.5 * (k - 1.0) - cx;
                xs.push(x as f32);
                ys.push(y as f32);
            }
        }
        (xs, ys)
    }
}

/// Warps one frame's pixels (given as constants `xs_px`, `ys_px` in
/// full-resolution pixel units about the image center) into continuous
/// grid-cell coordinates. `h` is the camera-centric height map, flattened
/// to the same length.
#[allow(clippy::too_many_arguments)]
pub(crate) fn warp_frame(
    tape: &mut Tape,
    geom: &StageGeom,
    ctx: &AutofocusContext,
    pose: &PoseVars,
    undist: &UndistVars,
    xs_px: Var,
    ys_px: Var,
    h: Var,
) -> Result<WarpedFrame, AutodiffError> {
    // Undistortion about the principal point, in pixel units.
    let (m, center_x, center_y, radius_t) = match undist {
        UndistVars::Piecewise {
            nodes,
            center_x,
            center_y,
            inv_delta,
        } => {
            let dx = tape.sub(xs_px, *center_x)?;
            let dy = tape.sub(ys_px, *center_y)?;
            let dx2 = tape.mul(dx, dx)?;
            let dy2 = tape.mul(dy, dy)?;
            let r2 = tape.add(dx2, dy2)?;
            let r = tape.sqrt(r2);
            let t = tape.mul_scalar(r, *inv_delta);
            let m = tape.interp1d(*nodes, t)?;
            (m, *center_x, *center_y, Some(t))
        }
        UndistVars::Polynomial {
            coeffs,
            center_x,
            center_y,
            inv_r_scale,
        } => {
            let dx = tape.sub(xs_px, *center_x)?;
            let dy = tape.sub(ys_px, *center_y)?;
            let dx2 = tape.mul(dx, dx)?;
            let dy2 = tape.mul(dy, dy)?;
            let r2 = tape.add(dx2, dy2)?;
            let u2 = tape.mul_scalar(r2, inv_r_scale * inv_r_scale);
            let k = tape.shape(*coeffs).len();
            let one = tape.scalar(1.0);
            let a0 = tape.index_select(*coeffs, &[0])?;
            let first = tape.mul(a0, u2)?;
            let mut m = tape.add(one, first)?;
            let mut pow = u2;
            for j in 1..k {
                pow = tape.mul(pow, u2)?;
                let a = tape.index_select(*coeffs, &[j as u32])?;
                let term = tape.mul(a, pow)?;
                m = tape.add(m, term)?;
            }
            (m, *center_x, *center_y, None)
        }
    };
    let dx = tape.sub(xs_px, center_x)?;
    let dy = tape.sub(ys_px, center_y)?;
    let xu_px = {
        let s = tape.mul(m, dx)?;
        tape.add(s, center_x)?
    };
    let yu_px = {
        let s = tape.mul(m, dy)?;
        tape.add(s, center_y)?
    };

    // Pixels to mm.
    let pitch = geom.sensor_pitch as f32;
    let xu = tape.mul_scalar(xu_px, pitch);
    let yu = tape.mul_scalar(yu_px, pitch);

    // In-plane rotation, row-vector convention.
    let cos_t = tape.cos(pose.theta);
    let sin_t = tape.sin(pose.theta);
    let xr = {
        let a = tape.mul(xu, cos_t)?;
        let b = tape.mul(yu, sin_t)?;
        tape.sub(a, b)?
    };
    let yr = {
        let a = tape.mul(xu, sin_t)?;
        let b = tape.mul(yu, cos_t)?;
        tape.add(a, b)?
    };

    // Second-order tilted backprojection.
    let f_ph = ctx.f_ph() as f32;
    let n_z = {
        let nx2 = tape.mul(pose.n_x, pose.n_x)?;
        let ny2 = tape.mul(pose.n_y, pose.n_y)?;
        let s2 = tape.add(nx2, ny2)?;
        let neg = tape.mul_scalar(s2, -1.0);
        let arg = tape.add_scalar(neg, 1.0);
        let root = tape.sqrt(arg);
        tape.mul_scalar(root, -1.0)
    };
    let s_dot = {
        let a = tape.mul(pose.n_x, xr)?;
        let b = tape.mul(pose.n_y, yr)?;
        tape.add(a, b)?
    };
    let fnz = tape.mul_scalar(n_z, f_ph);
    let pref = tape.div(pose.z, fnz)?;
    let s_over_f = tape.mul_scalar(s_dot, 1.0 / f_ph);
    let s2_term = {
        let s2 = tape.mul(s_dot, s_dot)?;
        tape.mul_scalar(s2, 1.0 / (f_ph * f_ph))
    };
    let half_nx_s = {
        let t = tape.mul(pose.n_x, s_dot)?;
        tape.mul_scalar(t, 0.5)
    };
    let half_ny_s = {
        let t = tape.mul(pose.n_y, s_dot)?;
        tape.mul_scalar(t, 0.5)
    };
    // d = pref * (p + p s/f + (f^2 n s / 2 + p s^2) / f^2), per component.
    let tx = {
        let lin = tape.mul(xr, s_over_f)?;
        let cub = tape.mul(xr, s2_term)?;
        let sum1 = tape.add(xr, lin)?;
        let sum2 = tape.add(cub, half_nx_s)?;
        tape.add(sum1, sum2)?
    };
    let ty = {
        let lin = tape.mul(yr, s_over_f)?;
        let cub = tape.mul(yr, s2_term)?;
        let sum1 = tape.add(yr, lin)?;
        let sum2 = tape.add(cub, half_ny_s)?;
        tape.add(sum1, sum2)?
    };
    let dxw = tape.mul(pref, tx)?;
    let dyw = tape.mul(pref, ty)?;

    // Orthorectification shrink factor 1 - h / C with
    // C = f_eff (1 + Z / (M_0 Z_0)).
    let c_i = {
        let zs = tape.mul_scalar(pose.z, (1.0 / (ctx.m0 * ctx.z0)) as f32);
        let inner = tape.add_scalar(zs, 1.0);
        tape.mul_scalar(inner, ctx.f_eff as f32)
    };
    let h_over_c = tape.div(h, c_i)?;
    let neg = tape.mul_scalar(h_over_c, -1.0);
    let shrink = tape.add_scalar(neg, 1.0);

    let xw = {
        let d = tape.mul(dxw, shrink)?;
        tape.add(d, pose.x)?
    };
    let yw = {
        let d = tape.mul(dyw, shrink)?;
        tape.add(d, pose.y)?
    };

    // World mm to continuous grid cells.
    let inv_pitch = (1.0 / geom.grid_pitch) as f32;
    let xs_cell = {
        let shifted = tape.add_scalar(xw, -geom.grid_origin.x as f32);
        tape.mul_scalar(shifted, inv_pitch)
    };
    let ys_cell = {
        let shifted = tape.add_scalar(yw, -geom.grid_origin.y as f32);
        tape.mul_scalar(shifted, inv_pitch)
    };
    Ok(WarpedFrame {
        xs_cell,
        ys_cell,
        radius_t,
    })
}

/// Output of [`warp_frame`].
pub(crate) struct WarpedFrame {
    pub xs_cell: Var,
    pub ys_cell: Var,
    /// Radial node positions (piecewise model only), for clamp
    /// diagnostics.
    pub radius_t: Option<Var>,
}

/// Builds pose nodes: trainable leaves, except the gauge-anchored fields
/// of frame 0 (lateral position, height, and roll), which enter as
/// constants. Anchoring Z_0 pins the global-scale gauge that the
/// user-measured magnification defines; tilt stays free on every frame
/// (freehand instability).
pub(crate) fn push_pose_vars(
    tape: &mut Tape,
    pose: &super::PoseState,
    gauge_anchor: bool,
    trainable: bool,
) -> PoseVars {
    let mut scalar = |v: f64, anchored: bool| -> Var {
        if trainable && !anchored {
            tape.scalar_leaf(v as f32)
        } else {
            tape.scalar(v as f32)
        }
    };
    PoseVars {
        x: scalar(pose.x, gauge_anchor),
        y: scalar(pose.y, gauge_anchor),
        z: scalar(pose.z, gauge_anchor),
        n_x: scalar(pose.n_x, false),
        n_y: scalar(pose.n_y, false),
        theta: scalar(pose.theta, gauge_anchor),
    }
}

/// Builds undistortion nodes from the parameter state.
pub(crate) fn push_undist_vars(
    tape: &mut Tape,
    undist: &super::UndistState,
    trainable: bool,
) -> UndistVars {
    fn vector(tape: &mut Tape, v: &[f64], trainable: bool) -> Var {
        let data: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        let shape = Shape::flat(data.len());
        if trainable {
            tape.leaf(shape, data)
        } else {
            tape.constant(shape, data)
        }
    }
    fn scalar(tape: &mut Tape, v: f64, trainable: bool) -> Var {
        if trainable {
            tape.scalar_leaf(v as f32)
        } else {
            tape.scalar(v as f32)
        }
    }
    match undist {
        super::UndistState::Piecewise {
            nodes,
            delta_r,
            center,
        } => UndistVars::Piecewise {
            nodes: vector(tape, nodes, trainable),
            center_x: scalar(tape, center[0], trainable),
            center_y: scalar(tape, center[1], trainable),
            inv_delta: (1.0 / delta_r) as f32,
        },
        super::UndistState::Polynomial {
            coeffs,
            r_scale,
            center,
        } => UndistVars::Polynomial {
            coeffs: vector(tape, coeffs, trainable),
            center_x: scalar(tape, center[0], trainable),
            center_y: scalar(tape, center[1], trainable),
            inv_r_scale: (1.0 / r_scale) as f32,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distortion::RadialUndistortion;
    use crate::geometry::{
        backproject_pipeline, ortho_rectify, CameraPose,
    };
    use crate::pipeline::{PoseState, UndistState};

    /// The tensor warp must agree with the scalar geometry chain; this
    /// guards the two implementations against drifting apart.
    #[test]
    fn tensor_warp_matches_scalar_geometry() {
        let z0 = 75.0f64;
        let f_eff = 4.3f64;
        let f_ph = 1.0 / (1.0 / f_eff - 1.0 / z0);
        let ctx = AutofocusContext::new(f_eff, f_ph / z0).unwrap();
        let geom = StageGeom {
            factor: 2,
            rows: 24,
            cols: 32,
            full_rows: 48,
            full_cols: 64,
            sensor_pitch: 0.0028,
            grid_origin: Vec2::new(-4.0, -3.0),
            grid_pitch: 0.046,
        };
        let pose_state = PoseState {
            x: 1.2,
            y: -0.7,
            z: z0 * 1.01,
            n_x: 0.015,
            n_y: -0.02,
            theta: 0.05,
        };
        let mut nodes = alloc::vec![1.0f64; 12];
        for (i, n) in nodes.iter_mut().enumerate() {
            *n = 1.0 - 0.0004 * (i as f64) * (i as f64);
        }
        let delta_r = 44.0 * 1.1 / 11.0;
        let undist_state = UndistState::Piecewise {
            nodes: nodes.clone(),
            delta_r,
            center: [3.0, -2.0],
        };

        let mut tape = Tape::new();
        let (xs_px, ys_px) = geom.pixel_coords();
        let l = xs_px.len();
        let xs_v = tape.constant(Shape::flat(l), xs_px.clone());
        let ys_v = tape.constant(Shape::flat(l), ys_px.clone());
        let pose_vars = push_pose_vars(&mut tape, &pose_state, false, true);
        let undist_vars = push_undist_vars(&mut tape, &undist_state, true);
        let heights: Vec<f32> = (0..l).map(|j| 0.3 * ((j % 7) as f32 / 7.0 - 0.5)).collect();
        let h_var = tape.constant(Shape::flat(l), heights.clone());
        let warped = warp_frame(
            &mut tape, &geom, &ctx, &pose_vars, &undist_vars, xs_v, ys_v, h_var,
        )
        .unwrap();

        // Scalar reference path.
        let scalar_undist =
            RadialUndistortion::new(nodes, delta_r, Vec2::new(3.0, -2.0)).unwrap();
        let pose = CameraPose::with_tilt(
            pose_state.x,
            pose_state.y,
            pose_state.z,
            pose_state.n_x,
            pose_state.n_y,
            pose_state.theta,
            ctx.f_ph(),
        )
        .unwrap();
        let xs_got = tape.value(warped.xs_cell);
        let ys_got = tape.value(warped.ys_cell);
        for j in (0..l).step_by(17) {
            let p_px = Vec2::new(xs_px[j] as f64, ys_px[j] as f64);
            let r_obj = backproject_pipeline(p_px, &pose, &scalar_undist, geom.sensor_pitch);
            let rect = ortho_rectify(r_obj, heights[j] as f64, &pose, &ctx, 1e-9);
            let r_w = r_obj + rect.vector;
            let want_x = (r_w.x - geom.grid_origin.x) / geom.grid_pitch;
            let want_y = (r_w.y - geom.grid_origin.y) / geom.grid_pitch;
            assert!(
                (xs_got[j] as f64 - want_x).abs() < 5e-4,
                "x at {j}: {} vs {want_x}",
                xs_got[j]
            );
            assert!(
                (ys_got[j] as f64 - want_y).abs() < 5e-4,
                "y at {j}: {} vs {want_y}",
                ys_got[j]
            );
        }
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        // End-to-end FD over a small warp: loss = weighted sum of cell
        // coordinates; checks pose scalars, distortion nodes, center, and
        // heights together.
        use crate::autodiff::testutil::{check_gradients, fill};
        let z0 = 75.0f64;
        let f_eff = 4.3f64;
        let f_ph = 1.0 / (1.0 / f_eff - 1.0 / z0);
        let ctx = AutofocusContext::new(f_eff, f_ph / z0).unwrap();
        let geom = StageGeom {
            factor: 4,
            rows: 8,
            cols: 10,
            full_rows: 32,
            full_cols: 40,
            sensor_pitch: 0.0028,
            grid_origin: Vec2::new(-3.0, -2.5),
            grid_pitch: 0.046,
        };
        let (xs_px, ys_px) = geom.pixel_coords();
        let l = xs_px.len();
        let n_r = 8usize;
        let delta_r = 26.0 * 1.1 / (n_r as f64 - 1.0);

        let pose0: Vec<f32> = alloc::vec![0.9, -0.4, z0 as f32, 0.012, -0.007, 0.03];
        let nodes0: Vec<f32> = (0..n_r).map(|i| 1.0 - 0.0008 * (i * i) as f32).collect();
        let center0: Vec<f32> = alloc::vec![1.5, -1.0];
        let heights0 = fill(3, l, -0.25, 0.25);

        check_gradients(
            &[
                (Shape::flat(6), pose0),
                (Shape::flat(n_r), nodes0),
                (Shape::flat(2), center0),
                (Shape::flat(l), heights0),
            ],
            &|tape, vars| {
                let pose = PoseVars {
                    x: tape.index_select(vars[0], &[0]).unwrap(),
                    y: tape.index_select(vars[0], &[1]).unwrap(),
                    z: tape.index_select(vars[0], &[2]).unwrap(),
                    n_x: tape.index_select(vars[0], &[3]).unwrap(),
                    n_y: tape.index_select(vars[0], &[4]).unwrap(),
                    theta: tape.index_select(vars[0], &[5]).unwrap(),
                };
                let undist = UndistVars::Piecewise {
                    nodes: vars[1],
                    center_x: tape.index_select(vars[2], &[0]).unwrap(),
                    center_y: tape.index_select(vars[2], &[1]).unwrap(),
                    inv_delta: (1.0 / delta_r) as f32,
                };
                let xs_v = tape.constant(Shape::flat(l), xs_px.clone());
                let ys_v = tape.constant(Shape::flat(l), ys_px.clone());
                let warped = warp_frame(
                    tape, &geom, &ctx, &pose, &undist, xs_v, ys_v, vars[3],
                )
                .unwrap();
                let wx = tape.constant(Shape::flat(l), fill(11, l, -0.1, 0.1));
                let wy = tape.constant(Shape::flat(l), fill(12, l, -0.1, 0.1));
                let a = tape.mul(warped.xs_cell, wx).unwrap();
                let b = tape.mul(warped.ys_cell, wy).unwrap();
                let s = tape.add(a, b).unwrap();
                t_mean(tape, s)
            },
            1e-3,
            2e-3,
            25,
        );

        fn t_mean(tape: &mut Tape, v: Var) -> Var {
            tape.mean(v)
        }
    }
}
