//! One optimization step: warp the batch, update the running-average
//! reconstruction, reproject, assemble the regularized loss, and
//! backpropagate to every deformation parameter.
//!
//! Backpropagation through the reconstruction is blocked: the buffer
//! enters the graph as a detached constant behind `stop_gradient`, so the
//! loss gradient uses only paths that reach the parameters directly
//! (warp coordinates and the height channel of the target side). The
//! `OnTape*` routes rebuild the update on the tape and exist to verify
//! that blocking changes nothing.

use alloc::vec;
use alloc::vec::Vec;

use super::recon::Reconstruction;
use super::warp::{
    push_pose_vars, push_undist_vars, warp_frame, StageGeom, UndistVars,
};
use super::{DeformationParams, HeightSource, PipelineError, RunConfig, StageFrames, UndistState};
use crate::autodiff::{BnStats, Shape, Tape, Var};
use crate::dipnet::{Network, StatsMode};

/// How the reconstruction enters the reprojection graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ReconRoute {
    /// Production: detached constant wrapped in stop_gradient.
    Constant,
    /// Running-average update rebuilt on the tape, then blocked. Must
    /// yield gradients bit-identical to `Constant`.
    OnTapeBlocked,
    /// Same, without blocking; exposes the gradient term the production
    /// path omits (used by tests only).
    OnTapeLeaky,
}

/// Gradients for everything a step can train.
#[derive(Debug, Clone, Default)]
pub(crate) struct StepGrads {
    /// Per batch frame: d/d(x, y, z, n_x, n_y, theta).
    pub pose: Vec<[f64; 6]>,
    pub nodes: Vec<f64>,
    pub poly: Vec<f64>,
    pub center: [f64; 2],
    pub cnn: Vec<Vec<f32>>,
    /// Direct-height mode: per batch frame, gradient of the full map.
    pub heights: Vec<Vec<f32>>,
}

pub(crate) struct StepResult {
    pub loss: f64,
    pub rgb_mse: f64,
    pub h_mse: f64,
    pub tv: f64,
    pub dropped_samples: usize,
    pub clamped_radii: usize,
    pub grads: StepGrads,
    pub bn_stats: Option<Vec<BnStats>>,
}

/// Runs one batch step against `recon` (which is updated in place by the
/// running-average rule before reprojection).
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_step(
    stage: &StageFrames,
    geom: &StageGeom,
    batch: &[usize],
    params: &DeformationParams,
    heights: &HeightSource,
    net: Option<&Network>,
    recon: &mut Reconstruction,
    cfg: &RunConfig,
    route: ReconRoute,
    pixel_subset: Option<&[Vec<u32>]>,
) -> Result<StepResult, PipelineError> {
    let mut tape = Tape::new();
    let l_full = stage.rows * stage.cols;

    // Shared constants and parameter leaves.
    let (xs_px_all, ys_px_all) = geom.pixel_coords();
    let undist_vars = push_undist_vars(&mut tape, &params.undist, true);

    // Heights per batch frame.
    let mut bn_stats = None;
    let mut cnn_param_vars: Vec<Var> = Vec::new();
    let mut height_leaf_vars: Vec<Var> = Vec::new();
    let mut height_maps_2d: Vec<Var> = Vec::new();
    let mut h_flat_full: Vec<Var> = Vec::new();
    match heights {
        HeightSource::Zero => {
            for _ in batch {
                let z = tape.constant(Shape::flat(l_full), vec![0.0; l_full]);
                h_flat_full.push(z);
            }
        }
        HeightSource::Cnn => {
            let net = net.expect("CNN height source requires a network");
            let mut input = Vec::with_capacity(batch.len() * 3 * l_full);
            for &f in batch {
                input.extend_from_slice(&stage.frames[f].rgb);
            }
            let images = tape.constant(Shape::nchw(batch.len(), 3, stage.rows, stage.cols), input);
            cnn_param_vars = net.push_params(&mut tape, true);
            let (maps, stats) =
                net.forward(&mut tape, images, &cnn_param_vars, StatsMode::Batch)?;
            bn_stats = Some(stats);
            for (b, _) in batch.iter().enumerate() {
                let item = tape.select_item(maps, b)?;
                height_maps_2d.push(item);
                let flat = tape.reshape(item, Shape::flat(l_full))?;
                h_flat_full.push(flat);
            }
        }
        HeightSource::Direct(maps) => {
            for &f in batch {
                let leaf = tape.leaf(
                    Shape::nchw(1, 1, stage.rows, stage.cols),
                    maps[f].clone(),
                );
                height_leaf_vars.push(leaf);
                height_maps_2d.push(leaf);
                let flat = tape.reshape(leaf, Shape::flat(l_full))?;
                h_flat_full.push(flat);
            }
        }
    }

    // Warp every batch frame; collect coordinates, targets, and values.
    let mut xs_parts = Vec::new();
    let mut ys_parts = Vec::new();
    let mut h_parts = Vec::new();
    let mut pose_vars = Vec::new();
    let mut clamped = 0usize;
    let mut rgb_target: [Vec<f32>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (b, &f) in batch.iter().enumerate() {
        let pv = push_pose_vars(&mut tape, &params.poses[f], f == 0, true);
        pose_vars.push(pv);
        let (xs_px, ys_px, h_var) = match pixel_subset {
            Some(subsets) => {
                let idx = &subsets[b];
                let xs: Vec<f32> = idx.iter().map(|&i| xs_px_all[i as usize]).collect();
                let ys: Vec<f32> = idx.iter().map(|&i| ys_px_all[i as usize]).collect();
                let xs_v = tape.constant(Shape::flat(xs.len()), xs);
                let ys_v = tape.constant(Shape::flat(ys.len()), ys);
                let h_v = tape.index_select(h_flat_full[b], idx)?;
                for ch in 0..3 {
                    let plane = &stage.frames[f].rgb[ch * l_full..(ch + 1) * l_full];
                    rgb_target[ch].extend(idx.iter().map(|&i| plane[i as usize]));
                }
                (xs_v, ys_v, h_v)
            }
            None => {
                let xs_v = tape.constant(Shape::flat(l_full), xs_px_all.clone());
                let ys_v = tape.constant(Shape::flat(l_full), ys_px_all.clone());
                for ch in 0..3 {
                    rgb_target[ch]
                        .extend_from_slice(&stage.frames[f].rgb[ch * l_full..(ch + 1) * l_full]);
                }
                (xs_v, ys_v, h_flat_full[b])
            }
        };
        let warped = warp_frame(
            &mut tape,
            geom,
            &params.ctx,
            &pose_vars[b],
            &undist_vars,
            xs_px,
            ys_px,
            h_var,
        )?;
        if let Some(t_var) = warped.radius_t {
            let n_max = match &params.undist {
                UndistState::Piecewise { nodes, .. } => nodes.len() as f32 - 1.0,
                UndistState::Polynomial { .. } => f32::MAX,
            };
            clamped += tape.value(t_var).iter().filter(|&&t| t >= n_max).count();
        }
        xs_parts.push(warped.xs_cell);
        ys_parts.push(warped.ys_cell);
        h_parts.push(h_var);
    }
    let xs_all = tape.concat_w(&xs_parts)?;
    let ys_all = tape.concat_w(&ys_parts)?;
    let h_all = tape.concat_w(&h_parts)?;

    // Nearest-cell binning for the reconstruction update.
    let cells: Vec<i64> = tape
        .value(xs_all)
        .iter()
        .zip(tape.value(ys_all).iter())
        .map(|(&x, &y)| recon.bin(x, y))
        .collect();
    let dropped = cells.iter().filter(|&&c| c < 0).count();
    let h_values = tape.value(h_all).to_vec();
    let channel_values: [&[f32]; 4] = [
        &rgb_target[0],
        &rgb_target[1],
        &rgb_target[2],
        &h_values,
    ];

    // Reconstruction planes the reprojection will read.
    let m = cfg.momentum;
    let plane = recon.plane();
    let b_planes: Vec<Var> = match route {
        ReconRoute::Constant => {
            recon.running_average_update(&cells, &channel_values, m);
            (0..4)
                .map(|ch| {
                    let grid = tape.constant(
                        Shape::nchw(1, 1, recon.rows, recon.cols),
                        recon.data[ch * plane..(ch + 1) * plane].to_vec(),
                    );
                    tape.stop_gradient(grid)
                })
                .collect()
        }
        ReconRoute::OnTapeBlocked | ReconRoute::OnTapeLeaky => {
            // Rebuild B <- m B_prev + (1-m) scatter_mean(batch) on the
            // tape. This matches the off-tape update only on cells the
            // batch visits; callers of these routes arrange for gathers
            // to stay within the batch footprint.
            let mut planes = Vec::with_capacity(4);
            for (ch, values) in channel_values.iter().enumerate() {
                let v_var = if ch == 3 {
                    tape.reshape(h_all, Shape::nchw(1, 1, 1, h_values.len()))?
                } else {
                    tape.constant(Shape::nchw(1, 1, 1, values.len()), values.to_vec())
                };
                let (batch_grid, _) = tape.scatter_mean(v_var, &cells, recon.rows, recon.cols)?;
                let prev = tape.constant(
                    Shape::nchw(1, 1, recon.rows, recon.cols),
                    recon.data[ch * plane..(ch + 1) * plane].to_vec(),
                );
                let old = tape.mul_scalar(prev, m as f32);
                let new = tape.mul_scalar(batch_grid, (1.0 - m) as f32);
                let blended = tape.add(old, new)?;
                planes.push(if route == ReconRoute::OnTapeBlocked {
                    tape.stop_gradient(blended)
                } else {
                    blended
                });
            }
            recon.running_average_update(&cells, &channel_values, m);
            planes
        }
    };

    // Reproject: bilinear gather at the exact same coordinates.
    let visited = recon.visited.clone();
    let mut dhat = Vec::with_capacity(4);
    let mut valid_mask = Vec::new();
    for (ch, &b_plane) in b_planes.iter().enumerate() {
        let (out, valid) = tape.gather_bilinear(b_plane, xs_all, ys_all, &visited)?;
        let flat = tape.reshape(out, Shape::flat(cells.len()))?;
        dhat.push(flat);
        if ch == 0 {
            valid_mask = valid;
        }
    }
    let valid_count = valid_mask.iter().filter(|&&v| v).count();
    if valid_count == 0 {
        return Err(PipelineError::NoValidSamples);
    }
    let mask_f: Vec<f32> = valid_mask
        .iter()
        .map(|&v| if v { 1.0 } else { 0.0 })
        .collect();
    let mask_var = tape.constant(Shape::flat(mask_f.len()), mask_f);

    // Data term: mean over valid samples of RGB squared error plus
    // lambda_h times height squared error.
    let mut rgb_err = None;
    for ch in 0..3 {
        let target = tape.constant(Shape::flat(rgb_target[ch].len()), rgb_target[ch].clone());
        let diff = tape.sub(dhat[ch], target)?;
        let sq = tape.mul(diff, diff)?;
        rgb_err = Some(match rgb_err {
            None => sq,
            Some(acc) => tape.add(acc, sq)?,
        });
    }
    let rgb_err = rgb_err.expect("three channels");
    let h_diff = tape.sub(dhat[3], h_all)?;
    let h_sq = tape.mul(h_diff, h_diff)?;
    let h_scaled = tape.mul_scalar(h_sq, cfg.lambda_h as f32);
    let per_sample = tape.add(rgb_err, h_scaled)?;
    let masked = tape.mul(per_sample, mask_var)?;
    let total = tape.sum(masked);
    let data_loss = tape.mul_scalar(total, 1.0 / valid_count as f32);

    // Isotropic TV on the camera-centric height maps (direct mode).
    let mut tv_value = 0.0f64;
    let loss = if cfg.lambda_tv > 0.0 && !height_maps_2d.is_empty() {
        let mut tv_sum = None;
        for &map in &height_maps_2d {
            let tv = tape.tv_iso(map)?;
            tv_sum = Some(match tv_sum {
                None => tv,
                Some(acc) => tape.add(acc, tv)?,
            });
        }
        let tv_sum = tv_sum.expect("checked non-empty");
        tv_value = tape.value(tv_sum)[0] as f64;
        let scaled = tape.mul_scalar(tv_sum, cfg.lambda_tv as f32);
        tape.add(data_loss, scaled)?
    } else {
        data_loss
    };

    // Loss components for the progress log (f64 off-tape reductions).
    let (rgb_mse, h_mse) = {
        let rgb = tape.value(rgb_err);
        let hsq = tape.value(h_sq);
        let mut rgb_acc = 0.0f64;
        let mut h_acc = 0.0f64;
        for (j, &ok) in valid_mask.iter().enumerate() {
            if ok {
                rgb_acc += rgb[j] as f64;
                h_acc += hsq[j] as f64;
            }
        }
        (rgb_acc / valid_count as f64, h_acc / valid_count as f64)
    };
    let loss_value = tape.value(loss)[0] as f64;

    tape.backward(loss)?;

    // Collect gradients.
    let read_scalar = |tape: &Tape, v: Var| -> f64 {
        tape.grad(v).map(|g| g[0] as f64).unwrap_or(0.0)
    };
    let mut grads = StepGrads::default();
    for pv in &pose_vars {
        grads.pose.push([
            read_scalar(&tape, pv.x),
            read_scalar(&tape, pv.y),
            read_scalar(&tape, pv.z),
            read_scalar(&tape, pv.n_x),
            read_scalar(&tape, pv.n_y),
            read_scalar(&tape, pv.theta),
        ]);
    }
    match &undist_vars {
        UndistVars::Piecewise {
            nodes,
            center_x,
            center_y,
            ..
        } => {
            grads.nodes = tape
                .grad(*nodes)
                .map(|g| g.iter().map(|&x| x as f64).collect())
                .unwrap_or_default();
            grads.center = [read_scalar(&tape, *center_x), read_scalar(&tape, *center_y)];
        }
        UndistVars::Polynomial {
            coeffs,
            center_x,
            center_y,
            ..
        } => {
            grads.poly = tape
                .grad(*coeffs)
                .map(|g| g.iter().map(|&x| x as f64).collect())
                .unwrap_or_default();
            grads.center = [read_scalar(&tape, *center_x), read_scalar(&tape, *center_y)];
        }
    }
    for &p in &cnn_param_vars {
        grads
            .cnn
            .push(tape.grad(p).map(|g| g.to_vec()).unwrap_or_default());
    }
    for &hv in &height_leaf_vars {
        grads
            .heights
            .push(tape.grad(hv).map(|g| g.to_vec()).unwrap_or_default());
    }

    Ok(StepResult {
        loss: loss_value,
        rgb_mse,
        h_mse,
        tv: tv_value,
        dropped_samples: dropped,
        clamped_radii: clamped,
        grads,
        bn_stats,
    })
}

/// Warps every frame with the current parameters (no gradients) and
/// rebuilds the reconstruction with one scatter-average pass.
pub(crate) fn full_scatter_pass(
    stage: &StageFrames,
    geom: &StageGeom,
    params: &DeformationParams,
    heights: &HeightSource,
    net: Option<&Network>,
    recon: &mut Reconstruction,
) -> Result<usize, PipelineError> {
    let mut tape = Tape::new();
    let l_full = stage.rows * stage.cols;
    let (xs_px_all, ys_px_all) = geom.pixel_coords();
    let undist_vars = push_undist_vars(&mut tape, &params.undist, false);

    // Heights for all frames.
    let mut h_vars = Vec::with_capacity(stage.frames.len());
    match heights {
        HeightSource::Zero => {
            let zeros = tape.constant(Shape::flat(l_full), vec![0.0; l_full]);
            for _ in 0..stage.frames.len() {
                h_vars.push(zeros);
            }
        }
        HeightSource::Cnn => {
            let net = net.expect("CNN height source requires a network");
            let mut input = Vec::with_capacity(stage.frames.len() * 3 * l_full);
            for f in &stage.frames {
                input.extend_from_slice(&f.rgb);
            }
            let images = tape.constant(
                Shape::nchw(stage.frames.len(), 3, stage.rows, stage.cols),
                input,
            );
            let cnn_params = net.push_params(&mut tape, false);
            let (maps, _) = net.forward(&mut tape, images, &cnn_params, StatsMode::Batch)?;
            for b in 0..stage.frames.len() {
                let item = tape.select_item(maps, b)?;
                h_vars.push(tape.reshape(item, Shape::flat(l_full))?);
            }
        }
        HeightSource::Direct(maps) => {
            for map in maps.iter() {
                h_vars.push(tape.constant(Shape::flat(l_full), map.clone()));
            }
        }
    }

    let mut cells = Vec::with_capacity(stage.frames.len() * l_full);
    let mut rgb: [Vec<f32>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut heights_flat = Vec::with_capacity(stage.frames.len() * l_full);
    for (f, frame) in stage.frames.iter().enumerate() {
        let xs_v = tape.constant(Shape::flat(l_full), xs_px_all.clone());
        let ys_v = tape.constant(Shape::flat(l_full), ys_px_all.clone());
        let pv = push_pose_vars(&mut tape, &params.poses[f], f == 0, false);
        let warped = warp_frame(
            &mut tape,
            geom,
            &params.ctx,
            &pv,
            &undist_vars,
            xs_v,
            ys_v,
            h_vars[f],
        )?;
        for (&x, &y) in tape
            .value(warped.xs_cell)
            .iter()
            .zip(tape.value(warped.ys_cell).iter())
        {
            cells.push(recon.bin(x, y));
        }
        for ch in 0..3 {
            rgb[ch].extend_from_slice(&frame.rgb[ch * l_full..(ch + 1) * l_full]);
        }
        heights_flat.extend_from_slice(tape.value(h_vars[f]));
    }
    let dropped = recon.scatter_average(&cells, &[&rgb[0], &rgb[1], &rgb[2], &heights_flat]);
    Ok(dropped)
}
