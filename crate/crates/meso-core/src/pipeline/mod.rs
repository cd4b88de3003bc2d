//! End-to-end optimization: backproject all frames into a running-average
//! RGBH reconstruction, reproject to form predictions, compute the
//! regularized MSE loss, and update poses, undistortion, and CNN weights
//! with Adam under a multi-scale schedule.
//!
//! Each iteration is one logical transaction over a random batch of
//! frames: CNN forward (final stage only), differentiable warp,
//! running-average reconstruction update, bilinear reprojection at the
//! same coordinates, masked loss, backward with gradients blocked through
//! the reconstruction, and per-group Adam updates. Coarser stages run at
//! reduced resolution with heights frozen at zero; gauge freedom is fixed
//! by anchoring frame 0's lateral position and roll.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::AutodiffError;
use crate::dipnet::{self, Architecture, DipnetError, Network};
use crate::distortion::RadialUndistortion;
use crate::geometry::{
    backproject_pipeline, AutofocusContext, CameraPose, GeometryError, Vec2,
};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub mod adam;
pub mod init;
pub mod recon;
pub(crate) mod step;
pub mod verify;
pub(crate) mod warp;

pub use adam::{AdamHyper, AdamState};
pub use recon::Reconstruction;

use adam::{adam_step, adam_step_f32};
use step::{batch_step, full_scatter_pass, ReconRoute};
use warp::StageGeom;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(&'static str),
    #[error("dataset: {0}")]
    Dataset(&'static str),
    #[error("autodiff: {0}")]
    Autodiff(#[from] AutodiffError),
    #[error("network: {0}")]
    Dipnet(#[from] DipnetError),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("no valid samples in batch (reconstruction and frames disjoint)")]
    NoValidSamples,
    #[error("non-finite loss at stage {stage}, iteration {iteration}: diagnostics {diagnostics}")]
    NonFiniteLoss {
        stage: usize,
        iteration: usize,
        diagnostics: String,
    },
}

/// One camera frame: three row-major RGB planes in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbFrame {
    pub rows: usize,
    pub cols: usize,
    pub rgb: Vec<f32>,
}

/// Input image sequence plus the physical pixel pitch.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<RgbFrame>,
    /// mm per (full-resolution) pixel.
    pub sensor_pitch_mm: f64,
}

/// Per-frame 6D pose parameters in optimization form (tilt components,
/// `n_z` derived).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub n_x: f64,
    pub n_y: f64,
    pub theta: f64,
}

/// Shared undistortion parameters in optimization form.
#[derive(Debug, Clone, PartialEq)]
pub enum UndistState {
    Piecewise {
        nodes: Vec<f64>,
        delta_r: f64,
        center: [f64; 2],
    },
    Polynomial {
        coeffs: Vec<f64>,
        r_scale: f64,
        center: [f64; 2],
    },
}

impl UndistState {
    /// Scalar-side model for the piecewise variant (used for grid
    /// extents, reports, and serialization).
    pub fn to_radial(&self) -> Option<RadialUndistortion> {
        match self {
            UndistState::Piecewise {
                nodes,
                delta_r,
                center,
            } => RadialUndistortion::new(
                nodes.clone(),
                *delta_r,
                Vec2::new(center[0], center[1]),
            )
            .ok(),
            UndistState::Polynomial { .. } => None,
        }
    }
}

/// All deformation parameters: per-frame poses, shared undistortion, and
/// the autofocus context.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationParams {
    pub poses: Vec<PoseState>,
    pub undist: UndistState,
    pub ctx: AutofocusContext,
}

impl DeformationParams {
    pub fn camera_pose(&self, i: usize) -> Result<CameraPose, GeometryError> {
        let p = &self.poses[i];
        CameraPose::with_tilt(p.x, p.y, p.z, p.n_x, p.n_y, p.theta, self.ctx.f_ph())
    }
}

/// Where camera-centric heights come from during a stage.
pub(crate) enum HeightSource<'a> {
    /// Heights frozen at zero (coarse stages).
    Zero,
    /// Reparameterized as the CNN output.
    Cnn,
    /// Directly optimized per-frame maps.
    Direct(&'a [Vec<f32>]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    SamePosition,
    CrossCorrelation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeightModel {
    /// CNN reparameterization (the production regularizer).
    Cnn,
    /// Direct per-frame height maps, optionally TV-regularized.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UndistortionKind {
    Piecewise,
    /// Even polynomial of the given order (order/2 coefficients).
    Polynomial(usize),
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("bad value for key `{key}`: {reason}")]
    BadValue { key: String, reason: String },
}

/// Run configuration; every field has a default except `magnification`,
/// which the capture must supply.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// First-frame magnification M_0 (required, > 0).
    pub magnification: f64,
    pub sensor_pitch_mm: f64,
    pub f_eff_mm: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub n_r: usize,
    /// Running-average momentum m.
    pub momentum: f64,
    pub architecture: Vec<usize>,
    pub lambda_h: f64,
    pub lambda_tv: f64,
    pub schedule_factors: Vec<usize>,
    pub schedule_fractions: Vec<f64>,
    pub seed: u64,
    pub lr_xy: f64,
    pub lr_z: f64,
    pub lr_tilt: f64,
    pub lr_theta: f64,
    pub lr_nodes: f64,
    pub lr_center: f64,
    pub lr_cnn: f64,
    pub lr_height: f64,
    pub init_mode: InitMode,
    pub height_model: HeightModel,
    pub undistortion: UndistortionKind,
    /// Height scale of the network output, mm per unit.
    pub s_h: f64,
    pub grid_margin_frac: f64,
    /// Random-pixel batching: samples per frame per iteration (0 = whole
    /// frames).
    pub pixel_batch: usize,
    /// Coarsest stage factor at which distortion parameters start
    /// updating (their image effect is sub-pixel at coarser stages and
    /// they would only absorb transient misfit).
    pub distortion_start_factor: usize,
    /// Coarsest stage factor at which tilt components start updating.
    pub tilt_start_factor: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            magnification: 0.0,
            sensor_pitch_mm: 0.0028,
            f_eff_mm: 4.3,
            iterations: 10_000,
            batch_size: 6,
            n_r: RadialUndistortion::DEFAULT_NODES,
            momentum: 0.5,
            architecture: vec![16, 16, 16, 32, 32],
            lambda_h: 0.1,
            lambda_tv: 0.0,
            schedule_factors: vec![8, 4, 2, 1],
            schedule_fractions: vec![0.2, 0.2, 0.2, 0.4],
            seed: 0,
            lr_xy: 3e-3,
            lr_z: 3e-3,
            lr_tilt: 1e-4,
            lr_theta: 3e-4,
            lr_nodes: 3e-4,
            lr_center: 3e-2,
            lr_cnn: 1e-3,
            lr_height: 2e-3,
            init_mode: InitMode::SamePosition,
            height_model: HeightModel::Cnn,
            undistortion: UndistortionKind::Piecewise,
            s_h: 1.0,
            grid_margin_frac: 0.15,
            pixel_batch: 0,
            distortion_start_factor: 2,
            tilt_start_factor: 2,
        }
    }
}

impl RunConfig {
    /// Applies one `key = value` pair from a plain-text configuration.
    /// Returns `Ok(false)` for keys this config does not own (callers may
    /// layer their own keys on the same file).
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        fn parse<T: core::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.trim().parse().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                reason: format!("cannot parse `{value}`"),
            })
        }
        fn parse_list<T: core::str::FromStr>(
            key: &str,
            value: &str,
        ) -> Result<Vec<T>, ConfigError> {
            value
                .split(',')
                .map(|t| {
                    t.trim().parse().map_err(|_| ConfigError::BadValue {
                        key: key.into(),
                        reason: format!("cannot parse element `{t}`"),
                    })
                })
                .collect()
        }
        match key {
            "magnification" => self.magnification = parse(key, value)?,
            "sensor_pitch_mm" => self.sensor_pitch_mm = parse(key, value)?,
            "f_eff_mm" => self.f_eff_mm = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "n_r" => self.n_r = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "architecture" => self.architecture = parse_list(key, value)?,
            "lambda_h" => self.lambda_h = parse(key, value)?,
            "lambda_tv" => self.lambda_tv = parse(key, value)?,
            "schedule_factors" => self.schedule_factors = parse_list(key, value)?,
            "schedule_fractions" => self.schedule_fractions = parse_list(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lr_xy" => self.lr_xy = parse(key, value)?,
            "lr_z" => self.lr_z = parse(key, value)?,
            "lr_tilt" => self.lr_tilt = parse(key, value)?,
            "lr_theta" => self.lr_theta = parse(key, value)?,
            "lr_nodes" => self.lr_nodes = parse(key, value)?,
            "lr_center" => self.lr_center = parse(key, value)?,
            "lr_cnn" => self.lr_cnn = parse(key, value)?,
            "lr_height" => self.lr_height = parse(key, value)?,
            "s_h" => self.s_h = parse(key, value)?,
            "grid_margin_frac" => self.grid_margin_frac = parse(key, value)?,
            "pixel_batch" => self.pixel_batch = parse(key, value)?,
            "distortion_start_factor" => self.distortion_start_factor = parse(key, value)?,
            "tilt_start_factor" => self.tilt_start_factor = parse(key, value)?,
            "init_mode" => {
                self.init_mode = match value.trim() {
                    "same-position" => InitMode::SamePosition,
                    "cross-correlation" => InitMode::CrossCorrelation,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            reason: format!("unknown mode `{other}`"),
                        })
                    }
                }
            }
            "height_model" => {
                self.height_model = match value.trim() {
                    "cnn" => HeightModel::Cnn,
                    "direct" => HeightModel::Direct,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            reason: format!("unknown model `{other}`"),
                        })
                    }
                }
            }
            "undistortion" => {
                let v = value.trim();
                self.undistortion = if v == "piecewise" {
                    UndistortionKind::Piecewise
                } else if let Some(order) = v.strip_prefix("polynomial") {
                    UndistortionKind::Polynomial(parse(key, order.trim_start_matches(':'))?)
                } else {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        reason: format!("unknown undistortion `{v}`"),
                    });
                };
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if !(self.magnification > 0.0) {
            return Err(PipelineError::Config("magnification required (M_0 > 0)"));
        }
        if !(self.sensor_pitch_mm > 0.0) || !(self.f_eff_mm > 0.0) || !(self.s_h > 0.0) {
            return Err(PipelineError::Config("physical quantities must be positive"));
        }
        if self.batch_size == 0 {
            return Err(PipelineError::Config("batch_size must be >= 1"));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(PipelineError::Config("momentum must lie in (0, 1)"));
        }
        if self.n_r < 2 {
            return Err(PipelineError::Config("n_r must be >= 2"));
        }
        if self.schedule_factors.is_empty()
            || self.schedule_factors.len() != self.schedule_fractions.len()
        {
            return Err(PipelineError::Config(
                "schedule factors and fractions must align",
            ));
        }
        if *self.schedule_factors.last().unwrap() != 1 {
            return Err(PipelineError::Config("schedule must end at factor 1"));
        }
        if self.schedule_factors.iter().any(|&f| f == 0) {
            return Err(PipelineError::Config("schedule factors must be >= 1"));
        }
        let frac_sum: f64 = self.schedule_fractions.iter().sum();
        if (frac_sum - 1.0).abs() > 1e-6 {
            return Err(PipelineError::Config("schedule fractions must sum to 1"));
        }
        if Architecture::new(self.architecture.clone()).is_err() {
            return Err(PipelineError::Config("invalid architecture list"));
        }
        if self.lambda_h < 0.0 || self.lambda_tv < 0.0 {
            return Err(PipelineError::Config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// One progress record per iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub iteration: usize,
    pub stage_factor: usize,
    pub loss: f64,
    pub rgb_mse: f64,
    pub h_mse: f64,
    pub tv: f64,
}

/// Counters surfaced after a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub dropped_samples: u64,
    pub clamped_radii: u64,
    pub skipped_steps: u64,
    pub monotonicity_violations: u64,
    pub init_events: Vec<String>,
}

/// Everything a run produces.
pub struct RunOutput {
    pub recon: Reconstruction,
    pub params: DeformationParams,
    pub net: Network,
    /// Direct-height mode: the optimized per-frame maps.
    pub heights_direct: Option<Vec<Vec<f32>>>,
    pub diagnostics: Diagnostics,
}

/// Per-stage downsampled frames.
pub(crate) struct StageFrames {
    pub frames: Vec<RgbFrame>,
    pub rows: usize,
    pub cols: usize,
}

/// Box-averages one plane by `k` (trailing remainder rows/cols dropped).
pub(crate) fn downsample_plane(
    plane: &[f32],
    rows: usize,
    cols: usize,
    k: usize,
) -> (Vec<f32>, usize, usize) {
    if k <= 1 {
        return (plane.to_vec(), rows, cols);
    }
    let (or, oc) = (rows / k, cols / k);
    let mut out = Vec::with_capacity(or * oc);
    let inv = 1.0 / (k * k) as f32;
    for r in 0..or {
        for c in 0..oc {
            let mut acc = 0.0f32;
            for dr in 0..k {
                let base = (r * k + dr) * cols + c * k;
                for dc in 0..k {
                    acc += plane[base + dc];
                }
            }
            out.push(acc * inv);
        }
    }
    (out, or, oc)
}

/// Box-averages a frame by `k` in both dimensions (used for multi-scale
/// stages and for optional input preprocessing).
pub fn downsample_frame(frame: &RgbFrame, k: usize) -> RgbFrame {
    let plane = frame.rows * frame.cols;
    let mut rgb = Vec::new();
    let mut dims = (frame.rows, frame.cols);
    for ch in 0..3 {
        let (p, r, c) = downsample_plane(
            &frame.rgb[ch * plane..(ch + 1) * plane],
            frame.rows,
            frame.cols,
            k,
        );
        dims = (r, c);
        rgb.extend(p);
    }
    RgbFrame {
        rows: dims.0,
        cols: dims.1,
        rgb,
    }
}

/// Deterministic sampler yielding `batch_size` distinct frame indices per
/// call, walking shuffled epochs.
struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(frames: usize, seed: u64) -> Self {
        EpochSampler {
            order: (0..frames).collect(),
            cursor: frames, // force shuffle on first draw
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn shuffle(&mut self) {
        let n = self.order.len();
        for i in (1..n).rev() {
            let j = (self.rng.next_u64() % (i as u64 + 1)) as usize;
            self.order.swap(i, j);
        }
        self.cursor = 0;
    }

    fn draw(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.cursor >= self.order.len() {
                self.shuffle();
            }
            let candidate = self.order[self.cursor];
            self.cursor += 1;
            if !out.contains(&candidate) {
                out.push(candidate);
            }
        }
        out
    }
}

/// Initializes deformation parameters: lateral positions from zeros or
/// sequential cross-correlation, nominal heights `Z_i = Z_0`, zero
/// tilt/roll, identity distortion.
pub fn init_poses(
    dataset: &Dataset,
    cfg: &RunConfig,
    ctx: &AutofocusContext,
) -> (DeformationParams, Vec<String>) {
    let frames = dataset.frames.len();
    let coarsest = cfg.schedule_factors.iter().copied().max().unwrap_or(1);
    let mut events = Vec::new();
    let mut lateral = vec![(0.0f64, 0.0f64); frames];
    if cfg.init_mode == InitMode::CrossCorrelation && frames > 1 {
        let (offsets, raw_events) = init::cross_correlation_offsets(&dataset.frames, coarsest);
        // Coarse-pixel offsets to world mm: content shifts with the
        // camera, scaled by pitch / M at the coarse level.
        let px_to_mm = dataset.sensor_pitch_mm * coarsest as f64 / cfg.magnification;
        let mut acc = (0.0f64, 0.0f64);
        for (i, (dx, dy)) in offsets.iter().enumerate() {
            acc.0 += dx * px_to_mm;
            acc.1 += dy * px_to_mm;
            lateral[i] = acc;
        }
        for e in raw_events {
            events.push(format!("{e:?}"));
        }
    }
    let half_diag = {
        let f = &dataset.frames[0];
        crate::math::hypot(0.5 * (f.cols - 1) as f64, 0.5 * (f.rows - 1) as f64)
    };
    let undist = match cfg.undistortion {
        UndistortionKind::Piecewise => {
            let model = RadialUndistortion::for_sensor(cfg.n_r, half_diag);
            UndistState::Piecewise {
                nodes: model.samples().to_vec(),
                delta_r: model.delta_r(),
                center: [0.0, 0.0],
            }
        }
        UndistortionKind::Polynomial(order) => UndistState::Polynomial {
            coeffs: vec![0.0; (order / 2).max(1)],
            r_scale: half_diag,
            center: [0.0, 0.0],
        },
    };
    let poses = lateral
        .iter()
        .map(|&(x, y)| PoseState {
            x,
            y,
            z: ctx.z0,
            n_x: 0.0,
            n_y: 0.0,
            theta: 0.0,
        })
        .collect();
    (
        DeformationParams {
            poses,
            undist,
            ctx: *ctx,
        },
        events,
    )
}

/// World extent of all frame footprints under the current parameters
/// (corner pixels, heights zero).
fn footprint_extent(
    stage_rows: usize,
    stage_cols: usize,
    factor: usize,
    full_rows: usize,
    full_cols: usize,
    sensor_pitch: f64,
    params: &DeformationParams,
) -> Result<(Vec2, Vec2), PipelineError> {
    let radial = params.undist.to_radial();
    let identity = RadialUndistortion::identity(2, 1.0);
    let model = radial.as_ref().unwrap_or(&identity);
    let mut min = Vec2::new(f64::MAX, f64::MAX);
    let mut max = Vec2::new(f64::MIN, f64::MIN);
    let k = factor as f64;
    let cx = 0.5 * (full_cols - 1) as f64;
    let cy = 0.5 * (full_rows - 1) as f64;
    for i in 0..params.poses.len() {
        let pose = params.camera_pose(i)?;
        for (r, c) in [
            (0usize, 0usize),
            (0, stage_cols - 1),
            (stage_rows - 1, 0),
            (stage_rows - 1, stage_cols - 1),
        ] {
            let px = Vec2::new(
                c as f64 * k + 0.5 * (k - 1.0) - cx,
                r as f64 * k + 0.5 * (k - 1.0) - cy,
            );
            let p = backproject_pipeline(px, &pose, model, sensor_pitch);
            min = Vec2::new(min.x.min(p.x), min.y.min(p.y));
            max = Vec2::new(max.x.max(p.x), max.y.max(p.y));
        }
    }
    Ok((min, max))
}

fn renormalize_nodes(undist: &mut UndistState, violations: &mut u64) {
    if let UndistState::Piecewise { nodes, delta_r, .. } = undist {
        let max = nodes.iter().copied().fold(f64::MIN, f64::max);
        if max > 0.0 {
            for n in nodes.iter_mut() {
                *n /= max;
            }
        }
        // Invertibility check after the step: g(r) = r M(r) must stay
        // strictly increasing.
        if let Ok(model) = RadialUndistortion::new(nodes.clone(), *delta_r, Vec2::ZERO) {
            if !model.is_monotone() {
                *violations += 1;
            }
        }
    }
}

/// Adam optimizer groups for every trainable parameter set.
struct Optimizer {
    xy: Vec<AdamState>,
    z: Vec<AdamState>,
    tilt: Vec<AdamState>,
    theta: Vec<AdamState>,
    nodes: AdamState,
    poly: AdamState,
    center: AdamState,
    cnn: Vec<AdamState>,
    heights: Vec<AdamState>,
}

impl Optimizer {
    fn new(params: &DeformationParams, net: &Network, height_len: usize) -> Self {
        let frames = params.poses.len();
        let (nodes_len, poly_len) = match &params.undist {
            UndistState::Piecewise { nodes, .. } => (nodes.len(), 0),
            UndistState::Polynomial { coeffs, .. } => (0, coeffs.len()),
        };
        Optimizer {
            xy: (0..frames).map(|_| AdamState::new(2)).collect(),
            z: (0..frames).map(|_| AdamState::new(1)).collect(),
            tilt: (0..frames).map(|_| AdamState::new(2)).collect(),
            theta: (0..frames).map(|_| AdamState::new(1)).collect(),
            nodes: AdamState::new(nodes_len),
            poly: AdamState::new(poly_len),
            center: AdamState::new(2),
            cnn: net
                .params
                .iter()
                .map(|p| AdamState::new(p.data.len()))
                .collect(),
            heights: (0..frames).map(|_| AdamState::new(height_len)).collect(),
        }
    }
}

/// Applies one step's gradients; returns false (a skipped step) if any
/// gradient is non-finite.
#[allow(clippy::too_many_arguments)]
fn apply_updates(
    params: &mut DeformationParams,
    net: &mut Network,
    heights_direct: &mut Option<Vec<Vec<f32>>>,
    opt: &mut Optimizer,
    batch: &[usize],
    grads: &step::StepGrads,
    cfg: &RunConfig,
    heights_on: bool,
    lr_scale: f64,
    distortion_on: bool,
    tilt_on: bool,
) -> bool {
    let finite = grads.pose.iter().all(|g| g.iter().all(|v| v.is_finite()))
        && grads.nodes.iter().all(|v| v.is_finite())
        && grads.poly.iter().all(|v| v.is_finite())
        && grads.center.iter().all(|v| v.is_finite())
        && grads.cnn.iter().flatten().all(|v| v.is_finite())
        && grads.heights.iter().flatten().all(|v| v.is_finite());
    if !finite {
        return false;
    }

    for (b, &f) in batch.iter().enumerate() {
        let g = grads.pose[b];
        let p = &mut params.poses[f];
        if f != 0 {
            let mut xy = [p.x, p.y];
            adam_step(
                &mut opt.xy[f],
                &mut xy,
                &[g[0], g[1]],
                &AdamHyper::with_lr(cfg.lr_xy * lr_scale),
            )
            .expect("finite checked");
            p.x = xy[0];
            p.y = xy[1];
            let mut theta = [p.theta];
            adam_step(
                &mut opt.theta[f],
                &mut theta,
                &[g[5]],
                &AdamHyper::with_lr(cfg.lr_theta * lr_scale),
            )
            .expect("finite checked");
            p.theta = theta[0];
            let mut z = [p.z];
            adam_step(
                &mut opt.z[f],
                &mut z,
                &[g[2]],
                &AdamHyper::with_lr(cfg.lr_z * lr_scale),
            )
            .expect("finite checked");
            p.z = z[0];
        }
        if tilt_on {
            let mut tilt = [p.n_x, p.n_y];
            adam_step(
                &mut opt.tilt[f],
                &mut tilt,
                &[g[3], g[4]],
                &AdamHyper::with_lr(cfg.lr_tilt * lr_scale),
            )
            .expect("finite checked");
            // Stay inside the validated tilt domain.
            p.n_x = tilt[0].clamp(-0.29, 0.29);
            p.n_y = tilt[1].clamp(-0.29, 0.29);
        }
    }

    if distortion_on {
        match &mut params.undist {
        UndistState::Piecewise { nodes, center, .. } => {
            adam_step(
                &mut opt.nodes,
                nodes,
                &grads.nodes,
                &AdamHyper::with_lr(cfg.lr_nodes * lr_scale),
            )
            .expect("finite checked");
            // Magnification positivity.
            for n in nodes.iter_mut() {
                *n = n.max(1e-3);
            }
            adam_step(
                &mut opt.center,
                center,
                &grads.center,
                &AdamHyper::with_lr(cfg.lr_center * lr_scale),
            )
            .expect("finite checked");
        }
        UndistState::Polynomial { coeffs, center, .. } => {
            adam_step(
                &mut opt.poly,
                coeffs,
                &grads.poly,
                &AdamHyper::with_lr(cfg.lr_nodes * lr_scale),
            )
            .expect("finite checked");
            adam_step(
                &mut opt.center,
                center,
                &grads.center,
                &AdamHyper::with_lr(cfg.lr_center * lr_scale),
            )
            .expect("finite checked");
        }
        }
    }

    if heights_on {
        match cfg.height_model {
            HeightModel::Cnn => {
                for (i, g) in grads.cnn.iter().enumerate() {
                    if g.is_empty() {
                        continue;
                    }
                    adam_step_f32(
                        &mut opt.cnn[i],
                        &mut net.params[i].data,
                        g,
                        &AdamHyper::with_lr(cfg.lr_cnn),
                    )
                    .expect("finite checked");
                }
            }
            HeightModel::Direct => {
                if let Some(maps) = heights_direct {
                    for (b, &f) in batch.iter().enumerate() {
                        let g = &grads.heights[b];
                        if g.is_empty() {
                            continue;
                        }
                        adam_step_f32(
                            &mut opt.heights[f],
                            &mut maps[f],
                            g,
                            &AdamHyper::with_lr(cfg.lr_height),
                        )
                        .expect("finite checked");
                    }
                }
            }
        }
    }
    true
}

/// Executes the staged optimization and returns the full-resolution
/// reconstruction, final parameters, and the network.
pub fn run(
    dataset: &Dataset,
    cfg: &RunConfig,
    progress: &mut dyn FnMut(&Progress),
) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    if dataset.frames.is_empty() {
        return Err(PipelineError::Dataset("no frames"));
    }
    let (full_rows, full_cols) = (dataset.frames[0].rows, dataset.frames[0].cols);
    if dataset
        .frames
        .iter()
        .any(|f| f.rows != full_rows || f.cols != full_cols)
    {
        return Err(PipelineError::Dataset("frames differ in size"));
    }
    if !(dataset.sensor_pitch_mm > 0.0) {
        return Err(PipelineError::Dataset("sensor pitch must be positive"));
    }

    let ctx = AutofocusContext::new(cfg.f_eff_mm, cfg.magnification)?;
    let (mut params, init_events) = init_poses(dataset, cfg, &ctx);
    let gauge = (
        params.poses[0].x,
        params.poses[0].y,
        params.poses[0].z,
        params.poses[0].theta,
    );

    let mut net = dipnet::build(Architecture::new(cfg.architecture.clone())?, cfg.seed)?;
    net.s_h = cfg.s_h as f32;
    let mut heights_direct = match cfg.height_model {
        HeightModel::Direct => Some(vec![
            vec![0.0f32; full_rows * full_cols];
            dataset.frames.len()
        ]),
        HeightModel::Cnn => None,
    };
    let mut opt = Optimizer::new(&params, &net, full_rows * full_cols);
    let mut diagnostics = Diagnostics {
        init_events,
        ..Diagnostics::default()
    };

    // Stage iteration counts from the schedule fractions.
    let mut stage_iters: Vec<usize> = cfg
        .schedule_fractions
        .iter()
        .map(|f| (f * cfg.iterations as f64) as usize)
        .collect();
    let assigned: usize = stage_iters.iter().sum();
    if let Some(last) = stage_iters.last_mut() {
        *last += cfg.iterations - assigned.min(cfg.iterations);
    }

    let mut sampler = EpochSampler::new(dataset.frames.len(), cfg.seed ^ 0x5851_f42d);
    let mut pixel_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let mut global_iter = 0usize;

    for (stage_ix, (&factor, &iters)) in cfg
        .schedule_factors
        .iter()
        .zip(stage_iters.iter())
        .enumerate()
    {
        let frames: Vec<RgbFrame> = dataset
            .frames
            .iter()
            .map(|f| downsample_frame(f, factor))
            .collect();
        let stage = StageFrames {
            rows: frames[0].rows,
            cols: frames[0].cols,
            frames,
        };
        let heights_on = factor == 1;

        let (min, max) = footprint_extent(
            stage.rows,
            stage.cols,
            factor,
            full_rows,
            full_cols,
            dataset.sensor_pitch_mm,
            &params,
        )?;
        let grid_pitch = dataset.sensor_pitch_mm * factor as f64 / cfg.magnification;
        let mut recon = Reconstruction::with_extent(min, max, grid_pitch, cfg.grid_margin_frac);
        let geom = StageGeom {
            factor,
            rows: stage.rows,
            cols: stage.cols,
            full_rows,
            full_cols,
            sensor_pitch: dataset.sensor_pitch_mm,
            grid_origin: recon.origin,
            grid_pitch,
        };

        // Form the stage's initial reconstruction from all frames.
        {
            let height_source = if !heights_on {
                HeightSource::Zero
            } else {
                match cfg.height_model {
                    HeightModel::Cnn => HeightSource::Cnn,
                    HeightModel::Direct => HeightSource::Direct(
                        heights_direct.as_deref().expect("allocated for direct mode"),
                    ),
                }
            };
            diagnostics.dropped_samples += full_scatter_pass(
                &stage,
                &geom,
                &params,
                &height_source,
                Some(&net),
                &mut recon,
            )? as u64;
        }

        for stage_iter in 0..iters {
            let batch = sampler.draw(cfg.batch_size.min(dataset.frames.len()));
            // Pose and distortion steps scale with the stage resolution;
            // the final stage additionally decays linearly to settle.
            let lr_scale = factor as f64
                * if factor == 1 && iters > 1 {
                    let t = stage_iter as f64 / (iters - 1) as f64;
                    1.0 - 0.9 * t
                } else {
                    1.0
                };
            let pixel_subset: Option<Vec<Vec<u32>>> = if cfg.pixel_batch > 0 {
                let l = (stage.rows * stage.cols) as u64;
                Some(
                    (0..batch.len())
                        .map(|_| {
                            (0..cfg.pixel_batch.min(l as usize))
                                .map(|_| (pixel_rng.next_u64() % l) as u32)
                                .collect()
                        })
                        .collect(),
                )
            } else {
                None
            };
            let height_source = if !heights_on {
                HeightSource::Zero
            } else {
                match cfg.height_model {
                    HeightModel::Cnn => HeightSource::Cnn,
                    HeightModel::Direct => HeightSource::Direct(
                        heights_direct.as_deref().expect("allocated for direct mode"),
                    ),
                }
            };
            let result = batch_step(
                &stage,
                &geom,
                &batch,
                &params,
                &height_source,
                Some(&net),
                &mut recon,
                cfg,
                ReconRoute::Constant,
                pixel_subset.as_deref(),
            )?;
            diagnostics.dropped_samples += result.dropped_samples as u64;
            diagnostics.clamped_radii += result.clamped_radii as u64;

            if !result.loss.is_finite() {
                return Err(PipelineError::NonFiniteLoss {
                    stage: stage_ix,
                    iteration: global_iter,
                    diagnostics: format!("{diagnostics:?}"),
                });
            }

            let applied = apply_updates(
                &mut params,
                &mut net,
                &mut heights_direct,
                &mut opt,
                &batch,
                &result.grads,
                cfg,
                heights_on,
                lr_scale,
                factor <= cfg.distortion_start_factor,
                factor <= cfg.tilt_start_factor,
            );
            if !applied {
                diagnostics.skipped_steps += 1;
            } else {
                renormalize_nodes(&mut params.undist, &mut diagnostics.monotonicity_violations);
                if heights_on && cfg.height_model == HeightModel::Cnn {
                    if let Some(stats) = &result.bn_stats {
                        net.update_running_stats(stats);
                    }
                }
            }

            // Gauge anchoring: frame 0's lateral position, height, and
            // roll stay at their initialization values.
            debug_assert_eq!(
                (
                    params.poses[0].x,
                    params.poses[0].y,
                    params.poses[0].z,
                    params.poses[0].theta,
                ),
                gauge
            );

            progress(&Progress {
                iteration: global_iter,
                stage_factor: factor,
                loss: result.loss,
                rgb_mse: result.rgb_mse,
                h_mse: result.h_mse,
                tv: result.tv,
            });
            global_iter += 1;
        }
    }

    // Final full-resolution reconstruction: one scatter-average pass over
    // all frames with the converged parameters.
    let stage = StageFrames {
        rows: full_rows,
        cols: full_cols,
        frames: dataset.frames.clone(),
    };
    let height_source = match cfg.height_model {
        HeightModel::Cnn => HeightSource::Cnn,
        HeightModel::Direct => {
            HeightSource::Direct(heights_direct.as_deref().expect("allocated for direct mode"))
        }
    };
    let (min, max) = footprint_extent(
        full_rows,
        full_cols,
        1,
        full_rows,
        full_cols,
        dataset.sensor_pitch_mm,
        &params,
    )?;
    let grid_pitch = dataset.sensor_pitch_mm / cfg.magnification;
    let mut recon = Reconstruction::with_extent(min, max, grid_pitch, cfg.grid_margin_frac);
    let geom = StageGeom {
        factor: 1,
        rows: full_rows,
        cols: full_cols,
        full_rows,
        full_cols,
        sensor_pitch: dataset.sensor_pitch_mm,
        grid_origin: recon.origin,
        grid_pitch,
    };
    diagnostics.dropped_samples += full_scatter_pass(
        &stage,
        &geom,
        &params,
        &height_source,
        Some(&net),
        &mut recon,
    )? as u64;

    Ok(RunOutput {
        recon,
        params,
        net,
        heights_direct,
        diagnostics,
    })
}
