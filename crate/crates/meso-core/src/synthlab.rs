//! Forward renderer and quantitative evaluation for synthetic scenes.
//!
//! The renderer is the ground-truth oracle for the whole pipeline: given
//! a textured height-field scene, known poses, distortion, and autofocus
//! state, it produces camera frames by tracing each output pixel through
//! the exact (non-Taylor) deformation chain, so pipeline error
//! measurements isolate the Taylor approximation:
//!
//! ```text
//! pixel -> undistort -> rotate -> exact tilted backprojection
//!       -> add lateral position -> parallax fixed point -> sample scene
//! ```
//!
//! Parallax treats each scene cell's height as a local radial
//! displacement toward the vanishing point (no occlusion handling),
//! which is valid in the mesoscopic near-nadir regime. The module also
//! builds calibrated plateau phantoms and scores reconstructed height
//! rasters against them (accuracy after a global shift, precision as the
//! in-region spread).

use alloc::vec;
use alloc::vec::Vec;

use crate::distortion::{DistortionError, RadialUndistortion};
use crate::geometry::{
    backproject_exact, project_exact, rotate_in_plane, AutofocusContext, CameraPose,
    GeometryError, Vec2,
};
use crate::math;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(&'static str),
    #[error("plateaus overlap")]
    OverlapError,
    #[error("camera footprint exceeds the scene")]
    FootprintExceedsScene,
    #[error("region {0} has no cells")]
    EmptyRegion(u16),
    #[error("raster shapes do not match")]
    ShapeMismatch,
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("distortion: {0}")]
    Distortion(#[from] DistortionError),
}

/// Mask value marking cells excluded from evaluation (after erosion).
pub const MASK_EXCLUDED: u16 = u16::MAX;

/// A textured height-field scene over the object plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub rows: usize,
    pub cols: usize,
    /// RGB texture, three row-major planes in [0, 1].
    pub texture: Vec<f32>,
    /// Height in mm, row-major.
    pub heightfield: Vec<f32>,
    /// mm per cell.
    pub pitch: f64,
    /// World coordinates of the center of cell (0, 0).
    pub origin: Vec2,
}

impl Scene {
    /// Continuous cell coordinates (col, row) of a world point.
    #[inline]
    pub fn world_to_cell(&self, p: Vec2) -> (f64, f64) {
        (
            (p.x - self.origin.x) / self.pitch,
            (p.y - self.origin.y) / self.pitch,
        )
    }

    fn bilinear(&self, plane: &[f32], p: Vec2) -> Option<f64> {
        let (cx, cy) = self.world_to_cell(p);
        let x0 = math::floor(cx);
        let y0 = math::floor(cy);
        if x0 < 0.0 || y0 < 0.0 || x0 + 1.0 > (self.cols - 1) as f64 || y0 + 1.0 > (self.rows - 1) as f64
        {
            return None;
        }
        let (ix, iy) = (x0 as usize, y0 as usize);
        let (wx, wy) = (cx - x0, cy - y0);
        let at = |r: usize, c: usize| plane[r * self.cols + c] as f64;
        Some(
            at(iy, ix) * (1.0 - wy) * (1.0 - wx)
                + at(iy, ix + 1) * (1.0 - wy) * wx
                + at(iy + 1, ix) * wy * (1.0 - wx)
                + at(iy + 1, ix + 1) * wy * wx,
        )
    }

    pub fn sample_height(&self, p: Vec2) -> Option<f64> {
        self.bilinear(&self.heightfield, p)
    }

    pub fn sample_texture(&self, p: Vec2) -> Option<[f64; 3]> {
        let plane = self.rows * self.cols;
        let r = self.bilinear(&self.texture[..plane], p)?;
        let g = self.bilinear(&self.texture[plane..2 * plane], p)?;
        let b = self.bilinear(&self.texture[2 * plane..], p)?;
        Some([r, g, b])
    }
}

/// A rectangular plateau raised above the background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    /// Center in world mm.
    pub center: Vec2,
    /// Extents in mm.
    pub width: f64,
    pub height: f64,
    /// Plateau elevation in micrometers.
    pub elevation_um: f64,
}

/// Specification of a plateau phantom on a feature-rich flat background.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub width_mm: f64,
    pub height_mm: f64,
    pub pitch_mm: f64,
    pub plateaus: Vec<Plateau>,
    pub seed: u64,
}

impl PhantomSpec {
    /// Published cut-card plateau elevations, micrometers.
    pub const CARD_HEIGHTS_UM: [f64; 6] = [295.0, 350.0, 420.0, 485.0, 555.0, 625.0];
}

/// A phantom scene plus its region masks: 0 is background, `i + 1` is
/// plateau `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub scene: Scene,
    pub masks: Vec<u16>,
    pub region_count: usize,
    /// Ground-truth region heights in mm, indexed by region id.
    pub region_heights_mm: Vec<f64>,
}

fn value_noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: usize) -> Vec<f64> {
    let gr = rows.div_ceil(scale) + 2;
    let gc = cols.div_ceil(scale) + 2;
    let grid: Vec<f64> = (0..gr * gc)
        .map(|_| rng.next_u32() as f64 / u32::MAX as f64)
        .collect();
    let mut out = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let fy = r as f64 / scale as f64;
        let y0 = fy as usize;
        let wy = fy - y0 as f64;
        for c in 0..cols {
            let fx = c as f64 / scale as f64;
            let x0 = fx as usize;
            let wx = fx - x0 as f64;
            let g = |y: usize, x: usize| grid[y * gc + x];
            out[r * cols + c] = g(y0, x0) * (1.0 - wy) * (1.0 - wx)
                + g(y0, x0 + 1) * (1.0 - wy) * wx
                + g(y0 + 1, x0) * wy * (1.0 - wx)
                + g(y0 + 1, x0 + 1) * wy * wx;
        }
    }
    out
}

/// Builds a plateau phantom: a high-frequency random texture background
/// (registration-friendly) with raised rectangles and their segmentation
/// masks.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom, SynthError> {
    if !(spec.width_mm > 0.0) || !(spec.height_mm > 0.0) || !(spec.pitch_mm > 0.0) {
        return Err(SynthError::InvalidSpec("non-positive scene dimensions"));
    }
    let cols = (spec.width_mm / spec.pitch_mm) as usize;
    let rows = (spec.height_mm / spec.pitch_mm) as usize;
    if rows < 4 || cols < 4 {
        return Err(SynthError::InvalidSpec("scene too small for its pitch"));
    }
    let origin = Vec2::new(
        -0.5 * (cols - 1) as f64 * spec.pitch_mm,
        -0.5 * (rows - 1) as f64 * spec.pitch_mm,
    );

    // Three octaves of value noise per channel. The finest octave stays
    // at two cells: per-cell grain would alias under nearest-cell
    // binning and roughen the registration landscape, while real
    // captures are optically band-limited.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plane = rows * cols;
    let mut texture = vec![0.0f32; 3 * plane];
    for ch in 0..3 {
        let coarse = value_noise(&mut rng, rows, cols, 9);
        let mid = value_noise(&mut rng, rows, cols, 4);
        let fine = value_noise(&mut rng, rows, cols, 2);
        for j in 0..plane {
            let v = 0.12 + 0.42 * coarse[j] + 0.28 * mid[j] + 0.18 * fine[j];
            texture[ch * plane + j] = v.clamp(0.02, 0.98) as f32;
        }
    }

    let mut heightfield = vec![0.0f32; plane];
    let mut masks = vec![0u16; plane];
    let mut region_heights_mm = vec![0.0f64];
    for (i, p) in spec.plateaus.iter().enumerate() {
        if !(p.width > 0.0) || !(p.height > 0.0) {
            return Err(SynthError::InvalidSpec("non-positive plateau size"));
        }
        let h_mm = p.elevation_um * 1e-3;
        region_heights_mm.push(h_mm);
        let (c0, r0) = {
            let (cx, cy) = (
                (p.center.x - 0.5 * p.width - origin.x) / spec.pitch_mm,
                (p.center.y - 0.5 * p.height - origin.y) / spec.pitch_mm,
            );
            (math::round(cx) as i64, math::round(cy) as i64)
        };
        let nc = math::round(p.width / spec.pitch_mm) as i64;
        let nr = math::round(p.height / spec.pitch_mm) as i64;
        if c0 < 0 || r0 < 0 || c0 + nc > cols as i64 || r0 + nr > rows as i64 {
            return Err(SynthError::InvalidSpec("plateau outside scene bounds"));
        }
        for r in r0..r0 + nr {
            for c in c0..c0 + nc {
                let j = r as usize * cols + c as usize;
                if masks[j] != 0 {
                    return Err(SynthError::OverlapError);
                }
                masks[j] = (i + 1) as u16;
                heightfield[j] = h_mm as f32;
            }
        }
    }

    Ok(Phantom {
        scene: Scene {
            rows,
            cols,
            texture,
            heightfield,
            pitch: spec.pitch_mm,
            origin,
        },
        masks,
        region_count: spec.plateaus.len() + 1,
        region_heights_mm,
    })
}

/// Camera sensor geometry; pixel (row, col) maps to mm coordinates
/// relative to the image center before undistortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorGeometry {
    pub width_px: usize,
    pub height_px: usize,
    /// mm per pixel.
    pub pitch_mm: f64,
}

impl SensorGeometry {
    #[inline]
    pub fn center(&self) -> Vec2 {
        Vec2::new(
            0.5 * (self.width_px - 1) as f64,
            0.5 * (self.height_px - 1) as f64,
        )
    }

    #[inline]
    pub fn half_diagonal_px(&self) -> f64 {
        math::hypot(
            0.5 * (self.width_px - 1) as f64,
            0.5 * (self.height_px - 1) as f64,
        )
    }
}

/// One rendered camera frame: RGB planes plus the ground-truth
/// camera-centric height map (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub rgb: Vec<f32>,
    pub height: Vec<f32>,
}

/// Traces one pixel through the exact deformation chain, returning the
/// sampled world position and the surface height there.
///
/// The parallax displacement satisfies a fixed point (the height at the
/// rectified location determines the rectification); a few iterations
/// converge everywhere except within a cell of plateau edges.
pub fn trace_pixel(
    scene: &Scene,
    pose: &CameraPose,
    undist: &RadialUndistortion,
    ctx: &AutofocusContext,
    sensor: &SensorGeometry,
    row: usize,
    col: usize,
) -> Result<(Vec2, f64), SynthError> {
    let center = sensor.center();
    let p_px = Vec2::new(col as f64 - center.x, row as f64 - center.y);
    let p_u = undist.undistort(p_px).scale(sensor.pitch_mm);
    let p_rot = rotate_in_plane(p_u, pose.theta);
    let rel = match backproject_exact(p_rot, pose) {
        Ok(v) => v,
        Err(GeometryError::DegenerateTilt) => {
            // Zero tilt: the exact map reduces to the plain pinhole form.
            p_rot.scale(pose.z / (pose.f_ph * pose.n[2]))
        }
        Err(e) => return Err(e.into()),
    };
    let scale = ctx.rectification_scale(pose.z);
    let mut h = 0.0f64;
    for _ in 0..8 {
        let probe = pose.lateral() + rel.scale(1.0 - h / scale);
        h = scene
            .sample_height(probe)
            .ok_or(SynthError::FootprintExceedsScene)?;
    }
    let r_w = pose.lateral() + rel.scale(1.0 - h / scale);
    Ok((r_w, h))
}

/// Renders one camera frame (and its ground-truth camera-centric height
/// map) with bilinear texture sampling and optional additive Gaussian
/// noise.
pub fn render_frame(
    scene: &Scene,
    pose: &CameraPose,
    undist: &RadialUndistortion,
    ctx: &AutofocusContext,
    sensor: &SensorGeometry,
    noise_sigma: f32,
    noise_seed: u64,
) -> Result<RenderedFrame, SynthError> {
    let (h_px, w_px) = (sensor.height_px, sensor.width_px);
    let plane = h_px * w_px;
    let mut rgb = vec![0.0f32; 3 * plane];
    let mut height = vec![0.0f32; plane];
    for row in 0..h_px {
        for col in 0..w_px {
            let (r_w, h) = trace_pixel(scene, pose, undist, ctx, sensor, row, col)?;
            let texel = scene
                .sample_texture(r_w)
                .ok_or(SynthError::FootprintExceedsScene)?;
            let j = row * w_px + col;
            rgb[j] = texel[0] as f32;
            rgb[plane + j] = texel[1] as f32;
            rgb[2 * plane + j] = texel[2] as f32;
            height[j] = h as f32;
        }
    }
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut normal = || -> f64 {
            let u1 = ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64).max(1e-300);
            let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
        };
        for v in &mut rgb {
            *v = (*v + noise_sigma * normal() as f32).clamp(0.0, 1.0);
        }
    }
    Ok(RenderedFrame { rgb, height })
}

/// Inverse of the render chain: maps a world surface point of height `h`
/// to (distorted) pixel coordinates relative to the image center.
pub fn project_to_pixel(
    r_w: Vec2,
    h: f64,
    pose: &CameraPose,
    undist: &RadialUndistortion,
    ctx: &AutofocusContext,
    sensor: &SensorGeometry,
) -> Result<Vec2, SynthError> {
    let scale = ctx.rectification_scale(pose.z);
    let shrink = 1.0 - h / scale;
    if math::abs(shrink) < 1e-12 {
        return Err(SynthError::InvalidSpec("surface point at camera height"));
    }
    let rel = (r_w - pose.lateral()).scale(1.0 / shrink);
    let p_mm = project_exact(rel, pose)?;
    let p_unrot = rotate_in_plane(p_mm, -pose.theta);
    let p_px = p_unrot.scale(1.0 / sensor.pitch_mm);
    Ok(undist.distort(p_px)?)
}

/// Per-region accuracy/precision of a reconstructed height raster.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionStats {
    pub region: u16,
    pub cells: usize,
    /// Raw region mean before the global shift, mm.
    pub mean_mm: f64,
    /// |mean + shift - ground truth|, mm.
    pub accuracy_mm: f64,
    /// In-region sample standard deviation, mm.
    pub precision_mm: f64,
}

/// Evaluation of an estimated height raster against region ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightEvaluation {
    pub per_region: Vec<RegionStats>,
    /// Global shift added to the estimate (mean of per-region
    /// ground-truth minus estimate means), mm.
    pub shift_mm: f64,
    /// Least-squares rescale factor cov(gt, est)/var(est) over region
    /// means; 1.0 means the estimate is already correctly scaled.
    pub rescale: f64,
}

/// Scores `estimate` (mm, row-major, congruent with `masks`) against the
/// ground-truth region heights. Height maps carry an arbitrary global
/// shift, so accuracy is measured after removing the region-mean shift;
/// precision is the in-region spread and is shift-independent. Cells
/// with [`MASK_EXCLUDED`] are ignored.
pub fn evaluate_heights(
    estimate: &[f32],
    masks: &[u16],
    region_heights_mm: &[f64],
) -> Result<HeightEvaluation, SynthError> {
    if estimate.len() != masks.len() {
        return Err(SynthError::ShapeMismatch);
    }
    let regions = region_heights_mm.len();
    let mut count = vec![0usize; regions];
    let mut sum = vec![0.0f64; regions];
    for (&m, &e) in masks.iter().zip(estimate.iter()) {
        if m == MASK_EXCLUDED {
            continue;
        }
        let m = m as usize;
        if m >= regions {
            return Err(SynthError::ShapeMismatch);
        }
        count[m] += 1;
        sum[m] += e as f64;
    }
    for (r, &n) in count.iter().enumerate() {
        if n == 0 {
            return Err(SynthError::EmptyRegion(r as u16));
        }
    }
    let means: Vec<f64> = sum.iter().zip(count.iter()).map(|(s, &n)| s / n as f64).collect();
    let mut sq = vec![0.0f64; regions];
    for (&m, &e) in masks.iter().zip(estimate.iter()) {
        if m == MASK_EXCLUDED {
            continue;
        }
        let m = m as usize;
        let d = e as f64 - means[m];
        sq[m] += d * d;
    }

    let shift = region_heights_mm
        .iter()
        .zip(means.iter())
        .map(|(gt, est)| gt - est)
        .sum::<f64>()
        / regions as f64;

    let mean_gt = region_heights_mm.iter().sum::<f64>() / regions as f64;
    let mean_est = means.iter().sum::<f64>() / regions as f64;
    let mut cov = 0.0f64;
    let mut var = 0.0f64;
    for (gt, est) in region_heights_mm.iter().zip(means.iter()) {
        cov += (gt - mean_gt) * (est - mean_est);
        var += (est - mean_est) * (est - mean_est);
    }
    let rescale = if var > 0.0 { cov / var } else { 1.0 };

    let per_region = (0..regions)
        .map(|r| RegionStats {
            region: r as u16,
            cells: count[r],
            mean_mm: means[r],
            accuracy_mm: math::abs(means[r] + shift - region_heights_mm[r]),
            precision_mm: if count[r] > 1 {
                math::sqrt(sq[r] / (count[r] - 1) as f64)
            } else {
                0.0
            },
        })
        .collect();

    Ok(HeightEvaluation {
        per_region,
        shift_mm: shift,
        rescale,
    })
}

/// Excludes cells within `radius` (Chebyshev) of a region boundary,
/// mirroring the conservative manual segmentation used for real samples.
pub fn erode_masks(masks: &[u16], rows: usize, cols: usize, radius: usize) -> Vec<u16> {
    let mut out = masks.to_vec();
    if radius == 0 {
        return out;
    }
    for r in 0..rows {
        for c in 0..cols {
            let here = masks[r * cols + c];
            let r0 = r.saturating_sub(radius);
            let r1 = (r + radius).min(rows - 1);
            let c0 = c.saturating_sub(radius);
            let c1 = (c + radius).min(cols - 1);
            'scan: for rr in r0..=r1 {
                for cc in c0..=c1 {
                    if masks[rr * cols + cc] != here {
                        out[r * cols + c] = MASK_EXCLUDED;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

/// Jitter magnitudes for a synthetic capture sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseJitter {
    pub tilt: f64,
    pub z_frac: f64,
    pub theta: f64,
}

impl PoseJitter {
    pub fn moderate() -> Self {
        PoseJitter {
            tilt: 0.02,
            z_frac: 0.02,
            theta: 0.02,
        }
    }

    pub fn none() -> Self {
        PoseJitter {
            tilt: 0.0,
            z_frac: 0.0,
            theta: 0.0,
        }
    }
}

/// Plans a serpentine lateral scan of `count` poses covering roughly
/// `span_x x span_y` mm, with jittered tilt, height, and roll.
pub fn plan_scan_poses(
    count: usize,
    span_x: f64,
    span_y: f64,
    z_nominal: f64,
    f_ph: f64,
    jitter: PoseJitter,
    seed: u64,
) -> Vec<CameraPose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |lo: f64, hi: f64| lo + (hi - lo) * (rng.next_u32() as f64 / u32::MAX as f64);
    let cols = count.div_ceil(2).max(1);
    let rows = count.div_ceil(cols);
    let mut poses = Vec::with_capacity(count);
    for i in 0..count {
        let r = i / cols;
        let c_raw = i % cols;
        let c = if r % 2 == 0 { c_raw } else { cols - 1 - c_raw };
        let fx = if cols > 1 {
            c as f64 / (cols - 1) as f64 - 0.5
        } else {
            0.0
        };
        let fy = if rows > 1 {
            r as f64 / (rows - 1) as f64 - 0.5
        } else {
            0.0
        };
        // First frame is the gauge anchor: keep it exactly nominal.
        let (tilt_x, tilt_y, theta, z) = if i == 0 {
            (0.0, 0.0, 0.0, z_nominal)
        } else {
            (
                uniform(-jitter.tilt, jitter.tilt),
                uniform(-jitter.tilt, jitter.tilt),
                uniform(-jitter.theta, jitter.theta),
                z_nominal * (1.0 + uniform(-jitter.z_frac, jitter.z_frac)),
            )
        };
        poses.push(
            CameraPose::with_tilt(fx * span_x, fy * span_y, z, tilt_x, tilt_y, theta, f_ph)
                .expect("planned pose within validation limits"),
        );
    }
    poses
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::backproject_pipeline;
    use crate::geometry::ortho_rectify;

    fn flat_spec() -> PhantomSpec {
        PhantomSpec {
            width_mm: 12.0,
            height_mm: 9.0,
            pitch_mm: 0.05,
            plateaus: Vec::new(),
            seed: 9,
        }
    }

    fn test_setup() -> (AutofocusContext, SensorGeometry) {
        // Nominal desk-scale capture: f_eff = 4.3 mm at Z = 75 mm.
        let z0 = 75.0f64;
        let f_eff = 4.3f64;
        let f_ph = 1.0 / (1.0 / f_eff - 1.0 / z0);
        let m0 = f_ph / z0;
        let ctx = AutofocusContext::new(f_eff, m0).unwrap();
        let sensor = SensorGeometry {
            width_px: 64,
            height_px: 48,
            pitch_mm: 0.0028,
        };
        (ctx, sensor)
    }

    #[test]
    fn phantom_masks_partition_and_heights_match() {
        let spec = PhantomSpec {
            width_mm: 25.0,
            height_mm: 14.0,
            pitch_mm: 0.05,
            plateaus: PhantomSpec::CARD_HEIGHTS_UM
                .iter()
                .enumerate()
                .map(|(i, &h)| Plateau {
                    center: Vec2::new(-7.5 + 3.0 * i as f64, if i % 2 == 0 { -2.5 } else { 2.5 }),
                    width: 2.2,
                    height: 2.2,
                    elevation_um: h,
                })
                .collect(),
            seed: 1,
        };
        let phantom = make_phantom(&spec).unwrap();
        assert_eq!(phantom.region_count, 7);
        // Masks partition the raster: every cell belongs to exactly one
        // region id below region_count.
        assert!(phantom
            .masks
            .iter()
            .all(|&m| (m as usize) < phantom.region_count));
        // Heightfield agrees with the mask regions.
        for (j, &m) in phantom.masks.iter().enumerate() {
            let want = phantom.region_heights_mm[m as usize] as f32;
            assert_eq!(phantom.scene.heightfield[j], want);
        }
        // All six plateau heights present.
        for (i, &h) in PhantomSpec::CARD_HEIGHTS_UM.iter().enumerate() {
            assert!((phantom.region_heights_mm[i + 1] - h * 1e-3).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_spec_gives_flat_scene() {
        let phantom = make_phantom(&flat_spec()).unwrap();
        assert_eq!(phantom.region_count, 1);
        assert!(phantom.masks.iter().all(|&m| m == 0));
        assert!(phantom.scene.heightfield.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn overlapping_plateaus_rejected() {
        let mut spec = flat_spec();
        spec.width_mm = 20.0;
        spec.height_mm = 20.0;
        for _ in 0..2 {
            spec.plateaus.push(Plateau {
                center: Vec2::new(0.0, 0.0),
                width: 3.0,
                height: 3.0,
                elevation_um: 300.0,
            });
        }
        assert_eq!(make_phantom(&spec), Err(SynthError::OverlapError));
    }

    #[test]
    fn flat_scene_parallel_pose_is_scaled_texture_crop() {
        let phantom = make_phantom(&flat_spec()).unwrap();
        let (ctx, sensor) = test_setup();
        let pose =
            CameraPose::with_tilt(0.0, 0.0, ctx.z0, 0.0, 0.0, 0.0, ctx.f_ph()).unwrap();
        let undist = RadialUndistortion::for_sensor(30, sensor.half_diagonal_px());
        let frame = render_frame(&phantom.scene, &pose, &undist, &ctx, &sensor, 0.0, 0).unwrap();
        // Each pixel should sample the texture at the pure pinhole
        // backprojection (negative magnification -Z/f_ph).
        let mag = -pose.z / pose.f_ph;
        let center = sensor.center();
        let plane = sensor.width_px * sensor.height_px;
        for row in [0, 17, 47] {
            for col in [0, 9, 63] {
                let p_mm = Vec2::new(
                    (col as f64 - center.x) * sensor.pitch_mm,
                    (row as f64 - center.y) * sensor.pitch_mm,
                );
                let world = p_mm.scale(mag);
                let want = phantom.scene.sample_texture(world).unwrap();
                let j = row * sensor.width_px + col;
                assert!((frame.rgb[j] as f64 - want[0]).abs() < 1e-6);
                assert!((frame.rgb[plane + j] as f64 - want[1]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lateral_shift_translates_frame() {
        let phantom = make_phantom(&flat_spec()).unwrap();
        let (ctx, sensor) = test_setup();
        let undist = RadialUndistortion::for_sensor(30, sensor.half_diagonal_px());
        // Pick a world shift that lands on an exact pixel multiple:
        // pixel shift = dX * f_ph / (Z * pitch).
        let px_shift = 6usize;
        let dx = px_shift as f64 * sensor.pitch_mm * ctx.z0 / ctx.f_ph();
        let pose_a =
            CameraPose::with_tilt(0.0, 0.0, ctx.z0, 0.0, 0.0, 0.0, ctx.f_ph()).unwrap();
        let pose_b =
            CameraPose::with_tilt(dx, 0.0, ctx.z0, 0.0, 0.0, 0.0, ctx.f_ph()).unwrap();
        let fa = render_frame(&phantom.scene, &pose_a, &undist, &ctx, &sensor, 0.0, 0).unwrap();
        let fb = render_frame(&phantom.scene, &pose_b, &undist, &ctx, &sensor, 0.0, 0).unwrap();
        // Moving the camera +x shifts image content by +px_shift pixels
        // (inverted optics flip the sign twice).
        for row in 5..40 {
            for col in 10..50 {
                let ja = row * sensor.width_px + col;
                let jb = row * sensor.width_px + col + px_shift;
                assert!(
                    (fa.rgb[ja] - fb.rgb[jb]).abs() < 2e-5,
                    "row {row} col {col}: {} vs {}",
                    fa.rgb[ja],
                    fb.rgb[jb]
                );
            }
        }
    }

    #[test]
    fn plateau_parallax_matches_rectification_formula() {
        let (ctx, sensor) = test_setup();
        let undist = RadialUndistortion::for_sensor(30, sensor.half_diagonal_px());
        let pose =
            CameraPose::with_tilt(0.0, 0.0, ctx.z0, 0.0, 0.0, 0.0, ctx.f_ph()).unwrap();
        let h = 0.5f64; // mm
        let r_w = Vec2::new(2.0, -1.0);
        let flat = project_to_pixel(r_w, 0.0, &pose, &undist, &ctx, &sensor).unwrap();
        let high = project_to_pixel(r_w, h, &pose, &undist, &ctx, &sensor).unwrap();
        // The raised point appears further from the vanishing point by
        // the inverse of the rectification shrink factor.
        let scale = ctx.rectification_scale(pose.z);
        let expect = 1.0 / (1.0 - h / scale);
        let got = high.norm() / flat.norm();
        assert!(
            (got - expect).abs() < 1e-9,
            "radial stretch {got} vs {expect}"
        );
    }

    #[test]
    fn render_then_backproject_recovers_scene_coordinates() {
        // Duality for zero-tilt, distortion-free, height-zero scenes at
        // 1e-6 cells (the production Taylor path is exact here), and for
        // tilted, distorted captures at 1e-3 cells (Taylor truncation).
        let phantom = make_phantom(&flat_spec()).unwrap();
        let (ctx, sensor) = test_setup();
        let identity = RadialUndistortion::for_sensor(30, sensor.half_diagonal_px());

        let strict_pose =
            CameraPose::with_tilt(1.3, -0.7, ctx.z0, 0.0, 0.0, 0.3, ctx.f_ph()).unwrap();
        let mut barrel = RadialUndistortion::for_sensor(30, sensor.half_diagonal_px());
        let n = barrel.node_count();
        let max_r = barrel.max_radius();
        for i in 0..n {
            let r = i as f64 * barrel.delta_r() / max_r;
            barrel.samples_mut()[i] = 1.0 - 0.05 * r * r;
        }
        let loose_pose =
            CameraPose::with_tilt(0.4, 0.9, ctx.z0 * 1.01, 0.015, -0.012, -0.1, ctx.f_ph())
                .unwrap();

        for (pose, undist, tol_cells) in [
            (&strict_pose, &identity, 1e-6),
            (&loose_pose, &barrel, 1e-3),
        ] {
            for row in (0..sensor.height_px).step_by(7) {
                for col in (0..sensor.width_px).step_by(9) {
                    let (r_w, h) =
                        trace_pixel(&phantom.scene, pose, undist, &ctx, &sensor, row, col)
                            .unwrap();
                    // Production path: Taylor backprojection plus
                    // orthorectification at the rendered height.
                    let center = sensor.center();
                    let p_px = Vec2::new(col as f64 - center.x, row as f64 - center.y);
                    let r_obj = backproject_pipeline(p_px, pose, undist, sensor.pitch_mm);
                    let rect = ortho_rectify(r_obj, h, pose, &ctx, phantom.scene.pitch * 0.5);
                    let recovered = r_obj + rect.vector;
                    let err_cells = (recovered - r_w).norm() / phantom.scene.pitch;
                    assert!(
                        err_cells <= tol_cells,
                        "pixel ({row},{col}): {err_cells:.2e} cells off (tol {tol_cells:.0e})"
                    );
                }
            }
        }
    }

    #[test]
    fn project_inverts_trace() {
        let phantom = make_phantom(&flat_spec()).unwrap();
        let (ctx, sensor) = test_setup();
        let mut undist = RadialUndistortion::for_sensor(12, sensor.half_diagonal_px());
        for (i, m) in undist.samples_mut().iter_mut().enumerate() {
            *m = 1.0 - 0.001 * i as f64;
        }
        let pose =
            CameraPose::with_tilt(0.8, -0.2, ctx.z0, 0.01, 0.02, 0.07, ctx.f_ph()).unwrap();
        let center = sensor.center();
        for row in (1..sensor.height_px).step_by(11) {
            for col in (1..sensor.width_px).step_by(13) {
                let (r_w, h) =
                    trace_pixel(&phantom.scene, &pose, &undist, &ctx, &sensor, row, col).unwrap();
                let px = project_to_pixel(r_w, h, &pose, &undist, &ctx, &sensor).unwrap();
                let want = Vec2::new(col as f64 - center.x, row as f64 - center.y);
                assert!(
                    (px - want).norm() < 1e-9,
                    "pixel round trip ({row},{col}) -> {px:?}"
                );
            }
        }
    }

    #[test]
    fn height_zero_scene_renders_identically_with_rectification() {
        // For a flat scene the fixed point terminates at h = 0, so the
        // render equals the pure homographic warp; compare a frame from a
        // tall-Z reference against itself with rectification nominally
        // engaged (heights are all zero).
        let phantom = make_phantom(&flat_spec()).unwrap();
        let (ctx, sensor) = test_setup();
        let undist = RadialUndistortion::for_sensor(30, sensor.half_diagonal_px());
        let pose =
            CameraPose::with_tilt(0.5, 0.5, ctx.z0, 0.005, -0.004, 0.02, ctx.f_ph()).unwrap();
        let frame = render_frame(&phantom.scene, &pose, &undist, &ctx, &sensor, 0.0, 0).unwrap();
        assert!(frame.height.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn footprint_outside_scene_errors() {
        let phantom = make_phantom(&flat_spec()).unwrap();
        let (ctx, sensor) = test_setup();
        let undist = RadialUndistortion::for_sensor(30, sensor.half_diagonal_px());
        let pose =
            CameraPose::with_tilt(100.0, 0.0, ctx.z0, 0.0, 0.0, 0.0, ctx.f_ph()).unwrap();
        assert_eq!(
            render_frame(&phantom.scene, &pose, &undist, &ctx, &sensor, 0.0, 0),
            Err(SynthError::FootprintExceedsScene)
        );
    }

    #[test]
    fn evaluation_removes_global_shift() {
        let phantom = make_phantom(&flat_spec()).unwrap();
        let masks = phantom.masks.clone();
        // Estimate = ground truth + 0.4 mm everywhere.
        let est: Vec<f32> = phantom.scene.heightfield.iter().map(|&h| h + 0.4).collect();
        let eval = evaluate_heights(&est, &masks, &phantom.region_heights_mm).unwrap();
        for r in &eval.per_region {
            assert!(r.accuracy_mm < 1e-6);
            assert!(r.precision_mm < 1e-6);
        }
        assert!((eval.shift_mm + 0.4).abs() < 1e-6);
    }

    #[test]
    fn evaluation_recovers_rescale_factor() {
        let spec = PhantomSpec {
            width_mm: 20.0,
            height_mm: 12.0,
            pitch_mm: 0.1,
            plateaus: (0..3)
                .map(|i| Plateau {
                    center: Vec2::new(-5.0 + 5.0 * i as f64, 0.0),
                    width: 2.0,
                    height: 2.0,
                    elevation_um: 200.0 + 150.0 * i as f64,
                })
                .collect(),
            seed: 3,
        };
        let phantom = make_phantom(&spec).unwrap();
        let est: Vec<f32> = phantom.scene.heightfield.iter().map(|&h| 0.5 * h).collect();
        let eval = evaluate_heights(&est, &phantom.masks, &phantom.region_heights_mm).unwrap();
        assert!(
            (eval.rescale - 2.0).abs() < 1e-6,
            "rescale {} should be 2",
            eval.rescale
        );
    }

    #[test]
    fn evaluation_precision_tracks_injected_noise() {
        let phantom = make_phantom(&flat_spec()).unwrap();
        let sigma_mm = 0.03;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut normal = || -> f64 {
            let u1 = ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64).max(1e-300);
            let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
        };
        let est: Vec<f32> = phantom
            .scene
            .heightfield
            .iter()
            .map(|&h| h + (sigma_mm * normal()) as f32)
            .collect();
        let eval = evaluate_heights(&est, &phantom.masks, &phantom.region_heights_mm).unwrap();
        let precision = eval.per_region[0].precision_mm;
        assert!(
            (precision - sigma_mm).abs() < 0.1 * sigma_mm,
            "precision {precision} vs sigma {sigma_mm}"
        );
    }

    #[test]
    fn evaluation_is_invariant_to_constant_offset() {
        let phantom = make_phantom(&flat_spec()).unwrap();
        let est: Vec<f32> = phantom.scene.heightfield.clone();
        let shifted: Vec<f32> = est.iter().map(|&h| h - 1.7).collect();
        let a = evaluate_heights(&est, &phantom.masks, &phantom.region_heights_mm).unwrap();
        let b = evaluate_heights(&shifted, &phantom.masks, &phantom.region_heights_mm).unwrap();
        for (ra, rb) in a.per_region.iter().zip(b.per_region.iter()) {
            assert!((ra.accuracy_mm - rb.accuracy_mm).abs() < 1e-9);
            assert!((ra.precision_mm - rb.precision_mm).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_region_detected() {
        let est = vec![0.0f32; 16];
        let masks = vec![0u16; 16];
        assert_eq!(
            evaluate_heights(&est, &masks, &[0.0, 0.3]),
            Err(SynthError::EmptyRegion(1))
        );
    }

    #[test]
    fn erosion_excludes_boundary_cells() {
        let mut spec = flat_spec();
        spec.plateaus.push(Plateau {
            center: Vec2::new(0.0, 0.0),
            width: 2.0,
            height: 2.0,
            elevation_um: 400.0,
        });
        let phantom = make_phantom(&spec).unwrap();
        let eroded = erode_masks(&phantom.masks, phantom.scene.rows, phantom.scene.cols, 2);
        let excluded = eroded.iter().filter(|&&m| m == MASK_EXCLUDED).count();
        assert!(excluded > 0);
        // Interior plateau cells survive with their id.
        let survivors = eroded.iter().filter(|&&m| m == 1).count();
        assert!(survivors > 0);
        assert!(survivors < phantom.masks.iter().filter(|&&m| m == 1).count());
    }
}
