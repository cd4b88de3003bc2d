//! Camera model and coordinate transforms.
//!
//! All transforms operate on a tilted-pinhole camera looking down at a
//! planar object (heights are handled as a separate per-pixel radial
//! rectification). The full backprojection chain for one camera pixel is
//!
//! ```text
//! pixel -> undistort -> in-plane rotation -> tilted backprojection
//!       -> add lateral position -> orthorectification
//! ```
//!
//! Conventions used throughout:
//!
//! - All lengths are millimeters. Pixel coordinates are converted via the
//!   sensor pitch before entering this module.
//! - The camera orientation is the object-plane unit normal expressed in
//!   the camera frame, `n = (n_x, n_y, n_z)` with `n_z < 0`;
//!   `n = (0, 0, -1)` when the image and object planes are parallel.
//! - In-plane rotation is row-vector times R(theta), counterclockwise.
//! - The zero-order magnification is negative (`x_obj = Z x_im / (f n_z)`
//!   with `n_z < 0`), i.e. pinhole image inversion is kept literal. The
//!   synthetic renderer uses the same convention so round trips close.
//! - World in-plane coordinates are measured from the point where the
//!   optical axis pierces the object plane, so the backprojection of the
//!   image center is always `(0, 0)` and the camera lateral position
//!   `(X, Y)` doubles as the vanishing point of the rectification field.

use crate::math;
use thiserror::Error;

/// A 2-vector in image or object-plane coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    #[inline]
    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    #[inline]
    pub fn norm(self) -> f64 {
        math::hypot(self.x, self.y)
    }

    #[inline]
    pub fn scale(self, s: f64) -> Self {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl core::ops::Add for Vec2 {
    type Output = Vec2;
    #[inline]
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl core::ops::Sub for Vec2 {
    type Output = Vec2;
    #[inline]
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    /// Pose is invalid (non-unit normal, excessive tilt, or non-positive
    /// `Z`/`f_ph`).
    #[error("invalid camera pose: {0}")]
    InvalidPose(&'static str),
    /// The exact backprojection is singular at zero tilt; use the Taylor
    /// form instead.
    #[error("degenerate tilt: n_x^2 + n_y^2 <= 1e-12, exact form is singular")]
    DegenerateTilt,
    /// The pixel ray is (nearly) parallel to the object plane.
    #[error("grazing ray: |n . r_im| < 1e-9 |r_im|")]
    GrazingRay,
    /// Reference-frame height coincides with the sample height.
    #[error("degenerate reference: |Z_ref - h| < 1e-9 Z_ref")]
    DegenerateReference,
}

/// Maximum admissible |n_x| or |n_y|; the optimization operates in a
/// lateral-translation-dominant regime where tilts stay far below this.
pub const MAX_TILT_COMPONENT: f64 = 0.3;

/// Per-image 6D extrinsics plus pinhole focal length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    /// Projection-center position in the object-plane frame (mm).
    pub x: f64,
    pub y: f64,
    /// Projection-center height above the object plane (mm, > 0).
    pub z: f64,
    /// Object-plane unit normal in the camera frame, `n_z < 0`.
    pub n: [f64; 3],
    /// In-image-plane rotation angle (radians).
    pub theta: f64,
    /// Pinhole focal length (mm, > 0).
    pub f_ph: f64,
}

impl CameraPose {
    /// Builds a pose from tilt components, deriving `n_z = -sqrt(1 - n_x^2 - n_y^2)`.
    pub fn with_tilt(
        x: f64,
        y: f64,
        z: f64,
        n_x: f64,
        n_y: f64,
        theta: f64,
        f_ph: f64,
    ) -> Result<Self, GeometryError> {
        let n_z = -math::sqrt(1.0 - n_x * n_x - n_y * n_y);
        let pose = CameraPose {
            x,
            y,
            z,
            n: [n_x, n_y, n_z],
            theta,
            f_ph,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let [nx, ny, nz] = self.n;
        let norm = math::sqrt(nx * nx + ny * ny + nz * nz);
        if math::abs(norm - 1.0) > 1e-12 {
            return Err(GeometryError::InvalidPose("|n| != 1"));
        }
        if math::abs(nx) > MAX_TILT_COMPONENT || math::abs(ny) > MAX_TILT_COMPONENT {
            return Err(GeometryError::InvalidPose("|n_x| or |n_y| > 0.3"));
        }
        if !(self.z > 0.0) {
            return Err(GeometryError::InvalidPose("Z <= 0"));
        }
        if !(self.f_ph > 0.0) {
            return Err(GeometryError::InvalidPose("f_ph <= 0"));
        }
        Ok(())
    }

    /// Lateral position `(X, Y)`, which is also the vanishing point of
    /// the orthorectification field.
    #[inline]
    pub fn lateral(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Reference height for rectification to an arbitrary camera-centric
/// frame; `Infinite` recovers orthorectification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceHeight {
    Finite(f64),
    Infinite,
}

/// An arbitrary camera-centric reference frame (vanishing point plus
/// projection-center height), image and object planes parallel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceFrame {
    pub r_ref: Vec2,
    pub z_ref: ReferenceHeight,
}

/// Autofocus bookkeeping shared by a whole capture sequence.
///
/// Smartphone autofocus manifests as a per-image pinhole focal length.
/// Assuming the camera focused once, `f_ph,i ~ M_0 Z_0` stays constant,
/// and the thin-lens relation `1/Z + 1/f_ph = 1/f_eff` fixes the
/// first-frame height `Z_0 = f_eff (1 + 1/M_0)` from the user-measured
/// magnification `M_0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutofocusContext {
    /// Effective (lens) focal length, mm.
    pub f_eff: f64,
    /// Magnification of the first frame (dimensionless, > 0).
    pub m0: f64,
    /// First-frame height derived from the thin-lens equation, mm.
    pub z0: f64,
}

impl AutofocusContext {
    pub fn new(f_eff: f64, m0: f64) -> Result<Self, GeometryError> {
        if !(f_eff > 0.0) || !(m0 > 0.0) {
            return Err(GeometryError::InvalidPose("f_eff and M_0 must be > 0"));
        }
        Ok(AutofocusContext {
            f_eff,
            m0,
            z0: f_eff * (1.0 + 1.0 / m0),
        })
    }

    /// Shared pinhole focal length `f_ph = M_0 Z_0` of the sequence.
    #[inline]
    pub fn f_ph(&self) -> f64 {
        self.m0 * self.z0
    }

    /// Height-to-shift scale `f_eff (1 + Z_i / (M_0 Z_0))` for a frame at
    /// height `z_i`; equals `Z_i` when the thin-lens relation holds
    /// exactly (i.e. at `Z_i = Z_0`).
    #[inline]
    pub fn rectification_scale(&self, z_i: f64) -> f64 {
        self.f_eff * (1.0 + z_i / (self.m0 * self.z0))
    }
}

/// Which second-order expansion of the exact backprojection to use.
///
/// The published y-expansion carries `f^2 n_x (n_x x + n_y y)` in its
/// second-order term where symmetry with the x-expansion requires `n_y`.
/// `Symmetric` matches the exact form to third order and is the
/// production default; `LiteralPaper` keeps the printed term and is
/// retained for comparison only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TaylorVariant {
    #[default]
    Symmetric,
    LiteralPaper,
}

/// Rotates image-plane coordinates counterclockwise: `(x, y) R(theta)`
/// with the row-vector convention, so `(1, 0)` at `theta = pi/2` maps to
/// `(0, 1)`.
#[inline]
pub fn rotate_in_plane(p: Vec2, theta: f64) -> Vec2 {
    let (s, c) = (math::sin(theta), math::cos(theta));
    Vec2::new(p.x * c - p.y * s, p.x * s + p.y * c)
}

/// Exact backprojection of an image-plane point (mm, after undistortion
/// and in-plane rotation) onto the object plane, relative to the optical
/// axis intersection.
///
/// ```text
/// x_obj = Z (1 + n_z) ((n_y^2 + n_z - 1) x_im - n_x n_y y_im)
///         / (n_z (n_x^2 + n_y^2) (n . r_im))
/// ```
///
/// and symmetrically for `y_obj`, with `r_im = (x_im, y_im, f_ph)`. The
/// form divides `1 + n_z` by `n_x^2 + n_y^2` and is singular at zero
/// tilt; callers in the production path use [`backproject_taylor`].
pub fn backproject_exact(p_im: Vec2, pose: &CameraPose) -> Result<Vec2, GeometryError> {
    let [nx, ny, nz] = pose.n;
    let s2 = nx * nx + ny * ny;
    if s2 <= 1e-12 {
        return Err(GeometryError::DegenerateTilt);
    }
    let n_dot_r = nx * p_im.x + ny * p_im.y + nz * pose.f_ph;
    let r_im_norm = math::sqrt(p_im.x * p_im.x + p_im.y * p_im.y + pose.f_ph * pose.f_ph);
    if math::abs(n_dot_r) < 1e-9 * r_im_norm {
        return Err(GeometryError::GrazingRay);
    }
    let denom = nz * s2 * n_dot_r;
    let common = pose.z * (1.0 + nz) / denom;
    Ok(Vec2::new(
        common * ((ny * ny + nz - 1.0) * p_im.x - nx * ny * p_im.y),
        common * ((nx * nx + nz - 1.0) * p_im.y - nx * ny * p_im.x),
    ))
}

/// Second-order Taylor expansion of [`backproject_exact`] at
/// `n_x = n_y = 0`; finite everywhere and the production path for all
/// tilts. At zero tilt it reduces to `Z p_im / (f_ph n_z)`.
pub fn backproject_taylor(p_im: Vec2, pose: &CameraPose) -> Vec2 {
    backproject_taylor_variant(p_im, pose, TaylorVariant::Symmetric)
}

pub fn backproject_taylor_variant(p_im: Vec2, pose: &CameraPose, variant: TaylorVariant) -> Vec2 {
    let [nx, ny, nz] = pose.n;
    let f = pose.f_ph;
    let s = nx * p_im.x + ny * p_im.y;
    let pref = pose.z / (f * nz);
    let cy = match variant {
        TaylorVariant::Symmetric => ny,
        TaylorVariant::LiteralPaper => nx,
    };
    let x = p_im.x + p_im.x * s / f + (f * f * nx * s + 2.0 * p_im.x * s * s) / (2.0 * f * f);
    let y = p_im.y + p_im.y * s / f + (f * f * cy * s + 2.0 * p_im.y * s * s) / (2.0 * f * f);
    Vec2::new(pref * x, pref * y)
}

/// Full production backprojection of a pixel: undistort (pixel units),
/// convert to mm via the sensor pitch, rotate in plane, Taylor
/// backproject, and add the camera lateral position.
pub fn backproject_pipeline(
    p_px: Vec2,
    pose: &CameraPose,
    undist: &crate::distortion::RadialUndistortion,
    pitch_mm: f64,
) -> Vec2 {
    let undistorted = undist.undistort(p_px);
    let p_mm = undistorted.scale(pitch_mm);
    let rotated = rotate_in_plane(p_mm, pose.theta);
    let rel = backproject_taylor(rotated, pose);
    rel + pose.lateral()
}

/// Result of [`ortho_rectify`]: the rectification vector plus a flag for
/// pixels inside the vanishing-point blind spot, where the geometry
/// carries no height information and the height-consistency loss takes
/// over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rectification {
    pub vector: Vec2,
    pub blind_spot: bool,
}

/// Radial deformation that moves an object-plane point a signed distance
/// towards the vanishing point `R = (X, Y)` in proportion to the height
/// at the rectified location:
///
/// ```text
/// r_rectify = dr (r_obj - R) / |r_obj - R|,
/// dr = -h |r_obj - R| / (f_eff (1 + Z_i / (M_0 Z_0)))
/// ```
///
/// `blind_radius` is the half grid pitch below which a nonzero height
/// cannot be rectified (returns a zero vector, flagged).
pub fn ortho_rectify(
    r_obj: Vec2,
    h: f64,
    pose: &CameraPose,
    ctx: &AutofocusContext,
    blind_radius: f64,
) -> Rectification {
    let d = r_obj - pose.lateral();
    if h == 0.0 {
        return Rectification {
            vector: Vec2::ZERO,
            blind_spot: false,
        };
    }
    if d.norm() < blind_radius {
        return Rectification {
            vector: Vec2::ZERO,
            blind_spot: true,
        };
    }
    let scale = ctx.rectification_scale(pose.z);
    Rectification {
        vector: d.scale(-h / scale),
        blind_spot: false,
    }
}

/// Warps an object-plane point to an arbitrary camera-centric reference
/// frame:
///
/// ```text
/// r_rectify = h/Z_i (Z_i - Z_ref)/(Z_ref - h) (r_obj - R_i)
///           + h/(Z_ref - h) (R_i - R_ref)
/// ```
///
/// As `Z_ref -> infinity` this recovers the basic orthorectification
/// field `-h/Z_i (r_obj - R_i)`.
pub fn rectify_to_reference(
    r_obj: Vec2,
    h: f64,
    pose_i: &CameraPose,
    reference: &ReferenceFrame,
) -> Result<Vec2, GeometryError> {
    let d = r_obj - pose_i.lateral();
    match reference.z_ref {
        ReferenceHeight::Infinite => Ok(d.scale(-h / pose_i.z)),
        ReferenceHeight::Finite(z_ref) => {
            if math::abs(z_ref - h) < 1e-9 * z_ref {
                return Err(GeometryError::DegenerateReference);
            }
            let first = d.scale(h / pose_i.z * (pose_i.z - z_ref) / (z_ref - h));
            let second = (pose_i.lateral() - reference.r_ref).scale(h / (z_ref - h));
            Ok(first + second)
        }
    }
}

/// Exact inverse of [`backproject_exact`]: maps an object-plane
/// displacement (relative to the optical-axis intersection, world frame)
/// back to image-plane mm coordinates. Used by the synthetic renderer.
pub fn project_exact(d_world: Vec2, pose: &CameraPose) -> Result<Vec2, GeometryError> {
    let [nx, ny, nz] = pose.n;
    let s2 = nx * nx + ny * ny;
    // At (near-)zero tilt the map is the plain pinhole projection.
    if s2 <= 1e-12 {
        let scale = pose.f_ph * nz / pose.z;
        return Ok(d_world.scale(scale));
    }
    // Rotate the in-plane displacement back into the camera frame
    // (inverse Rodrigues: angle -phi about the axis (-n_y, n_x, 0)/|.|),
    // then translate by the optical-axis piercing point a = (0, 0, Z/n_z).
    let s = math::sqrt(s2);
    let (kx, ky) = (-ny / s, nx / s);
    let cos_phi = -nz;
    let sin_phi = -s; // angle negated for the inverse rotation
    let (wx, wy, wz) = (d_world.x, d_world.y, 0.0);
    // k x w with k = (kx, ky, 0)
    let (cx, cy, cz) = (ky * wz - 0.0 * wy, 0.0 * wx - kx * wz, kx * wy - ky * wx);
    let k_dot_w = kx * wx + ky * wy;
    let one_m_c = 1.0 - cos_phi;
    let vx = wx * cos_phi + cx * sin_phi + kx * k_dot_w * one_m_c;
    let vy = wy * cos_phi + cy * sin_phi + ky * k_dot_w * one_m_c;
    let vz = wz * cos_phi + cz * sin_phi;
    // v = plane point in camera coordinates
    let (px, py, pz) = (vx, vy, vz + pose.z / nz);
    if math::abs(pz) < 1e-12 {
        return Err(GeometryError::GrazingRay);
    }
    let scale = pose.f_ph / pz;
    Ok(Vec2::new(px * scale, py * scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (rng.next_u32() as f64 / u32::MAX as f64)
    }

    /// Independent oracle: intersect the pixel ray with the object plane
    /// {r : n . r = Z} in camera coordinates, subtract the optical-axis
    /// piercing point a = (0, 0, Z/n_z), and rotate the in-plane
    /// displacement by acos(-n_z) about the axis (-n_y, n_x, 0).
    fn backproject_3d_construction(p_im: Vec2, pose: &CameraPose) -> Vec2 {
        let [nx, ny, nz] = pose.n;
        let n_dot_r = nx * p_im.x + ny * p_im.y + nz * pose.f_ph;
        let t = pose.z / n_dot_r;
        let v = [p_im.x * t, p_im.y * t, pose.f_ph * t];
        let a = [0.0, 0.0, pose.z / nz];
        let w = [v[0] - a[0], v[1] - a[1], v[2] - a[2]];
        let s = (nx * nx + ny * ny).sqrt();
        let k = [-ny / s, nx / s, 0.0];
        let cos_phi = -nz;
        let sin_phi = s;
        let kxw = [
            k[1] * w[2] - k[2] * w[1],
            k[2] * w[0] - k[0] * w[2],
            k[0] * w[1] - k[1] * w[0],
        ];
        let k_dot_w = k[0] * w[0] + k[1] * w[1] + k[2] * w[2];
        let rot = |i: usize| w[i] * cos_phi + kxw[i] * sin_phi + k[i] * k_dot_w * (1.0 - cos_phi);
        Vec2::new(rot(0), rot(1))
    }

    #[test]
    fn rotate_identity_quarter_turn_and_norm() {
        let p = rotate_in_plane(Vec2::new(1.0, 0.0), 0.0);
        assert!((p.x - 1.0).abs() < 1e-15 && p.y.abs() < 1e-15);

        let q = rotate_in_plane(Vec2::new(1.0, 0.0), core::f64::consts::FRAC_PI_2);
        assert!(q.x.abs() < 1e-15 && (q.y - 1.0).abs() < 1e-15);

        let r = rotate_in_plane(Vec2::new(1.0, 1.0), core::f64::consts::FRAC_PI_4);
        assert!(r.x.abs() < 1e-12 && (r.y - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rotate_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = Vec2::new(uniform(&mut rng, -5.0, 5.0), uniform(&mut rng, -5.0, 5.0));
            let theta = uniform(&mut rng, -6.4, 6.4);
            let q = rotate_in_plane(p, theta);
            assert!((q.norm() - p.norm()).abs() <= 1e-12 * p.norm().max(1.0));
        }
    }

    #[test]
    fn exact_matches_3d_construction() {
        let pose = CameraPose::with_tilt(0.0, 0.0, 100.0, 0.05, 0.0, 0.0, 5.0).unwrap();
        let got = backproject_exact(Vec2::new(1.0, 0.0), &pose).unwrap();
        let want = backproject_3d_construction(Vec2::new(1.0, 0.0), &pose);
        assert!((got.x - want.x).abs() < 1e-9, "{got:?} vs {want:?}");
        assert!((got.y - want.y).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let pose = CameraPose::with_tilt(
                0.0,
                0.0,
                uniform(&mut rng, 30.0, 150.0),
                uniform(&mut rng, -0.2, 0.2),
                uniform(&mut rng, -0.2, 0.2),
                0.0,
                uniform(&mut rng, 3.0, 8.0),
            )
            .unwrap();
            if pose.n[0].powi(2) + pose.n[1].powi(2) <= 1e-12 {
                continue;
            }
            let p = Vec2::new(uniform(&mut rng, -2.0, 2.0), uniform(&mut rng, -2.0, 2.0));
            let got = backproject_exact(p, &pose).unwrap();
            let want = backproject_3d_construction(p, &pose);
            let scale = want.norm().max(1.0);
            assert!((got.x - want.x).abs() <= 1e-9 * scale, "{got:?} vs {want:?}");
            assert!((got.y - want.y).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn exact_degenerate_tilt_errors() {
        let pose = CameraPose::with_tilt(0.0, 0.0, 100.0, 0.0, 0.0, 0.0, 5.0).unwrap();
        assert_eq!(
            backproject_exact(Vec2::new(1.0, 1.0), &pose),
            Err(GeometryError::DegenerateTilt)
        );
    }

    #[test]
    fn exact_optical_axis_maps_to_origin() {
        // The axis pixel backprojects to the axis intersection, which is
        // the world origin of the per-frame chart by construction.
        let pose = CameraPose::with_tilt(0.0, 0.0, 80.0, 0.03, -0.02, 0.0, 4.3).unwrap();
        let got = backproject_exact(Vec2::ZERO, &pose).unwrap();
        assert!(got.norm() < 1e-12, "{got:?}");
        let want = backproject_3d_construction(Vec2::ZERO, &pose);
        assert!(want.norm() < 1e-9);
    }

    #[test]
    fn taylor_zero_tilt_is_pure_pinhole() {
        let pose = CameraPose::with_tilt(0.0, 0.0, 100.0, 0.0, 0.0, 0.0, 5.0).unwrap();
        let got = backproject_taylor(Vec2::new(1.0, 2.0), &pose);
        assert_eq!(got, Vec2::new(-20.0, -40.0));
    }

    #[test]
    fn taylor_tracks_exact_to_third_order() {
        let pose = CameraPose::with_tilt(0.0, 0.0, 80.0, 0.02, -0.03, 0.0, 4.3).unwrap();
        let p = Vec2::new(0.5, 0.5);
        let exact = backproject_exact(p, &pose).unwrap();
        let taylor = backproject_taylor(p, &pose);
        let rel = (taylor - exact).norm() / exact.norm();
        assert!(rel < 1e-4, "relative deviation {rel:.3e}");
    }

    #[test]
    fn taylor_variant_selection() {
        // The literal printed y-term fails against the exact form at a
        // tolerance the symmetric variant passes; this pins the default.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst_sym = 0.0f64;
        let mut worst_lit = 0.0f64;
        for _ in 0..20000 {
            let pose = CameraPose::with_tilt(
                0.0,
                0.0,
                75.0,
                uniform(&mut rng, -0.05, 0.05),
                uniform(&mut rng, -0.05, 0.05),
                0.0,
                4.5616,
            )
            .unwrap();
            if pose.n[0].powi(2) + pose.n[1].powi(2) <= 1e-12 {
                continue;
            }
            let p = Vec2::new(
                uniform(&mut rng, -0.3528, 0.3528),
                uniform(&mut rng, -0.2646, 0.2646),
            );
            if p.norm() < 1e-3 {
                continue;
            }
            let exact = backproject_exact(p, &pose).unwrap();
            let sym = backproject_taylor_variant(p, &pose, TaylorVariant::Symmetric);
            let lit = backproject_taylor_variant(p, &pose, TaylorVariant::LiteralPaper);
            worst_sym = worst_sym.max((sym - exact).norm() / exact.norm());
            worst_lit = worst_lit.max((lit - exact).norm() / exact.norm());
        }
        assert!(worst_sym <= 1e-4, "symmetric variant off: {worst_sym:.3e}");
        assert!(
            worst_lit > 1e-4,
            "literal variant unexpectedly accurate: {worst_lit:.3e}"
        );
    }

    #[test]
    fn taylor_center_pixel_maps_to_origin() {
        let pose = CameraPose::with_tilt(0.0, 0.0, 80.0, 0.04, -0.01, 0.0, 4.3).unwrap();
        let got = backproject_taylor(Vec2::ZERO, &pose);
        assert_eq!(got, Vec2::ZERO);
        let exact = backproject_exact(Vec2::ZERO, &pose).unwrap();
        assert!(exact.norm() < 1e-12);
    }

    #[test]
    fn project_exact_inverts_backproject_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..2000 {
            let pose = CameraPose::with_tilt(
                0.0,
                0.0,
                uniform(&mut rng, 40.0, 120.0),
                uniform(&mut rng, -0.1, 0.1),
                uniform(&mut rng, -0.1, 0.1),
                0.0,
                uniform(&mut rng, 3.0, 8.0),
            )
            .unwrap();
            let p = Vec2::new(uniform(&mut rng, -1.0, 1.0), uniform(&mut rng, -1.0, 1.0));
            let d = match backproject_exact(p, &pose) {
                Ok(d) => d,
                Err(GeometryError::DegenerateTilt) => backproject_taylor(p, &pose),
                Err(e) => panic!("{e}"),
            };
            let back = project_exact(d, &pose).unwrap();
            assert!(
                (back - p).norm() <= 1e-9 * p.norm().max(1.0),
                "{back:?} vs {p:?}"
            );
        }
    }

    #[test]
    fn ortho_rectify_zero_height_is_zero() {
        let pose = CameraPose::with_tilt(3.0, -2.0, 75.0, 0.0, 0.0, 0.0, 4.5616).unwrap();
        let ctx = AutofocusContext::new(4.3, 0.06).unwrap();
        let r = ortho_rectify(Vec2::new(10.0, 10.0), 0.0, &pose, &ctx, 0.05);
        assert_eq!(r.vector, Vec2::ZERO);
        assert!(!r.blind_spot);
    }

    #[test]
    fn ortho_rectify_height_from_shift_ratio() {
        // f_eff = 4.3 mm, M_0 = 0.05, Z_i = Z_0, dr/|r - R| = -1e-3
        // => h = 4.3 * 1e-3 * (1 + 1/0.05) = 90.3 um.
        let ctx = AutofocusContext::new(4.3, 0.05).unwrap();
        let pose =
            CameraPose::with_tilt(0.0, 0.0, ctx.z0, 0.0, 0.0, 0.0, ctx.f_ph()).unwrap();
        let h_mm = 0.0903;
        let r_obj = Vec2::new(20.0, 0.0);
        let rect = ortho_rectify(r_obj, h_mm, &pose, &ctx, 0.05);
        let ratio = rect.vector.x / r_obj.x; // dr / |r - R|, signed
        assert!(
            (ratio + 1e-3).abs() < 1e-12,
            "shift ratio {ratio:.6e} should be -1e-3"
        );
    }

    #[test]
    fn ortho_rectify_blind_spot_flagged() {
        let pose = CameraPose::with_tilt(5.0, 5.0, 75.0, 0.0, 0.0, 0.0, 4.5616).unwrap();
        let ctx = AutofocusContext::new(4.3, 0.06).unwrap();
        let r = ortho_rectify(Vec2::new(5.0, 5.0), 0.3, &pose, &ctx, 0.05);
        assert_eq!(r.vector, Vec2::ZERO);
        assert!(r.blind_spot);
    }

    #[test]
    fn rectify_to_reference_trivial_cases() {
        let pose = CameraPose::with_tilt(2.0, 1.0, 75.0, 0.0, 0.0, 0.0, 4.5616).unwrap();
        // h = 0 -> zero.
        let r = rectify_to_reference(
            Vec2::new(9.0, 4.0),
            0.0,
            &pose,
            &ReferenceFrame {
                r_ref: Vec2::new(8.0, 8.0),
                z_ref: ReferenceHeight::Finite(60.0),
            },
        )
        .unwrap();
        assert!(r.norm() < 1e-15);
        // Self-rectification -> zero.
        let r = rectify_to_reference(
            Vec2::new(9.0, 4.0),
            0.4,
            &pose,
            &ReferenceFrame {
                r_ref: pose.lateral(),
                z_ref: ReferenceHeight::Finite(pose.z),
            },
        )
        .unwrap();
        assert!(r.norm() < 1e-15, "{r:?}");
    }

    #[test]
    fn rectify_to_reference_degenerate() {
        let pose = CameraPose::with_tilt(0.0, 0.0, 75.0, 0.0, 0.0, 0.0, 4.5616).unwrap();
        let out = rectify_to_reference(
            Vec2::new(1.0, 1.0),
            50.0,
            &pose,
            &ReferenceFrame {
                r_ref: Vec2::ZERO,
                z_ref: ReferenceHeight::Finite(50.0),
            },
        );
        assert_eq!(out, Err(GeometryError::DegenerateReference));
    }

    #[test]
    fn reference_at_infinity_matches_orthorectification() {
        // At Z_i = Z_0 the autofocus scale equals Z_i exactly, so the
        // Z_ref -> infinity limit of the general rectification coincides
        // with the orthorectification field.
        let ctx = AutofocusContext::new(4.3, 0.06).unwrap();
        let pose =
            CameraPose::with_tilt(3.0, -1.0, ctx.z0, 0.01, 0.005, 0.1, ctx.f_ph()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let r_obj = Vec2::new(uniform(&mut rng, -30.0, 30.0), uniform(&mut rng, -30.0, 30.0));
            let h = uniform(&mut rng, -0.6, 0.6);
            if (r_obj - pose.lateral()).norm() < 0.1 {
                continue;
            }
            let ortho = ortho_rectify(r_obj, h, &pose, &ctx, 0.01).vector;
            let far = rectify_to_reference(
                r_obj,
                h,
                &pose,
                &ReferenceFrame {
                    r_ref: Vec2::ZERO,
                    z_ref: ReferenceHeight::Finite(1e9 * pose.z),
                },
            )
            .unwrap();
            let denom = ortho.norm().max(1e-9);
            assert!(
                (far - ortho).norm() / denom <= 1e-6,
                "{far:?} vs {ortho:?}"
            );
            // And the Infinite variant is the exact limit.
            let inf = rectify_to_reference(
                r_obj,
                h,
                &pose,
                &ReferenceFrame {
                    r_ref: Vec2::ZERO,
                    z_ref: ReferenceHeight::Infinite,
                },
            )
            .unwrap();
            assert!((inf - ortho).norm() / denom <= 1e-9);
        }
    }

    #[test]
    fn pose_validation() {
        assert!(CameraPose::with_tilt(0.0, 0.0, 75.0, 0.31, 0.0, 0.0, 4.3).is_err());
        assert!(CameraPose::with_tilt(0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 4.3).is_err());
        assert!(CameraPose::with_tilt(0.0, 0.0, 75.0, 0.0, 0.0, 0.0, -4.3).is_err());
        let mut pose = CameraPose::with_tilt(0.0, 0.0, 75.0, 0.1, 0.1, 0.0, 4.3).unwrap();
        pose.n[2] *= 1.0 + 1e-6;
        assert_eq!(
            pose.validate(),
            Err(GeometryError::InvalidPose("|n| != 1"))
        );
    }

    #[test]
    fn autofocus_thin_lens_consistency() {
        // Z_0 = f_eff (1 + 1/M_0) and M_0 = f_ph,0 / Z_0 must agree.
        let ctx = AutofocusContext::new(4.3, 0.060821).unwrap();
        let m0_rederived = ctx.f_ph() / ctx.z0;
        assert!((m0_rederived - ctx.m0).abs() <= 1e-9 * ctx.m0);
        // rectification_scale(Z_0) == Z_0 under the thin lens equation.
        assert!((ctx.rectification_scale(ctx.z0) - ctx.z0).abs() <= 1e-9 * ctx.z0);
    }
}
