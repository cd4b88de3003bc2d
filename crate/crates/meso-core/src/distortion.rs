//! Nonparametric radial (un)distortion.
//!
//! The radially dependent relative magnification is discretized into
//! `n_r` samples spaced by `delta_r`, with intermediate radii linearly
//! interpolated:
//!
//! ```text
//! M(r) = (1 + floor(r/d) - r/d) M_[floor(r/d)] + (r/d - floor(r/d)) M_[floor(r/d)+1]
//! ```
//!
//! Undistortion scales a point about the (optimizable) principal point:
//! `p -> M(|p - c|) (p - c) + c`. Because the undistorted radius
//! `g(r) = r M(r)` is piecewise quadratic with one segment per node
//! interval, the inverse (distortion) is solved analytically per segment
//! with no iteration.
//!
//! The module also carries even-order polynomial baselines used by the
//! undistortion-model comparison experiments. Radii are expressed in
//! full-resolution pixels throughout; callers convert to mm afterwards.

use crate::geometry::Vec2;
use crate::math;
use alloc::vec::Vec;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DistortionError {
    #[error("invalid model: {0}")]
    InvalidModel(&'static str),
    /// `r M(r)` is not strictly increasing, so no unique inverse exists.
    #[error("undistortion profile is not invertible (r M(r) not strictly increasing)")]
    NotInvertible,
}

/// Piecewise-linear radial undistortion with optimizable principal point.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialUndistortion {
    samples: Vec<f64>,
    delta_r: f64,
    /// Principal point offset from the image center, pixels.
    pub center: Vec2,
}

impl RadialUndistortion {
    /// Default number of radial nodes.
    pub const DEFAULT_NODES: usize = 30;

    pub fn new(samples: Vec<f64>, delta_r: f64, center: Vec2) -> Result<Self, DistortionError> {
        if samples.len() < 2 {
            return Err(DistortionError::InvalidModel("need at least 2 nodes"));
        }
        if !(delta_r > 0.0) {
            return Err(DistortionError::InvalidModel("delta_r must be > 0"));
        }
        if samples.iter().any(|&m| !(m > 0.0)) {
            return Err(DistortionError::InvalidModel(
                "all magnification samples must be > 0",
            ));
        }
        Ok(RadialUndistortion {
            samples,
            delta_r,
            center,
        })
    }

    /// The identity model: all samples 1, principal point at the center.
    pub fn identity(n_r: usize, delta_r: f64) -> Self {
        RadialUndistortion {
            samples: alloc::vec![1.0; n_r.max(2)],
            delta_r,
            center: Vec2::ZERO,
        }
    }

    /// Identity model whose nodes span the image half-diagonal plus a 10%
    /// margin, so corner radii stay in range during early optimization.
    pub fn for_sensor(n_r: usize, half_diagonal_px: f64) -> Self {
        let n = n_r.max(2);
        Self::identity(n, half_diagonal_px * 1.1 / (n - 1) as f64)
    }

    #[inline]
    pub fn node_count(&self) -> usize {
        self.samples.len()
    }

    #[inline]
    pub fn delta_r(&self) -> f64 {
        self.delta_r
    }

    #[inline]
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    /// Largest representable radius `(n_r - 1) delta_r`.
    #[inline]
    pub fn max_radius(&self) -> f64 {
        (self.samples.len() - 1) as f64 * self.delta_r
    }

    /// True if `r` lies inside the sampled range (callers count clamped
    /// evaluations for diagnostics).
    #[inline]
    pub fn in_range(&self, r: f64) -> bool {
        r < self.max_radius()
    }

    /// Linear interpolation between the flanking nodes. Radii at or past
    /// the last node clamp to its value.
    pub fn magnification_at(&self, r: f64) -> f64 {
        let t = r / self.delta_r;
        let n = self.samples.len();
        if t <= 0.0 {
            return self.samples[0];
        }
        let i = math::floor(t) as usize;
        if i >= n - 1 {
            return self.samples[n - 1];
        }
        let w = t - i as f64;
        (1.0 - w) * self.samples[i] + w * self.samples[i + 1]
    }

    /// Undistorts a point by center-relative radial scaling.
    pub fn undistort(&self, p: Vec2) -> Vec2 {
        let d = p - self.center;
        let m = self.magnification_at(d.norm());
        d.scale(m) + self.center
    }

    /// Undistorted radius `g(r) = r M(r)` (strictly increasing iff the
    /// model is invertible).
    #[inline]
    pub fn undistorted_radius(&self, r: f64) -> f64 {
        r * self.magnification_at(r)
    }

    /// Checks that `g(r) = r M(r)` is strictly increasing. `g` is
    /// quadratic per segment, so g' is linear there and positivity at
    /// both segment ends implies positivity throughout.
    pub fn is_monotone(&self) -> bool {
        let d = self.delta_r;
        for i in 0..self.samples.len() - 1 {
            let slope = (self.samples[i + 1] - self.samples[i]) / d;
            let g1 = self.samples[i] + (i as f64 * d) * slope;
            let g2 = self.samples[i + 1] + ((i + 1) as f64 * d) * slope;
            if g1 <= 0.0 || g2 <= 0.0 {
                return false;
            }
        }
        // The clamped tail g(r) = M_last r needs M_last > 0, which the
        // constructor already guarantees.
        true
    }

    /// Exact inverse of [`Self::undistort`]: finds the source radius on
    /// the segment whose image brackets the target, solving the per-
    /// segment quadratic analytically.
    pub fn distort(&self, p_undistorted: Vec2) -> Result<Vec2, DistortionError> {
        if !self.is_monotone() {
            return Err(DistortionError::NotInvertible);
        }
        let d = p_undistorted - self.center;
        let rho = d.norm();
        if rho < 1e-300 {
            return Ok(p_undistorted);
        }
        let r = self.invert_radius(rho)?;
        Ok(d.scale(r / rho) + self.center)
    }

    fn invert_radius(&self, rho: f64) -> Result<f64, DistortionError> {
        let n = self.samples.len();
        let d = self.delta_r;
        for i in 0..n - 1 {
            let g_hi = self.undistorted_radius((i + 1) as f64 * d);
            if rho <= g_hi {
                // Segment i: M(r) = M_i + slope (r - r_i), so
                // g(r) = a r^2 + b r with a = slope, b = M_i - slope r_i.
                let r_i = i as f64 * d;
                let a = (self.samples[i + 1] - self.samples[i]) / d;
                let b = self.samples[i] - a * r_i;
                // Stable positive root of a r^2 + b r - rho = 0.
                let disc = b * b + 4.0 * a * rho;
                if disc < 0.0 {
                    return Err(DistortionError::NotInvertible);
                }
                let denom = b + math::sqrt(disc);
                if math::abs(denom) < 1e-300 {
                    return Err(DistortionError::NotInvertible);
                }
                return Ok(2.0 * rho / denom);
            }
        }
        // Clamped tail: g(r) = M_last r.
        Ok(rho / self.samples[n - 1])
    }

    /// Rescales all samples so the maximum is exactly 1, absorbing the
    /// arbitrary global magnification; returns the factor applied.
    pub fn normalize(&mut self) -> f64 {
        let max = self
            .samples
            .iter()
            .copied()
            .fold(f64::MIN, f64::max);
        let scale = 1.0 / max;
        for m in &mut self.samples {
            *m *= scale;
        }
        scale
    }

    /// Radial profile table plus principal point, for plotting and
    /// serialization by the CLI.
    pub fn fit_report(&self) -> FitReport {
        FitReport {
            profile: (0..self.samples.len())
                .map(|i| (i as f64 * self.delta_r, self.samples[i]))
                .collect(),
            center: self.center,
        }
    }
}

/// Radial profile `(r, M(r))` at the node radii plus the principal point.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub profile: Vec<(f64, f64)>,
    pub center: Vec2,
}

/// Even-polynomial undistortion baseline: `M(r) = 1 + sum a_j r^(2j)`,
/// constant term fixed at 1. An order-2k model carries k coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialUndistortion {
    /// Coefficients of r^2, r^4, ..., r^(2k).
    pub coefficients: Vec<f64>,
    pub center: Vec2,
    /// Radius scale used to keep the monomials conditioned; coefficients
    /// apply to (r / r_scale)^(2j).
    pub r_scale: f64,
}

impl PolynomialUndistortion {
    pub fn new(order: usize, r_scale: f64) -> Result<Self, DistortionError> {
        if order < 2 || order % 2 != 0 {
            return Err(DistortionError::InvalidModel(
                "polynomial order must be even and >= 2",
            ));
        }
        if !(r_scale > 0.0) {
            return Err(DistortionError::InvalidModel("r_scale must be > 0"));
        }
        Ok(PolynomialUndistortion {
            coefficients: alloc::vec![0.0; order / 2],
            center: Vec2::ZERO,
            r_scale,
        })
    }

    pub fn order(&self) -> usize {
        2 * self.coefficients.len()
    }

    pub fn magnification_at(&self, r: f64) -> f64 {
        let u2 = (r / self.r_scale) * (r / self.r_scale);
        let mut m = 1.0;
        let mut pow = 1.0;
        for &a in &self.coefficients {
            pow *= u2;
            m += a * pow;
        }
        m
    }

    pub fn undistort(&self, p: Vec2) -> Vec2 {
        let d = p - self.center;
        let m = self.magnification_at(d.norm());
        d.scale(m) + self.center
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (rng.next_u32() as f64 / u32::MAX as f64)
    }

    fn random_monotone_model(rng: &mut ChaCha8Rng) -> RadialUndistortion {
        loop {
            let n = 2 + (rng.next_u32() as usize % 29);
            let delta = uniform(rng, 5.0, 40.0);
            let samples: Vec<f64> = (0..n).map(|_| uniform(rng, 0.85, 1.15)).collect();
            let center = Vec2::new(uniform(rng, -20.0, 20.0), uniform(rng, -20.0, 20.0));
            let model = RadialUndistortion::new(samples, delta, center).unwrap();
            if model.is_monotone() {
                return model;
            }
        }
    }

    #[test]
    fn magnification_identity_node_and_midpoint() {
        let model = RadialUndistortion::identity(30, 10.0);
        assert_eq!(model.magnification_at(137.5), 1.0);

        let mut samples = alloc::vec![1.0; 8];
        samples[3] = 0.9;
        samples[4] = 1.1;
        let model = RadialUndistortion::new(samples, 10.0, Vec2::ZERO).unwrap();
        // Exact node hit.
        assert!((model.magnification_at(30.0) - 0.9).abs() < 1e-15);
        // Midpoint: average of flanking nodes.
        assert!((model.magnification_at(35.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn magnification_clamps_past_last_node() {
        let mut samples = alloc::vec![1.0; 5];
        samples[4] = 0.8;
        let model = RadialUndistortion::new(samples, 10.0, Vec2::ZERO).unwrap();
        assert!(!model.in_range(40.0));
        assert_eq!(model.magnification_at(40.0), 0.8);
        assert_eq!(model.magnification_at(400.0), 0.8);
    }

    #[test]
    fn magnification_is_piecewise_linear() {
        // Second differences vanish strictly inside segments.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = random_monotone_model(&mut rng);
        let d = model.delta_r();
        for seg in 0..model.node_count() - 1 {
            let base = seg as f64 * d;
            let h = d / 8.0;
            for k in 1..6 {
                let r = base + k as f64 * h;
                let second_diff = model.magnification_at(r - h) - 2.0 * model.magnification_at(r)
                    + model.magnification_at(r + h);
                assert!(second_diff.abs() < 1e-12, "kink inside segment {seg}");
            }
        }
    }

    #[test]
    fn undistort_identity_center_and_uniform() {
        let identity = RadialUndistortion::identity(30, 10.0);
        let p = Vec2::new(34.0, -81.0);
        assert_eq!(identity.undistort(p), p);

        let mut model = RadialUndistortion::identity(10, 10.0);
        model.center = Vec2::new(3.0, 4.0);
        assert_eq!(model.undistort(model.center), model.center);

        let half = RadialUndistortion::new(alloc::vec![0.5; 10], 10.0, Vec2::ZERO).unwrap();
        let q = half.undistort(Vec2::new(10.0, 20.0));
        assert_eq!(q, Vec2::new(5.0, 10.0));
    }

    #[test]
    fn distort_undistort_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let model = random_monotone_model(&mut rng);
            let span = model.max_radius() * 0.9;
            for _ in 0..20 {
                let p = Vec2::new(uniform(&mut rng, -span, span), uniform(&mut rng, -span, span));
                let u = model.undistort(p);
                let back = model.distort(u).unwrap();
                assert!(
                    (back - p).norm() <= 1e-9 * p.norm().max(1.0),
                    "round trip failed: {p:?} -> {u:?} -> {back:?}"
                );
            }
        }
    }

    #[test]
    fn distort_selects_correct_segment_across_kink() {
        // Single kink at node 2; pick target radii straddling its image
        // and check against a bisection-search oracle on r M(r).
        let samples = alloc::vec![1.0, 1.0, 0.9, 0.95, 0.95];
        let model = RadialUndistortion::new(samples, 10.0, Vec2::ZERO).unwrap();
        assert!(model.is_monotone());
        let bisect = |rho: f64| -> f64 {
            let (mut lo, mut hi) = (0.0, model.max_radius() * 2.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if model.undistorted_radius(mid) < rho {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        for rho in [17.5, 18.0, 18.5, 19.0, 26.0, 27.5] {
            let direct = model.invert_radius(rho).unwrap();
            let oracle = bisect(rho);
            assert!(
                (direct - oracle).abs() < 1e-9,
                "rho={rho}: direct {direct} vs bisection {oracle}"
            );
        }
    }

    #[test]
    fn non_monotone_model_rejected() {
        // A steep downward segment makes g(r) = r M(r) fold back.
        let samples = alloc::vec![1.0, 1.0, 0.3, 1.0];
        let model = RadialUndistortion::new(samples, 10.0, Vec2::ZERO).unwrap();
        assert!(!model.is_monotone());
        assert_eq!(
            model.distort(Vec2::new(15.0, 0.0)),
            Err(DistortionError::NotInvertible)
        );
    }

    #[test]
    fn normalize_sets_max_to_one() {
        let samples = alloc::vec![0.8, 0.9, 0.85, 0.7];
        let mut model = RadialUndistortion::new(samples, 10.0, Vec2::ZERO).unwrap();
        let scale = model.normalize();
        assert!((scale - 1.0 / 0.9).abs() < 1e-15);
        let max = model.samples().iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn fit_report_identity_and_center() {
        let model = RadialUndistortion::identity(5, 12.5);
        let report = model.fit_report();
        assert_eq!(report.profile.len(), 5);
        for (i, &(r, m)) in report.profile.iter().enumerate() {
            assert_eq!(r, i as f64 * 12.5);
            assert_eq!(m, 1.0);
        }
        assert_eq!(report.center, Vec2::ZERO);
    }

    #[test]
    fn polynomial_zero_coefficients_is_identity() {
        let poly = PolynomialUndistortion::new(4, 100.0).unwrap();
        let p = Vec2::new(55.0, -13.0);
        assert_eq!(poly.undistort(p), p);
        assert_eq!(poly.order(), 4);
        assert_eq!(poly.coefficients.len(), 2);
    }

    #[test]
    fn polynomial_orders_match_coefficient_counts() {
        // 4th, 16th, 32nd, 64th order <-> 2, 8, 16, 32 coefficients.
        for (order, k) in [(4, 2), (16, 8), (32, 16), (64, 32)] {
            let poly = PolynomialUndistortion::new(order, 100.0).unwrap();
            assert_eq!(poly.coefficients.len(), k);
        }
        assert!(PolynomialUndistortion::new(3, 100.0).is_err());
    }
}
