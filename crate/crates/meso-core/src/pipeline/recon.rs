//! The world-frame RGBH reconstruction raster.
//!
//! Cells accumulate backprojected RGBH samples by nearest-cell binning.
//! Two write modes exist: a full rebuild where every visited cell becomes
//! the plain mean of its samples, and the batched running-average update
//! `B <- m B + (1-m) D_batch` that touches only the cells the batch
//! visits. Unvisited cells hold zero and are excluded from gathers (and
//! thereby from the loss). A cell's first visit blends with the zero
//! fill, matching the running-average rule literally.

use crate::geometry::Vec2;
use crate::math;
use alloc::vec;
use alloc::vec::Vec;

/// Number of channels in the reconstruction (RGB plus height).
pub const CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub rows: usize,
    pub cols: usize,
    /// Four row-major planes (R, G, B, H).
    pub data: Vec<f32>,
    pub visited: Vec<bool>,
    /// World coordinates of the center of cell (0, 0).
    pub origin: Vec2,
    /// mm per cell.
    pub pitch: f64,
}

impl Reconstruction {
    pub fn new(origin: Vec2, pitch: f64, rows: usize, cols: usize) -> Self {
        Reconstruction {
            rows,
            cols,
            data: vec![0.0; CHANNELS * rows * cols],
            visited: vec![false; rows * cols],
            origin,
            pitch,
        }
    }

    /// Grid sized to cover `[min, max]` plus a fractional margin, with
    /// the origin snapped to a pitch multiple so congruent grids align
    /// cell-for-cell.
    pub fn with_extent(min: Vec2, max: Vec2, pitch: f64, margin_frac: f64) -> Self {
        let margin_x = (max.x - min.x).max(pitch) * margin_frac;
        let margin_y = (max.y - min.y).max(pitch) * margin_frac;
        let lo_x = min.x - margin_x;
        let lo_y = min.y - margin_y;
        let origin = Vec2::new(
            math::floor(lo_x / pitch) * pitch,
            math::floor(lo_y / pitch) * pitch,
        );
        let cols = ((max.x + margin_x - origin.x) / pitch) as usize + 2;
        let rows = ((max.y + margin_y - origin.y) / pitch) as usize + 2;
        Reconstruction::new(origin, pitch, rows, cols)
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.rows * self.cols
    }

    /// Continuous cell coordinates (col, row) of a world point.
    #[inline]
    pub fn world_to_cell(&self, p: Vec2) -> (f64, f64) {
        (
            (p.x - self.origin.x) / self.pitch,
            (p.y - self.origin.y) / self.pitch,
        )
    }

    /// Nearest-cell linear index for continuous cell coordinates, or -1
    /// when the rounded cell falls outside the grid.
    #[inline]
    pub fn bin(&self, x_cell: f32, y_cell: f32) -> i64 {
        if !x_cell.is_finite() || !y_cell.is_finite() {
            return -1;
        }
        let c = math::round_f32(x_cell) as i64;
        let r = math::round_f32(y_cell) as i64;
        if c < 0 || r < 0 || c >= self.cols as i64 || r >= self.rows as i64 {
            return -1;
        }
        r * self.cols as i64 + c
    }

    /// Rebuilds the raster from scratch: every visited cell becomes the
    /// mean of the samples binned into it; everything else resets to the
    /// zero fill. Returns the number of dropped (out-of-grid) samples.
    pub fn scatter_average(&mut self, cells: &[i64], channels: &[&[f32]; CHANNELS]) -> usize {
        let plane = self.plane();
        self.data.fill(0.0);
        self.visited.fill(false);
        let mut counts = vec![0u32; plane];
        let mut dropped = 0usize;
        for &cell in cells {
            if cell < 0 {
                dropped += 1;
            } else {
                counts[cell as usize] += 1;
            }
        }
        for (ch, values) in channels.iter().enumerate() {
            debug_assert_eq!(values.len(), cells.len());
            let dst = &mut self.data[ch * plane..(ch + 1) * plane];
            for (&cell, &v) in cells.iter().zip(values.iter()) {
                if cell >= 0 {
                    dst[cell as usize] += v;
                }
            }
            for (d, &n) in dst.iter_mut().zip(counts.iter()) {
                if n > 0 {
                    *d /= n as f32;
                }
            }
        }
        for (v, &n) in self.visited.iter_mut().zip(counts.iter()) {
            *v = n > 0;
        }
        dropped
    }

    /// Running-average update: cells visited by the batch move toward the
    /// batch mean, `B <- m B + (1-m) D`; untouched cells keep their bits.
    /// Newly visited cells blend with the zero fill. Returns dropped
    /// samples.
    pub fn running_average_update(
        &mut self,
        cells: &[i64],
        channels: &[&[f32]; CHANNELS],
        m: f64,
    ) -> usize {
        debug_assert!(m >= 0.0 && m <= 1.0);
        let plane = self.plane();
        let mut counts = vec![0u32; plane];
        let mut dropped = 0usize;
        for &cell in cells {
            if cell < 0 {
                dropped += 1;
            } else {
                counts[cell as usize] += 1;
            }
        }
        let mut batch_mean = vec![0.0f32; plane];
        let m32 = m as f32;
        for (ch, values) in channels.iter().enumerate() {
            debug_assert_eq!(values.len(), cells.len());
            batch_mean.fill(0.0);
            for (&cell, &v) in cells.iter().zip(values.iter()) {
                if cell >= 0 {
                    batch_mean[cell as usize] += v;
                }
            }
            let dst = &mut self.data[ch * plane..(ch + 1) * plane];
            for (j, &n) in counts.iter().enumerate() {
                if n > 0 {
                    let mean = batch_mean[j] / n as f32;
                    dst[j] = m32 * dst[j] + (1.0 - m32) * mean;
                }
            }
        }
        for (j, &n) in counts.iter().enumerate() {
            if n > 0 {
                self.visited[j] = true;
            }
        }
        dropped
    }

    /// Height plane of the raster.
    pub fn height_plane(&self) -> &[f32] {
        let plane = self.plane();
        &self.data[3 * plane..]
    }

    /// One RGB plane (0..3).
    pub fn rgb_plane(&self, ch: usize) -> &[f32] {
        debug_assert!(ch < 3);
        let plane = self.plane();
        &self.data[ch * plane..(ch + 1) * plane]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Reconstruction {
        Reconstruction::new(Vec2::ZERO, 1.0, 2, 3)
    }

    #[test]
    fn scatter_average_means_and_fill() {
        let mut recon = tiny();
        let cells = [0i64, 0, 4, -1];
        let r = [2.0f32, 4.0, 1.0, 9.0];
        let g = [0.0f32; 4];
        let b = [0.0f32; 4];
        let h = [0.5f32, 0.7, 0.0, 9.0];
        let dropped = recon.scatter_average(&cells, &[&r, &g, &b, &h]);
        assert_eq!(dropped, 1);
        assert_eq!(recon.data[0], 3.0); // (2 + 4) / 2
        assert!((recon.height_plane()[0] - 0.6).abs() < 1e-7);
        assert!(recon.visited[0] && recon.visited[4]);
        assert!(!recon.visited[1]);
        assert_eq!(recon.data[1], 0.0);
    }

    #[test]
    fn running_average_blends_and_preserves_untouched() {
        let mut recon = tiny();
        let cells = [2i64];
        let vals = [[10.0f32], [0.0], [0.0], [1.0]];
        // First visit blends with the zero fill.
        recon.running_average_update(
            &cells,
            &[&vals[0], &vals[1], &vals[2], &vals[3]],
            0.5,
        );
        assert_eq!(recon.data[2], 5.0);
        assert!(recon.visited[2]);

        // Untouched cells are bit-identical before and after.
        let before = recon.data.clone();
        let cells2 = [5i64];
        recon.running_average_update(
            &cells2,
            &[&vals[0], &vals[1], &vals[2], &vals[3]],
            0.5,
        );
        for j in 0..recon.plane() {
            if j != 5 {
                for ch in 0..CHANNELS {
                    let ix = ch * recon.plane() + j;
                    assert_eq!(recon.data[ix].to_bits(), before[ix].to_bits());
                }
            }
        }
    }

    #[test]
    fn momentum_one_is_identity() {
        let mut recon = tiny();
        let cells = [1i64];
        let vals = [[3.0f32], [0.0], [0.0], [0.0]];
        recon.running_average_update(&cells, &[&vals[0], &vals[1], &vals[2], &vals[3]], 0.5);
        let before = recon.data.clone();
        recon.running_average_update(&cells, &[&vals[0], &vals[1], &vals[2], &vals[3]], 1.0);
        assert_eq!(recon.data, before);
    }

    #[test]
    fn binning_rounds_to_nearest_and_drops_outside() {
        let recon = tiny();
        assert_eq!(recon.bin(0.4, 0.4), 0);
        assert_eq!(recon.bin(1.6, 0.2), 2);
        assert_eq!(recon.bin(2.4, 1.4), 5);
        assert_eq!(recon.bin(-0.6, 0.0), -1);
        assert_eq!(recon.bin(0.0, 1.6), -1);
        assert_eq!(recon.bin(f32::NAN, 0.0), -1);
    }

    #[test]
    fn extent_snaps_origin_to_pitch() {
        let recon = Reconstruction::with_extent(
            Vec2::new(-3.34, 1.01),
            Vec2::new(7.2, 5.9),
            0.25,
            0.1,
        );
        let ox = recon.origin.x / 0.25;
        let oy = recon.origin.y / 0.25;
        assert!((ox - math::round(ox)).abs() < 1e-9);
        assert!((oy - math::round(oy)).abs() < 1e-9);
        // Covers the extent with margin.
        let (cmax, rmax) = recon.world_to_cell(Vec2::new(7.2, 5.9));
        assert!(cmax < (recon.cols - 1) as f64 && rmax < (recon.rows - 1) as f64);
        let (cmin, rmin) = recon.world_to_cell(Vec2::new(-3.34, 1.01));
        assert!(cmin > 0.0 && rmin > 0.0);
    }
}
