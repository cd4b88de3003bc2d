//! Spatial sampling primitives: bilinear up-sampling, reflective padding,
//! cropping, bilinear gather, scatter-average, piecewise-linear table
//! lookup, and isotropic total variation.

use alloc::vec;
use alloc::vec::Vec;

use super::{AutodiffError, Op, Shape, Tape, Var};

pub(crate) struct GatherOp {
    pub grid: Var,
    pub xs: Var,
    pub ys: Var,
    /// Per-sample validity: inside the grid with all four corner cells
    /// readable.
    pub valid: Vec<bool>,
}

pub(crate) struct ScatterOp {
    pub values: Var,
    /// Linear cell index per sample; -1 for dropped (out-of-grid) samples.
    pub cells: Vec<i64>,
    pub counts: Vec<u32>,
}

/// Source taps for half-pixel bilinear 2x upsampling along one axis.
#[inline]
fn up2_taps(out_idx: usize, in_len: usize) -> (usize, usize, f32) {
    let src = (out_idx as f32 + 0.5) / 2.0 - 0.5;
    let floor = crate::math::floor_f32(src);
    let w = src - floor;
    let i0 = (floor.max(0.0) as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let w = if floor < 0.0 { 0.0 } else { w };
    (i0, i1, w)
}

impl Tape {
    /// Doubles spatial resolution with half-pixel bilinear interpolation
    /// (edges clamped).
    pub fn upsample_bilinear_2x(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(input);
        let (n, c, h, w) = (shape.n, shape.c, shape.h, shape.w);
        if h == 0 || w == 0 {
            return Err(AutodiffError::ShapeMismatch("upsample on empty input"));
        }
        let (oh, ow) = (2 * h, 2 * w);
        let mut value = vec![0.0f32; n * c * oh * ow];
        {
            let x = &self.nodes[input.0].value;
            for nc in 0..n * c {
                let src = &x[nc * h * w..(nc + 1) * h * w];
                let dst = &mut value[nc * oh * ow..(nc + 1) * oh * ow];
                for oy in 0..oh {
                    let (y0, y1, wy) = up2_taps(oy, h);
                    for ox in 0..ow {
                        let (x0, x1, wx) = up2_taps(ox, w);
                        let v00 = src[y0 * w + x0];
                        let v01 = src[y0 * w + x1];
                        let v10 = src[y1 * w + x0];
                        let v11 = src[y1 * w + x1];
                        dst[oy * ow + ox] = v00 * (1.0 - wy) * (1.0 - wx)
                            + v01 * (1.0 - wy) * wx
                            + v10 * wy * (1.0 - wx)
                            + v11 * wy * wx;
                    }
                }
            }
        }
        let needs = self.needs_grad(input);
        Ok(self.push(
            Shape::nchw(n, c, oh, ow),
            value,
            needs,
            Op::Upsample2x { input },
        ))
    }

    /// Reflective padding (boundary row/column not repeated), pads are
    /// [top, bottom, left, right] and must each be smaller than the
    /// corresponding extent.
    pub fn pad_reflect(&mut self, input: Var, pads: [usize; 4]) -> Result<Var, AutodiffError> {
        let shape = self.shape(input);
        let (n, c, h, w) = (shape.n, shape.c, shape.h, shape.w);
        let [top, bottom, left, right] = pads;
        if top >= h || bottom >= h || left >= w || right >= w {
            return Err(AutodiffError::ShapeMismatch("pad_reflect pad too large"));
        }
        let (oh, ow) = (h + top + bottom, w + left + right);
        let reflect = |i: isize, len: usize| -> usize {
            let len = len as isize;
            let mut i = i;
            if i < 0 {
                i = -i;
            }
            if i >= len {
                i = 2 * (len - 1) - i;
            }
            i as usize
        };
        let mut value = vec![0.0f32; n * c * oh * ow];
        {
            let x = &self.nodes[input.0].value;
            for nc in 0..n * c {
                let src = &x[nc * h * w..(nc + 1) * h * w];
                let dst = &mut value[nc * oh * ow..(nc + 1) * oh * ow];
                for oy in 0..oh {
                    let sy = reflect(oy as isize - top as isize, h);
                    for ox in 0..ow {
                        let sx = reflect(ox as isize - left as isize, w);
                        dst[oy * ow + ox] = src[sy * w + sx];
                    }
                }
            }
        }
        let needs = self.needs_grad(input);
        Ok(self.push(
            Shape::nchw(n, c, oh, ow),
            value,
            needs,
            Op::PadReflect { input, pads },
        ))
    }

    /// Extracts the `out_h x out_w` window at `(top, left)`.
    pub fn crop(
        &mut self,
        input: Var,
        top: usize,
        left: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var, AutodiffError> {
        let shape = self.shape(input);
        let (n, c, h, w) = (shape.n, shape.c, shape.h, shape.w);
        if top + out_h > h || left + out_w > w {
            return Err(AutodiffError::ShapeMismatch("crop window out of range"));
        }
        let mut value = vec![0.0f32; n * c * out_h * out_w];
        {
            let x = &self.nodes[input.0].value;
            for nc in 0..n * c {
                let src = &x[nc * h * w..(nc + 1) * h * w];
                let dst = &mut value[nc * out_h * out_w..(nc + 1) * out_h * out_w];
                for oy in 0..out_h {
                    let src_base = (top + oy) * w + left;
                    dst[oy * out_w..(oy + 1) * out_w]
                        .copy_from_slice(&src[src_base..src_base + out_w]);
                }
            }
        }
        let needs = self.needs_grad(input);
        Ok(self.push(
            Shape::nchw(n, c, out_h, out_w),
            value,
            needs,
            Op::Crop { input, top, left },
        ))
    }

    /// Bilinear interpolated read of a `(1, C, H, W)` grid at continuous
    /// cell coordinates `(xs, ys)` (x along W, y along H).
    ///
    /// A sample is valid when its four corner cells are in range and
    /// `readable` is true for all of them; invalid samples output zero,
    /// receive no adjoint, and are reported in the returned mask so the
    /// loss can exclude them. Gradients flow to the grid values and to
    /// the sampling coordinates.
    pub fn gather_bilinear(
        &mut self,
        grid: Var,
        xs: Var,
        ys: Var,
        readable: &[bool],
    ) -> Result<(Var, Vec<bool>), AutodiffError> {
        let gs = self.shape(grid);
        if gs.n != 1 {
            return Err(AutodiffError::ShapeMismatch("gather grid must have N=1"));
        }
        let (c, h, w) = (gs.c, gs.h, gs.w);
        if readable.len() != h * w {
            return Err(AutodiffError::ShapeMismatch("gather readable mask size"));
        }
        let l = self.shape(xs).len();
        if self.shape(ys).len() != l {
            return Err(AutodiffError::ShapeMismatch("gather coordinate lengths"));
        }
        let mut valid = vec![false; l];
        let mut value = vec![0.0f32; c * l];
        {
            let g = &self.nodes[grid.0].value;
            let xv = &self.nodes[xs.0].value;
            let yv = &self.nodes[ys.0].value;
            for (j, ok) in valid.iter_mut().enumerate() {
                let (x, y) = (xv[j], yv[j]);
                if !x.is_finite() || !y.is_finite() {
                    continue;
                }
                let x0f = crate::math::floor_f32(x);
                let y0f = crate::math::floor_f32(y);
                if x0f < 0.0 || y0f < 0.0 {
                    continue;
                }
                let (x0, y0) = (x0f as usize, y0f as usize);
                if x0 + 1 >= w || y0 + 1 >= h {
                    continue;
                }
                let ids = [y0 * w + x0, y0 * w + x0 + 1, (y0 + 1) * w + x0, (y0 + 1) * w + x0 + 1];
                if !(readable[ids[0]] && readable[ids[1]] && readable[ids[2]] && readable[ids[3]]) {
                    continue;
                }
                *ok = true;
                let (wx, wy) = (x - x0f, y - y0f);
                for ch in 0..c {
                    let plane = &g[ch * h * w..(ch + 1) * h * w];
                    value[ch * l + j] = plane[ids[0]] * (1.0 - wy) * (1.0 - wx)
                        + plane[ids[1]] * (1.0 - wy) * wx
                        + plane[ids[2]] * wy * (1.0 - wx)
                        + plane[ids[3]] * wy * wx;
                }
            }
        }
        let needs = self.needs_grad(grid) || self.needs_grad(xs) || self.needs_grad(ys);
        let out = self.push(
            Shape::nchw(1, c, 1, l),
            value,
            needs,
            Op::GatherBilinear(GatherOp {
                grid,
                xs,
                ys,
                valid: valid.clone(),
            }),
        );
        Ok((out, valid))
    }

    /// Scatter-average (nearest-cell binning): each grid cell becomes the
    /// mean of all samples mapped to it, unvisited cells stay zero.
    ///
    /// `values` is `(1, C, 1, L)`; `cells` holds the linear cell index of
    /// each sample, or -1 for dropped samples. Returns the `(1, C, H, W)`
    /// grid plus per-cell visit counts.
    pub fn scatter_mean(
        &mut self,
        values: Var,
        cells: &[i64],
        grid_h: usize,
        grid_w: usize,
    ) -> Result<(Var, Vec<u32>), AutodiffError> {
        let vs = self.shape(values);
        if vs.n != 1 || vs.h != 1 {
            return Err(AutodiffError::ShapeMismatch("scatter values must be (1,C,1,L)"));
        }
        let (c, l) = (vs.c, vs.w);
        if cells.len() != l {
            return Err(AutodiffError::ShapeMismatch("scatter cell index length"));
        }
        let plane = grid_h * grid_w;
        if cells.iter().any(|&i| i >= plane as i64) {
            return Err(AutodiffError::ShapeMismatch("scatter cell out of range"));
        }
        let mut counts = vec![0u32; plane];
        for &cell in cells {
            if cell >= 0 {
                counts[cell as usize] += 1;
            }
        }
        let mut value = vec![0.0f32; c * plane];
        {
            let v = &self.nodes[values.0].value;
            for ch in 0..c {
                let dst = &mut value[ch * plane..(ch + 1) * plane];
                let src = &v[ch * l..(ch + 1) * l];
                for (j, &cell) in cells.iter().enumerate() {
                    if cell >= 0 {
                        dst[cell as usize] += src[j];
                    }
                }
                for (d, &n) in dst.iter_mut().zip(counts.iter()) {
                    if n > 0 {
                        *d /= n as f32;
                    }
                }
            }
        }
        let needs = self.needs_grad(values);
        let out = self.push(
            Shape::nchw(1, c, grid_h, grid_w),
            value,
            needs,
            Op::ScatterMean(ScatterOp {
                values,
                cells: cells.to_vec(),
                counts: counts.clone(),
            }),
        );
        Ok((out, counts))
    }

    /// Piecewise-linear table lookup: interpolates `nodes` at fractional
    /// positions `ts` (in node units). Positions past either end clamp to
    /// the boundary node. Gradients flow to the two flanking nodes with
    /// the interpolation weights and to `ts` with the segment slope.
    pub fn interp1d(&mut self, nodes: Var, ts: Var) -> Result<Var, AutodiffError> {
        let n = self.shape(nodes).len();
        if n < 2 {
            return Err(AutodiffError::ShapeMismatch("interp1d needs >= 2 nodes"));
        }
        let shape = self.shape(ts);
        let l = shape.len();
        let mut value = vec![0.0f32; l];
        {
            let nv = &self.nodes[nodes.0].value;
            let tv = &self.nodes[ts.0].value;
            for j in 0..l {
                let t = tv[j];
                value[j] = if t <= 0.0 {
                    nv[0]
                } else {
                    let i = crate::math::floor_f32(t) as usize;
                    if i >= n - 1 {
                        nv[n - 1]
                    } else {
                        let w = t - i as f32;
                        (1.0 - w) * nv[i] + w * nv[i + 1]
                    }
                };
            }
        }
        let needs = self.needs_grad(nodes) || self.needs_grad(ts);
        Ok(self.push(shape, value, needs, Op::Interp1d { nodes, ts }))
    }

    /// Isotropic total variation `sum sqrt(|dx h|^2 + |dy h|^2)` with
    /// forward differences, summed over all items and channels.
    pub fn tv_iso(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(input);
        let (n, c, h, w) = (shape.n, shape.c, shape.h, shape.w);
        if h < 2 || w < 2 {
            return Err(AutodiffError::ShapeMismatch("tv_iso needs at least 2x2"));
        }
        let mut acc = 0.0f64;
        {
            let x = &self.nodes[input.0].value;
            for nc in 0..n * c {
                let p = &x[nc * h * w..(nc + 1) * h * w];
                for i in 0..h {
                    for j in 0..w {
                        let dx = if j + 1 < w { p[i * w + j + 1] - p[i * w + j] } else { 0.0 };
                        let dy = if i + 1 < h { p[(i + 1) * w + j] - p[i * w + j] } else { 0.0 };
                        acc += crate::math::sqrt((dx as f64) * (dx as f64) + (dy as f64) * (dy as f64));
                    }
                }
            }
        }
        let needs = self.needs_grad(input);
        Ok(self.push(
            Shape::scalar(),
            vec![acc as f32],
            needs,
            Op::TvIso { input },
        ))
    }
}

pub(crate) fn adjoint(tape: &mut Tape, node: usize, g_out: &[f32]) {
    match &tape.nodes[node].op {
        Op::Upsample2x { input } => {
            let input = *input;
            if !tape.needs_grad(input) {
                return;
            }
            let shape = tape.shape(input);
            let (n, c, h, w) = (shape.n, shape.c, shape.h, shape.w);
            let (oh, ow) = (2 * h, 2 * w);
            let mut din = vec![0.0f32; n * c * h * w];
            for nc in 0..n * c {
                let dst = &mut din[nc * h * w..(nc + 1) * h * w];
                let src = &g_out[nc * oh * ow..(nc + 1) * oh * ow];
                for oy in 0..oh {
                    let (y0, y1, wy) = up2_taps(oy, h);
                    for ox in 0..ow {
                        let (x0, x1, wx) = up2_taps(ox, w);
                        let g = src[oy * ow + ox];
                        dst[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                        dst[y0 * w + x1] += g * (1.0 - wy) * wx;
                        dst[y1 * w + x0] += g * wy * (1.0 - wx);
                        dst[y1 * w + x1] += g * wy * wx;
                    }
                }
            }
            super::accumulate(tape.grad_buf(input), &din);
        }
        Op::PadReflect { input, pads } => {
            let (input, pads) = (*input, *pads);
            if !tape.needs_grad(input) {
                return;
            }
            let shape = tape.shape(input);
            let (n, c, h, w) = (shape.n, shape.c, shape.h, shape.w);
            let [top, _, left, _] = pads;
            let out_shape = tape.nodes[node].shape;
            let (oh, ow) = (out_shape.h, out_shape.w);
            let reflect = |i: isize, len: usize| -> usize {
                let len = len as isize;
                let mut i = i;
                if i < 0 {
                    i = -i;
                }
                if i >= len {
                    i = 2 * (len - 1) - i;
                }
                i as usize
            };
            let mut din = vec![0.0f32; n * c * h * w];
            for nc in 0..n * c {
                let dst = &mut din[nc * h * w..(nc + 1) * h * w];
                let src = &g_out[nc * oh * ow..(nc + 1) * oh * ow];
                for oy in 0..oh {
                    let sy = reflect(oy as isize - top as isize, h);
                    for ox in 0..ow {
                        let sx = reflect(ox as isize - left as isize, w);
                        dst[sy * w + sx] += src[oy * ow + ox];
                    }
                }
            }
            super::accumulate(tape.grad_buf(input), &din);
        }
        Op::Crop { input, top, left } => {
            let (input, top, left) = (*input, *top, *left);
            if !tape.needs_grad(input) {
                return;
            }
            let shape = tape.shape(input);
            let (n, c, h, w) = (shape.n, shape.c, shape.h, shape.w);
            let out_shape = tape.nodes[node].shape;
            let (oh, ow) = (out_shape.h, out_shape.w);
            let mut din = vec![0.0f32; n * c * h * w];
            for nc in 0..n * c {
                let dst = &mut din[nc * h * w..(nc + 1) * h * w];
                let src = &g_out[nc * oh * ow..(nc + 1) * oh * ow];
                for oy in 0..oh {
                    let dst_base = (top + oy) * w + left;
                    for ox in 0..ow {
                        dst[dst_base + ox] += src[oy * ow + ox];
                    }
                }
            }
            super::accumulate(tape.grad_buf(input), &din);
        }
        Op::GatherBilinear(op) => {
            let (grid, xs, ys) = (op.grid, op.xs, op.ys);
            let valid = op.valid.clone();
            let gs = tape.shape(grid);
            let (c, h, w) = (gs.c, gs.h, gs.w);
            let l = valid.len();
            let wants_grid = tape.needs_grad(grid);
            let wants_x = tape.needs_grad(xs);
            let wants_y = tape.needs_grad(ys);
            let mut dgrid = if wants_grid {
                vec![0.0f32; c * h * w]
            } else {
                Vec::new()
            };
            let mut dxs = if wants_x { vec![0.0f32; l] } else { Vec::new() };
            let mut dys = if wants_y { vec![0.0f32; l] } else { Vec::new() };
            {
                let xv = &tape.nodes[xs.0].value;
                let yv = &tape.nodes[ys.0].value;
                for j in 0..l {
                    if !valid[j] {
                        continue;
                    }
                    let (x, y) = (xv[j], yv[j]);
                    let x0f = crate::math::floor_f32(x);
                    let y0f = crate::math::floor_f32(y);
                    let (x0, y0) = (x0f as usize, y0f as usize);
                    let (wx, wy) = (x - x0f, y - y0f);
                    let ids = [
                        y0 * w + x0,
                        y0 * w + x0 + 1,
                        (y0 + 1) * w + x0,
                        (y0 + 1) * w + x0 + 1,
                    ];
                    for ch in 0..c {
                        let gv = g_out[ch * l + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let plane_base = ch * h * w;
                        if wants_grid {
                            dgrid[plane_base + ids[0]] += gv * (1.0 - wy) * (1.0 - wx);
                            dgrid[plane_base + ids[1]] += gv * (1.0 - wy) * wx;
                            dgrid[plane_base + ids[2]] += gv * wy * (1.0 - wx);
                            dgrid[plane_base + ids[3]] += gv * wy * wx;
                        }
                        if wants_x || wants_y {
                            let v00 = tape.nodes[grid.0].value[plane_base + ids[0]];
                            let v01 = tape.nodes[grid.0].value[plane_base + ids[1]];
                            let v10 = tape.nodes[grid.0].value[plane_base + ids[2]];
                            let v11 = tape.nodes[grid.0].value[plane_base + ids[3]];
                            if wants_x {
                                dxs[j] += gv * ((v01 - v00) * (1.0 - wy) + (v11 - v10) * wy);
                            }
                            if wants_y {
                                dys[j] += gv * ((v10 - v00) * (1.0 - wx) + (v11 - v01) * wx);
                            }
                        }
                    }
                }
            }
            if wants_grid {
                super::accumulate(tape.grad_buf(grid), &dgrid);
            }
            if wants_x {
                super::accumulate(tape.grad_buf(xs), &dxs);
            }
            if wants_y {
                super::accumulate(tape.grad_buf(ys), &dys);
            }
        }
        Op::ScatterMean(op) => {
            let values = op.values;
            if !tape.needs_grad(values) {
                return;
            }
            let cells = op.cells.clone();
            let counts = op.counts.clone();
            let vs = tape.shape(values);
            let (c, l) = (vs.c, vs.w);
            let plane = counts.len();
            let mut dv = vec![0.0f32; c * l];
            for ch in 0..c {
                let src = &g_out[ch * plane..(ch + 1) * plane];
                let dst = &mut dv[ch * l..(ch + 1) * l];
                for (j, &cell) in cells.iter().enumerate() {
                    if cell >= 0 {
                        let cell = cell as usize;
                        dst[j] = src[cell] / counts[cell] as f32;
                    }
                }
            }
            super::accumulate(tape.grad_buf(values), &dv);
        }
        Op::Interp1d { nodes, ts } => {
            let (nodes_v, ts_v) = (*nodes, *ts);
            let n = tape.shape(nodes_v).len();
            let l = tape.shape(ts_v).len();
            let wants_nodes = tape.needs_grad(nodes_v);
            let wants_ts = tape.needs_grad(ts_v);
            let mut dn = if wants_nodes { vec![0.0f32; n] } else { Vec::new() };
            let mut dt = if wants_ts { vec![0.0f32; l] } else { Vec::new() };
            {
                let nv = &tape.nodes[nodes_v.0].value;
                let tv = &tape.nodes[ts_v.0].value;
                for j in 0..l {
                    let g = g_out[j];
                    let t = tv[j];
                    if t <= 0.0 {
                        if wants_nodes {
                            dn[0] += g;
                        }
                        continue;
                    }
                    let i = crate::math::floor_f32(t) as usize;
                    if i >= n - 1 {
                        if wants_nodes {
                            dn[n - 1] += g;
                        }
                        continue;
                    }
                    let w = t - i as f32;
                    if wants_nodes {
                        dn[i] += g * (1.0 - w);
                        dn[i + 1] += g * w;
                    }
                    if wants_ts {
                        dt[j] += g * (nv[i + 1] - nv[i]);
                    }
                }
            }
            if wants_nodes {
                super::accumulate(tape.grad_buf(nodes_v), &dn);
            }
            if wants_ts {
                super::accumulate(tape.grad_buf(ts_v), &dt);
            }
        }
        Op::TvIso { input } => {
            let input = *input;
            if !tape.needs_grad(input) {
                return;
            }
            let shape = tape.shape(input);
            let (n, c, h, w) = (shape.n, shape.c, shape.h, shape.w);
            let g = g_out[0];
            let mut din = vec![0.0f32; n * c * h * w];
            {
                let x = &tape.nodes[input.0].value;
                for nc in 0..n * c {
                    let p = &x[nc * h * w..(nc + 1) * h * w];
                    let d = &mut din[nc * h * w..(nc + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            let dx = if j + 1 < w { p[i * w + j + 1] - p[i * w + j] } else { 0.0 };
                            let dy = if i + 1 < h { p[(i + 1) * w + j] - p[i * w + j] } else { 0.0 };
                            let t = crate::math::sqrt_f32(dx * dx + dy * dy);
                            if t <= 0.0 {
                                continue; // flat neighborhood, subgradient 0
                            }
                            let gx = g * dx / t;
                            let gy = g * dy / t;
                            d[i * w + j] -= gx + gy;
                            if j + 1 < w {
                                d[i * w + j + 1] += gx;
                            }
                            if i + 1 < h {
                                d[(i + 1) * w + j] += gy;
                            }
                        }
                    }
                }
            }
            super::accumulate(tape.grad_buf(input), &din);
        }
        _ => unreachable!(),
    }
}
