//! File formats: height-map rasters, mask rasters, parameter manifests,
//! checkpoints, and the plain-text configuration syntax.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use meso_core::geometry::{AutofocusContext, Vec2};
use meso_core::pipeline::{DeformationParams, PoseState, Reconstruction, UndistState};

use crate::CliError;

/// Binary raster of 32-bit little-endian floats with a text header:
/// `MESOH1 rows cols pitch-mm origin-x origin-y`.
pub struct HeightMapFile {
    pub rows: usize,
    pub cols: usize,
    pub pitch_mm: f64,
    pub origin: Vec2,
    pub data: Vec<f32>,
}

impl HeightMapFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        assert_eq!(self.data.len(), self.rows * self.cols);
        let mut out = format!(
            "MESOH1 {} {} {} {} {}\n",
            self.rows, self.cols, self.pitch_mm, self.origin.x, self.origin.y
        )
        .into_bytes();
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let (header, payload) = split_header(bytes)?;
        let mut t = header.split_whitespace();
        if t.next() != Some("MESOH1") {
            return Err(CliError::data("not a MESOH1 height map"));
        }
        let rows: usize = parse_tok(t.next(), "rows")?;
        let cols: usize = parse_tok(t.next(), "cols")?;
        let pitch_mm: f64 = parse_tok(t.next(), "pitch")?;
        let ox: f64 = parse_tok(t.next(), "origin-x")?;
        let oy: f64 = parse_tok(t.next(), "origin-y")?;
        if payload.len() != rows * cols * 4 {
            return Err(CliError::data(format!(
                "height map payload {} bytes, expected {}",
                payload.len(),
                rows * cols * 4
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(HeightMapFile {
            rows,
            cols,
            pitch_mm,
            origin: Vec2::new(ox, oy),
            data,
        })
    }
}

/// Region-mask raster (u16 little-endian) with header
/// `MESOM1 rows cols pitch-mm origin-x origin-y regions`.
pub struct MaskFile {
    pub rows: usize,
    pub cols: usize,
    pub pitch_mm: f64,
    pub origin: Vec2,
    pub regions: usize,
    pub data: Vec<u16>,
}

impl MaskFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "MESOM1 {} {} {} {} {} {}\n",
            self.rows, self.cols, self.pitch_mm, self.origin.x, self.origin.y, self.regions
        )
        .into_bytes();
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let (header, payload) = split_header(bytes)?;
        let mut t = header.split_whitespace();
        if t.next() != Some("MESOM1") {
            return Err(CliError::data("not a MESOM1 mask raster"));
        }
        let rows: usize = parse_tok(t.next(), "rows")?;
        let cols: usize = parse_tok(t.next(), "cols")?;
        let pitch_mm: f64 = parse_tok(t.next(), "pitch")?;
        let ox: f64 = parse_tok(t.next(), "origin-x")?;
        let oy: f64 = parse_tok(t.next(), "origin-y")?;
        let regions: usize = parse_tok(t.next(), "regions")?;
        if payload.len() != rows * cols * 2 {
            return Err(CliError::data("mask payload size mismatch"));
        }
        let data = payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Ok(MaskFile {
            rows,
            cols,
            pitch_mm,
            origin: Vec2::new(ox, oy),
            regions,
            data,
        })
    }
}

fn split_header(bytes: &[u8]) -> Result<(&str, &[u8]), CliError> {
    let pos = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CliError::data("missing header line"))?;
    let header = std::str::from_utf8(&bytes[..pos])
        .map_err(|_| CliError::data("header is not UTF-8"))?;
    Ok((header, &bytes[pos + 1..]))
}

fn parse_tok<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T, CliError> {
    tok.ok_or_else(|| CliError::data(format!("missing {what} in header")))?
        .parse()
        .map_err(|_| CliError::data(format!("bad {what} in header")))
}

/// Plain-text `key = value` file; `#` starts a comment. Returns the pairs
/// in file order.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::usage(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Writes the deformation-parameter manifest (poses, distortion profile,
/// autofocus context) as plain text.
pub fn manifest_to_string(params: &DeformationParams) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# estimated deformation parameters");
    let _ = writeln!(s, "f_eff_mm = {}", params.ctx.f_eff);
    let _ = writeln!(s, "magnification = {}", params.ctx.m0);
    let _ = writeln!(s, "z0_mm = {}", params.ctx.z0);
    let _ = writeln!(s, "frames = {}", params.poses.len());
    for (i, p) in params.poses.iter().enumerate() {
        let _ = writeln!(
            s,
            "pose_{i} = {} {} {} {} {} {}",
            p.x, p.y, p.z, p.n_x, p.n_y, p.theta
        );
    }
    match &params.undist {
        UndistState::Piecewise {
            nodes,
            delta_r,
            center,
        } => {
            let _ = writeln!(s, "undistortion = piecewise");
            let _ = writeln!(s, "delta_r_px = {delta_r}");
            let _ = writeln!(s, "center_px = {} {}", center[0], center[1]);
            let nodes: Vec<String> = nodes.iter().map(|n| n.to_string()).collect();
            let _ = writeln!(s, "nodes = {}", nodes.join(","));
        }
        UndistState::Polynomial {
            coeffs,
            r_scale,
            center,
        } => {
            let _ = writeln!(s, "undistortion = polynomial{}", 2 * coeffs.len());
            let _ = writeln!(s, "r_scale_px = {r_scale}");
            let _ = writeln!(s, "center_px = {} {}", center[0], center[1]);
            let coeffs: Vec<String> = coeffs.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "coefficients = {}", coeffs.join(","));
        }
    }
    s
}

/// Parses a manifest produced by [`manifest_to_string`].
pub fn manifest_from_str(text: &str) -> Result<DeformationParams, CliError> {
    let pairs = parse_key_values(text)?;
    let get = |key: &str| -> Result<&str, CliError> {
        pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| CliError::data(format!("manifest missing `{key}`")))
    };
    let f_eff: f64 = get("f_eff_mm")?
        .parse()
        .map_err(|_| CliError::data("bad f_eff_mm"))?;
    let m0: f64 = get("magnification")?
        .parse()
        .map_err(|_| CliError::data("bad magnification"))?;
    let ctx =
        AutofocusContext::new(f_eff, m0).map_err(|e| CliError::data(format!("context: {e}")))?;
    let frames: usize = get("frames")?
        .parse()
        .map_err(|_| CliError::data("bad frame count"))?;
    let mut poses = Vec::with_capacity(frames);
    for i in 0..frames {
        let line = get(&format!("pose_{i}"))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| CliError::data("bad pose value")))
            .collect::<Result<_, _>>()?;
        if vals.len() != 6 {
            return Err(CliError::data(format!("pose_{i} needs 6 values")));
        }
        poses.push(PoseState {
            x: vals[0],
            y: vals[1],
            z: vals[2],
            n_x: vals[3],
            n_y: vals[4],
            theta: vals[5],
        });
    }
    let kind = get("undistortion")?;
    let center_vals: Vec<f64> = get("center_px")?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| CliError::data("bad center")))
        .collect::<Result<_, _>>()?;
    if center_vals.len() != 2 {
        return Err(CliError::data("center_px needs 2 values"));
    }
    let center = [center_vals[0], center_vals[1]];
    let undist = if kind == "piecewise" {
        let delta_r: f64 = get("delta_r_px")?
            .parse()
            .map_err(|_| CliError::data("bad delta_r_px"))?;
        let nodes: Vec<f64> = get("nodes")?
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| CliError::data("bad node")))
            .collect::<Result<_, _>>()?;
        UndistState::Piecewise {
            nodes,
            delta_r,
            center,
        }
    } else {
        let r_scale: f64 = get("r_scale_px")?
            .parse()
            .map_err(|_| CliError::data("bad r_scale_px"))?;
        let coeffs: Vec<f64> = get("coefficients")?
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| CliError::data("bad coefficient")))
            .collect::<Result<_, _>>()?;
        UndistState::Polynomial {
            coeffs,
            r_scale,
            center,
        }
    };
    Ok(DeformationParams { poses, undist, ctx })
}

/// Checkpoint container: named length-prefixed sections after a magic
/// line. Holds the parameter manifest, the network blob, and the
/// reconstruction snapshot.
pub struct Checkpoint {
    pub manifest: String,
    pub network: Vec<u8>,
    pub recon: Vec<u8>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = b"MESOCKPT1\n".to_vec();
        for (name, body) in [
            ("params", self.manifest.as_bytes()),
            ("network", self.network.as_slice()),
            ("recon", self.recon.as_slice()),
        ] {
            out.extend_from_slice(format!("section {name} {}\n", body.len()).as_bytes());
            out.extend_from_slice(body);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let (magic, mut rest) = split_header(bytes)?;
        if magic != "MESOCKPT1" {
            return Err(CliError::data("not a MESOCKPT1 checkpoint"));
        }
        let mut manifest = None;
        let mut network = None;
        let mut recon = None;
        while !rest.is_empty() {
            let (line, after) = split_header(rest)?;
            let mut t = line.split_whitespace();
            if t.next() != Some("section") {
                return Err(CliError::data("corrupt checkpoint: expected section"));
            }
            let name = t
                .next()
                .ok_or_else(|| CliError::data("corrupt checkpoint: missing section name"))?
                .to_string();
            let len: usize = parse_tok(t.next(), "section length")?;
            if after.len() < len {
                return Err(CliError::data("corrupt checkpoint: truncated section"));
            }
            let (body, tail) = after.split_at(len);
            match name.as_str() {
                "params" => {
                    manifest = Some(
                        std::str::from_utf8(body)
                            .map_err(|_| CliError::data("params section not UTF-8"))?
                            .to_string(),
                    )
                }
                "network" => network = Some(body.to_vec()),
                "recon" => recon = Some(body.to_vec()),
                _ => {}
            }
            rest = tail;
        }
        Ok(Checkpoint {
            manifest: manifest.ok_or_else(|| CliError::data("checkpoint missing params"))?,
            network: network.ok_or_else(|| CliError::data("checkpoint missing network"))?,
            recon: recon.ok_or_else(|| CliError::data("checkpoint missing recon"))?,
        })
    }
}

/// Serializes a reconstruction snapshot (4 RGBH planes plus the visit
/// mask) with a text header.
pub fn recon_to_bytes(recon: &Reconstruction) -> Vec<u8> {
    let mut out = format!(
        "RECON1 {} {} {} {} {}\n",
        recon.rows, recon.cols, recon.pitch, recon.origin.x, recon.origin.y
    )
    .into_bytes();
    for &v in &recon.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(recon.visited.iter().map(|&v| v as u8));
    out
}

pub fn recon_from_bytes(bytes: &[u8]) -> Result<Reconstruction, CliError> {
    let (header, payload) = split_header(bytes)?;
    let mut t = header.split_whitespace();
    if t.next() != Some("RECON1") {
        return Err(CliError::data("not a RECON1 snapshot"));
    }
    let rows: usize = parse_tok(t.next(), "rows")?;
    let cols: usize = parse_tok(t.next(), "cols")?;
    let pitch: f64 = parse_tok(t.next(), "pitch")?;
    let ox: f64 = parse_tok(t.next(), "origin-x")?;
    let oy: f64 = parse_tok(t.next(), "origin-y")?;
    let plane = rows * cols;
    if payload.len() != 4 * plane * 4 + plane {
        return Err(CliError::data("recon snapshot size mismatch"));
    }
    let mut recon = Reconstruction::new(Vec2::new(ox, oy), pitch, rows, cols);
    for (i, c) in payload[..4 * plane * 4].chunks_exact(4).enumerate() {
        recon.data[i] = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    }
    for (i, &b) in payload[4 * plane * 4..].iter().enumerate() {
        recon.visited[i] = b != 0;
    }
    Ok(recon)
}

/// Reads an 8-bit RGB image (PNG or PPM) into three normalized planes.
pub fn read_rgb_image(path: &Path) -> Result<meso_core::pipeline::RgbFrame, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut rgb = vec![0.0f32; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        let j = y as usize * w + x as usize;
        for ch in 0..3 {
            rgb[ch * w * h + j] = px.0[ch] as f32 / 255.0;
        }
    }
    Ok(meso_core::pipeline::RgbFrame {
        rows: h,
        cols: w,
        rgb,
    })
}

/// Writes three normalized planes as an 8-bit RGB PNG.
pub fn write_rgb_png(
    path: &Path,
    rows: usize,
    cols: usize,
    planes: [&[f32]; 3],
) -> Result<(), CliError> {
    let mut img = image::RgbImage::new(cols as u32, rows as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let j = y as usize * cols + x as usize;
        for ch in 0..3 {
            px.0[ch] = (planes[ch][j].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img.save(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Color-maps a height plane (blue low, yellow high; black where
/// unobserved) and writes it as PNG.
pub fn write_height_preview(
    path: &Path,
    rows: usize,
    cols: usize,
    heights: &[f32],
    valid: &[bool],
) -> Result<(), CliError> {
    let finite: Vec<f32> = heights
        .iter()
        .zip(valid.iter())
        .filter(|(_, &v)| v)
        .map(|(&h, _)| h)
        .collect();
    let (lo, hi) = finite.iter().fold((f32::MAX, f32::MIN), |(lo, hi), &h| {
        (lo.min(h), hi.max(h))
    });
    let span = (hi - lo).max(1e-9);
    let mut img = image::RgbImage::new(cols as u32, rows as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let j = y as usize * cols + x as usize;
        if !valid[j] {
            px.0 = [0, 0, 0];
            continue;
        }
        let t = ((heights[j] - lo) / span).clamp(0.0, 1.0);
        // Blue -> cyan -> green -> yellow ramp.
        let r = (t * 2.0 - 1.0).clamp(0.0, 1.0);
        let g = (t * 1.6).clamp(0.0, 1.0);
        let b = (1.0 - t * 1.8).clamp(0.0, 1.0);
        px.0 = [
            (r * 255.0) as u8,
            (g * 255.0) as u8,
            (b * 255.0) as u8,
        ];
    }
    img.save(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Renders a simple line plot of the radial profile to PNG.
pub fn write_profile_plot(path: &Path, profile: &[(f64, f64)]) -> Result<(), CliError> {
    let (w, h) = (640usize, 440usize);
    let margin = 50usize;
    let mut img = image::RgbImage::from_pixel(w as u32, h as u32, image::Rgb([255, 255, 255]));
    let (rmax, mlo, mhi) = profile.iter().fold(
        (0.0f64, f64::MAX, f64::MIN),
        |(rm, lo, hi), &(r, m)| (rm.max(r), lo.min(m), hi.max(m)),
    );
    let m_span = (mhi - mlo).max(1e-6);
    let to_px = |r: f64, m: f64| -> (i32, i32) {
        let x = margin as f64 + r / rmax.max(1e-9) * (w - 2 * margin) as f64;
        let y = (h - margin) as f64 - (m - mlo) / m_span * (h - 2 * margin) as f64;
        (x as i32, y as i32)
    };
    let mut put = |x: i32, y: i32, c: [u8; 3]| {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, image::Rgb(c));
        }
    };
    // Axes.
    for x in margin..w - margin {
        put(x as i32, (h - margin) as i32, [0, 0, 0]);
    }
    for y in margin..h - margin {
        put(margin as i32, y as i32, [0, 0, 0]);
    }
    // Polyline with node markers.
    for pair in profile.windows(2) {
        let (x0, y0) = to_px(pair[0].0, pair[0].1);
        let (x1, y1) = to_px(pair[1].0, pair[1].1);
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            put(
                (x0 as f64 + t * (x1 - x0) as f64) as i32,
                (y0 as f64 + t * (y1 - y0) as f64) as i32,
                [30, 60, 200],
            );
        }
    }
    for &(r, m) in profile {
        let (x, y) = to_px(r, m);
        for dy in -2..=2i32 {
            for dx in -2..=2i32 {
                if dx * dx + dy * dy <= 4 {
                    put(x + dx, y + dy, [200, 40, 40]);
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Reads a whole file with a data-class error on failure.
pub fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}
