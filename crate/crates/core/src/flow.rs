//! Dense optical flow by coarse-to-fine block matching with half-pixel
//! parabola refinement, plus the color-wheel encoding and the raw FLO1
//! export format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense per-pixel displacements in pixels/frame: b(x + u, y + v) ~ a(x, y).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField { width, height, u: vec![0.0; width * height], v: vec![0.0; width * height] }
    }

    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    /// Mean endpoint error against a constant ground-truth displacement.
    pub fn mean_endpoint_error(&self, du: f64, dv: f64) -> f64 {
        let n = self.u.len() as f64;
        self.u
            .iter()
            .zip(&self.v)
            .map(|(&u, &v)| ((u - du).powi(2) + (v - dv).powi(2)).sqrt())
            .sum::<f64>()
            / n
    }

    pub fn max_abs(&self) -> f64 {
        self.u
            .iter()
            .chain(&self.v)
            .fold(0.0, |m, &x| m.max(x.abs()))
    }

    /// (H, W, 2) tensor view with u in channel 0 and v in channel 1.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.u.len() * 2);
        for i in 0..self.u.len() {
            data.push(self.u[i]);
            data.push(self.v[i]);
        }
        Tensor::new(vec![self.height, self.width, 2], data).expect("flow shape")
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FlowParams {
    /// Pyramid levels; 1 disables coarse-to-fine.
    pub levels: usize,
    /// Odd matching block edge length.
    pub block: usize,
    /// Integer search radius per level.
    pub search_radius: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams { levels: 3, block: 7, search_radius: 2 }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.block % 2 == 0 || self.block == 0 || self.search_radius == 0 {
            return Err(Error::InvalidArg(format!(
                "flow params levels={} block={} radius={} (levels>0, block odd, radius>0)",
                self.levels, self.block, self.search_radius
            )));
        }
        Ok(())
    }

    /// Largest displacement the estimator can report.
    pub fn max_displacement(&self) -> f64 {
        (((1usize << self.levels) - 1) * self.search_radius) as f64 + 0.5 * self.levels as f64
    }
}

/// Half-resolution image by 2x2 averaging (odd edges clamp).
fn downsample(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (h2, w2) = ((h + 1) / 2, (w + 1) / 2);
    let mut out = vec![0.0; h2 * w2];
    for y in 0..h2 {
        for x in 0..w2 {
            let mut sum = 0.0;
            let mut count = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    let (sy, sx) = (y * 2 + dy, x * 2 + dx);
                    if sy < h && sx < w {
                        sum += img[sy * w + sx];
                        count += 1.0;
                    }
                }
            }
            out[y * w2 + x] = sum / count;
        }
    }
    (out, h2, w2)
}

/// Mean squared difference between the block around (x, y) in `a` and the
/// block around (x + dx, y + dy) in `b`, over positions valid in both.
#[allow(clippy::too_many_arguments)]
fn block_cost(
    a: &[f64],
    b: &[f64],
    h: usize,
    w: usize,
    x: isize,
    y: isize,
    dx: isize,
    dy: isize,
    half_block: isize,
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for by in -half_block..=half_block {
        let ay = y + by;
        let byy = y + dy + by;
        if ay < 0 || ay >= h as isize || byy < 0 || byy >= h as isize {
            continue;
        }
        for bx in -half_block..=half_block {
            let ax = x + bx;
            let bxx = x + dx + bx;
            if ax < 0 || ax >= w as isize || bxx < 0 || bxx >= w as isize {
                continue;
            }
            let d = a[(ay as usize) * w + ax as usize] - b[(byy as usize) * w + bxx as usize];
            sum += d * d;
            count += 1;
        }
    }
    let min_count = ((half_block * 2 + 1) * (half_block * 2 + 1)) as usize / 4;
    if count >= min_count.max(1) {
        sum / count as f64
    } else {
        f64::INFINITY
    }
}

/// Parabola vertex offset from three samples at -1, 0, +1. Zero when the
/// center is an exact match or the fit is degenerate.
fn parabola_offset(c_minus: f64, c0: f64, c_plus: f64) -> f64 {
    if c0 == 0.0 || !c_minus.is_finite() || !c_plus.is_finite() {
        return 0.0;
    }
    let denom = c_minus - 2.0 * c0 + c_plus;
    if denom <= 1e-12 {
        return 0.0;
    }
    (0.5 * (c_minus - c_plus) / denom).clamp(-0.5, 0.5)
}

fn search_level(
    a: &[f64],
    b: &[f64],
    h: usize,
    w: usize,
    init_u: &[f64],
    init_v: &[f64],
    params: &FlowParams,
) -> (Vec<f64>, Vec<f64>) {
    let r = params.search_radius as isize;
    let hb = (params.block / 2) as isize;
    let mut out_u = vec![0.0; h * w];
    let mut out_v = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (iu, iv) = (init_u[i].round() as isize, init_v[i].round() as isize);
            let mut best = f64::INFINITY;
            let (mut bdx, mut bdy) = (iu, iv);
            for dy in -r..=r {
                for dx in -r..=r {
                    let cost = block_cost(a, b, h, w, x as isize, y as isize, iu + dx, iv + dy, hb);
                    if cost < best {
                        best = cost;
                        bdx = iu + dx;
                        bdy = iv + dy;
                    }
                }
            }
            if !best.is_finite() {
                out_u[i] = init_u[i];
                out_v[i] = init_v[i];
                continue;
            }
            let cost_at = |ddx: isize, ddy: isize| {
                block_cost(a, b, h, w, x as isize, y as isize, bdx + ddx, bdy + ddy, hb)
            };
            let sub_x = parabola_offset(cost_at(-1, 0), best, cost_at(1, 0));
            let sub_y = parabola_offset(cost_at(0, -1), best, cost_at(0, 1));
            out_u[i] = bdx as f64 + sub_x;
            out_v[i] = bdy as f64 + sub_y;
        }
    }
    (out_u, out_v)
}

/// Dense flow from `frame_a` to `frame_b` (both grayscale, equal sizes, in
/// [0, 1]) by block matching, coarse-to-fine over `params.levels` levels.
pub fn compute_flow(frame_a: &Tensor, frame_b: &Tensor, params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    if frame_a.shape() != frame_b.shape() {
        return Err(Error::Shape {
            op: "compute_flow",
            detail: format!("{:?} vs {:?}", frame_a.shape(), frame_b.shape()),
        });
    }
    if frame_a.rank() != 2 {
        return Err(Error::Shape {
            op: "compute_flow",
            detail: format!("grayscale (H, W) expected, got {:?}", frame_a.shape()),
        });
    }
    let (h0, w0) = (frame_a.shape()[0], frame_a.shape()[1]);

    // Build pyramids, stopping before frames get smaller than the block.
    let mut pyr_a = vec![(frame_a.data().to_vec(), h0, w0)];
    let mut pyr_b = vec![(frame_b.data().to_vec(), h0, w0)];
    for _ in 1..params.levels {
        let (pa, ha, wa) = pyr_a.last().unwrap();
        if ha / 2 < params.block || wa / 2 < params.block {
            break;
        }
        let next_a = downsample(pa, *ha, *wa);
        let (pb, hb, wb) = pyr_b.last().unwrap();
        let next_b = downsample(pb, *hb, *wb);
        pyr_a.push(next_a);
        pyr_b.push(next_b);
    }

    // Coarse-to-fine.
    let coarsest = pyr_a.len() - 1;
    let (mut u, mut v): (Vec<f64>, Vec<f64>) = {
        let (_, h, w) = pyr_a[coarsest];
        (vec![0.0; h * w], vec![0.0; h * w])
    };
    for level in (0..pyr_a.len()).rev() {
        let (pa, h, w) = &pyr_a[level];
        let (pb, _, _) = &pyr_b[level];
        if level != coarsest {
            // Upsample the previous estimate: doubled values, nearest cell.
            let (_, ph, pw) = pyr_a[level + 1];
            let mut nu = vec![0.0; h * w];
            let mut nv = vec![0.0; h * w];
            for y in 0..*h {
                for x in 0..*w {
                    let sy = (y / 2).min(ph - 1);
                    let sx = (x / 2).min(pw - 1);
                    nu[y * w + x] = 2.0 * u[sy * pw + sx];
                    nv[y * w + x] = 2.0 * v[sy * pw + sx];
                }
            }
            u = nu;
            v = nv;
        }
        let (su, sv) = search_level(pa, pb, *h, *w, &u, &v, params);
        u = su;
        v = sv;
    }
    Ok(FlowField { width: w0, height: h0, u, v })
}

// ── color encoding ───────────────────────────────────────────────────

/// Encode flow as an RGB image: direction maps to hue on a fixed 6-segment
/// wheel, magnitude to saturation with per-image max normalization, value
/// fixed at 1. Zero flow is white.
pub fn flow_to_color(flow: &FlowField) -> Tensor {
    let n = flow.u.len();
    let max_mag = flow
        .u
        .iter()
        .zip(&flow.v)
        .map(|(&u, &v)| (u * u + v * v).sqrt())
        .fold(0.0, f64::max);
    let mut data = Vec::with_capacity(n * 3);
    for i in 0..n {
        let (u, v) = (flow.u[i], flow.v[i]);
        let mag = (u * u + v * v).sqrt();
        let sat = if max_mag > 0.0 { mag / max_mag } else { 0.0 };
        let angle = v.atan2(u); // [-pi, pi]
        let hue6 = ((angle / std::f64::consts::TAU) + 1.0).fract() * 6.0;
        let (r, g, b) = hsv_to_rgb(hue6, sat, 1.0);
        data.push(r);
        data.push(g);
        data.push(b);
    }
    Tensor::new(vec![flow.height, flow.width, 3], data).expect("flow color shape")
}

/// hue in [0, 6), s and v in [0, 1].
pub fn hsv_to_rgb(hue6: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let x = c * (1.0 - ((hue6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match hue6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

// ── FLO1 raw export ──────────────────────────────────────────────────

pub const FLO_MAGIC: &[u8; 4] = b"FLO1";

/// 16-byte header (magic, u32 H, u32 W, reserved u32), then interleaved
/// little-endian f32 (u, v) pairs in row-major order.
pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + flow.u.len() * 8);
    buf.extend_from_slice(FLO_MAGIC);
    buf.extend_from_slice(&(flow.height as u32).to_le_bytes());
    buf.extend_from_slice(&(flow.width as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for i in 0..flow.u.len() {
        buf.extend_from_slice(&(flow.u[i] as f32).to_le_bytes());
        buf.extend_from_slice(&(flow.v[i] as f32).to_le_bytes());
    }
    crate::image_io::write_bytes(path, &buf)
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let err = |detail: &str| Error::Parse {
        what: format!("flow {}", path.display()),
        detail: detail.to_string(),
    };
    if bytes.len() < 16 || &bytes[..4] != FLO_MAGIC {
        return Err(err("missing FLO1 header"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let need = 16 + h * w * 8;
    if bytes.len() < need {
        return Err(err("truncated flow data"));
    }
    let mut u = Vec::with_capacity(h * w);
    let mut v = Vec::with_capacity(h * w);
    for chunk in bytes[16..need].chunks_exact(8) {
        u.push(f32::from_le_bytes(chunk[..4].try_into().unwrap()) as f64);
        v.push(f32::from_le_bytes(chunk[4..].try_into().unwrap()) as f64);
    }
    Ok(FlowField { width: w, height: h, u, v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Deterministic textured test image.
    pub(crate) fn textured(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Tensor::uniform(&[h + 16, w + 16], 0.0, 1.0, &mut rng);
        // Box-blur once so block matching has smooth structure.
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        s += base.at(&[y + dy, x + dx]);
                    }
                }
                out[y * w + x] = s / 9.0;
            }
        }
        Tensor::new(vec![h, w], out).unwrap()
    }

    pub(crate) fn shifted(img: &Tensor, dx: isize, dy: isize) -> Tensor {
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (sy, sx) = (y - dy, x - dx);
                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    out[(y as usize) * w + x as usize] = img.at(&[sy as usize, sx as usize]);
                } else {
                    // Wrap so borders stay textured.
                    let sy = sy.rem_euclid(h as isize) as usize;
                    let sx = sx.rem_euclid(w as isize) as usize;
                    out[(y as usize) * w + x as usize] = img.at(&[sy, sx]);
                }
            }
        }
        Tensor::new(vec![h, w], out).unwrap()
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let a = textured(32, 32, 1);
        let flow = compute_flow(&a, &a, &FlowParams::default()).unwrap();
        assert!(flow.max_abs() <= 0.1, "max |flow| = {}", flow.max_abs());
    }

    #[test]
    fn one_pixel_shift_recovered() {
        let a = textured(48, 48, 2);
        let b = shifted(&a, 1, 0);
        let flow = compute_flow(&a, &b, &FlowParams::default()).unwrap();
        // Mean over the interior.
        let mut su = 0.0;
        let mut sv = 0.0;
        let mut n = 0.0;
        for y in 8..40 {
            for x in 8..40 {
                let (u, v) = flow.at(y, x);
                su += u;
                sv += v;
                n += 1.0;
            }
        }
        assert!((su / n - 1.0).abs() <= 0.25, "mean u = {}", su / n);
        assert!((sv / n).abs() <= 0.25, "mean v = {}", sv / n);
    }

    #[test]
    fn rejects_size_mismatch() {
        let a = Tensor::zeros(&[8, 8]);
        let b = Tensor::zeros(&[8, 9]);
        assert!(compute_flow(&a, &b, &FlowParams::default()).is_err());
    }

    #[test]
    fn zero_flow_colors_white() {
        let flow = FlowField::zeros(4, 4);
        let img = flow_to_color(&flow);
        assert!(img.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn constant_flow_single_hue() {
        let mut flow = FlowField::zeros(4, 4);
        flow.u.iter_mut().for_each(|u| *u = 1.0);
        let img = flow_to_color(&flow);
        let first = &img.data()[..3];
        for px in img.data().chunks_exact(3) {
            assert_eq!(px, first);
        }
        // Saturated somewhere: not white.
        assert!(first.iter().any(|&v| v < 0.99));
    }

    #[test]
    fn negated_flow_hue_is_opposite() {
        // rgb -> hue (degrees) for test purposes.
        fn hue_of(px: &[f64]) -> f64 {
            let (r, g, b) = (px[0], px[1], px[2]);
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            let d = max - min;
            assert!(d > 1e-9);
            let h = if (max - r).abs() < 1e-12 {
                ((g - b) / d).rem_euclid(6.0)
            } else if (max - g).abs() < 1e-12 {
                (b - r) / d + 2.0
            } else {
                (r - g) / d + 4.0
            };
            h * 60.0
        }
        for (u, v) in [(1.0, 0.0), (0.3, 0.7), (-0.5, 0.2), (0.1, -0.9)] {
            let mut f = FlowField::zeros(1, 2);
            f.u[0] = u;
            f.v[0] = v;
            f.u[1] = -u;
            f.v[1] = -v;
            let img = flow_to_color(&f);
            let h0 = hue_of(&img.data()[..3]);
            let h1 = hue_of(&img.data()[3..6]);
            let diff = (h0 - h1).rem_euclid(360.0);
            assert!(
                (diff - 180.0).abs() < 1.5,
                "hue difference {diff} for ({u},{v})"
            );
        }
    }

    #[test]
    fn flo_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        let mut flow = FlowField::zeros(3, 2);
        flow.u = vec![0.5, -1.25, 2.0, 0.0, 3.5, -0.75];
        flow.v = vec![1.0, 0.25, -2.5, 4.0, 0.0, 1.5];
        write_flo(&flow, &path).unwrap();
        let back = read_flo(&path).unwrap();
        assert_eq!(back.width, 2);
        assert_eq!(back.height, 3);
        for (a, b) in flow.u.iter().zip(&back.u) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
