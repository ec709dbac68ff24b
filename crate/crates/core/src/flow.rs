//! Dense and sparse optical flow, the flow-gradient voting map, and the
//! forward-backward consistency check.
//!
//! Both estimators are coarse-to-fine Lucas-Kanade on a Gaussian pyramid.
//! The dense variant solves one LK problem per pixel with a small window;
//! the sparse variant tracks an explicit point list with a larger window
//! and checks every track by running it backwards.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{GrayFrame, PixelRect, Vec2};

/// Minimum per-pixel structure-tensor eigenvalue, in (gray level / px)^2.
const MIN_EIGEN: f32 = 1e-2;
const CONVERGED_STEP: f32 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    pub levels: usize,
    pub window: usize,
    pub iterations: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            levels: 3,
            window: 5,
            iterations: 10,
        }
    }
}

/// Per-pixel displacement from one frame to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> Vec2 {
        let i = y * self.width + x;
        Vec2::new(self.u[i] as f64, self.v[i] as f64)
    }

    pub fn max_magnitude(&self) -> f64 {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(&u, &v)| (u as f64).hypot(v as f64))
            .fold(0.0, f64::max)
    }
}

/// Binary map of pixels where the flow gradient exceeds a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct VotingMap {
    pub width: usize,
    pub height: usize,
    pub votes: Vec<u8>,
    integral: Vec<u32>,
}

impl VotingMap {
    pub fn from_votes(width: usize, height: usize, votes: Vec<u8>) -> Self {
        let mut integral = vec![0u32; (width + 1) * (height + 1)];
        for y in 0..height {
            let mut row = 0u32;
            for x in 0..width {
                row += votes[y * width + x] as u32;
                integral[(y + 1) * (width + 1) + x + 1] = integral[y * (width + 1) + x + 1] + row;
            }
        }
        Self {
            width,
            height,
            votes,
            integral,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.votes[y * self.width + x] != 0
    }

    pub fn total(&self) -> u32 {
        self.integral[self.integral.len() - 1]
    }

    /// Number of votes inside the rectangle, clipped to the map.
    pub fn count_in(&self, r: &PixelRect) -> u32 {
        let x0 = r.x0.clamp(0, self.width as i64) as usize;
        let y0 = r.y0.clamp(0, self.height as i64) as usize;
        let x1 = r.x1().clamp(0, self.width as i64) as usize;
        let y1 = r.y1().clamp(0, self.height as i64) as usize;
        if x1 <= x0 || y1 <= y0 {
            return 0;
        }
        let w = self.width + 1;
        self.integral[y1 * w + x1] + self.integral[y0 * w + x0]
            - self.integral[y0 * w + x1]
            - self.integral[y1 * w + x0]
    }
}

/// A sparse-flow point track with its round-trip check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub origin: Vec2,
    pub tracked: Vec2,
    pub fb_error: f64,
    pub valid: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Plane {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f32>,
}

impl Plane {
    fn from_frame(f: &GrayFrame) -> Self {
        Self {
            w: f.width(),
            h: f.height(),
            data: f.data().iter().map(|&v| v as f32).collect(),
        }
    }

    #[inline]
    fn px(&self, x: i64, y: i64) -> f32 {
        let x = x.clamp(0, self.w as i64 - 1) as usize;
        let y = y.clamp(0, self.h as i64 - 1) as usize;
        self.data[y * self.w + x]
    }

    /// Bilinear sample with border clamping.
    #[inline]
    fn sample(&self, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.w - 1) as f32);
        let y = y.clamp(0.0, (self.h - 1) as f32);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let r0 = self.data[y0 * self.w + x0] * (1.0 - fx) + self.data[y0 * self.w + x1] * fx;
        let r1 = self.data[y1 * self.w + x0] * (1.0 - fx) + self.data[y1 * self.w + x1] * fx;
        r0 * (1.0 - fy) + r1 * fy
    }

    /// 5-tap binomial blur followed by 2x decimation.
    fn pyr_down(&self) -> Plane {
        const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let mut tmp = vec![0.0f32; self.w * self.h];
        for y in 0..self.h {
            for x in 0..self.w {
                let mut s = 0.0;
                for (k, &kv) in K.iter().enumerate() {
                    s += kv * self.px(x as i64 + k as i64 - 2, y as i64);
                }
                tmp[y * self.w + x] = s;
            }
        }
        let blurred = Plane {
            w: self.w,
            h: self.h,
            data: tmp,
        };
        let (nw, nh) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let mut data = vec![0.0f32; nw * nh];
        for y in 0..nh {
            for x in 0..nw {
                let mut s = 0.0;
                for (k, &kv) in K.iter().enumerate() {
                    s += kv * blurred.px(2 * x as i64, 2 * y as i64 + k as i64 - 2);
                }
                data[y * nw + x] = s;
            }
        }
        Plane { w: nw, h: nh, data }
    }

    /// Central-difference gradients.
    fn gradients(&self) -> (Plane, Plane) {
        let mut gx = vec![0.0f32; self.w * self.h];
        let mut gy = vec![0.0f32; self.w * self.h];
        for y in 0..self.h as i64 {
            for x in 0..self.w as i64 {
                let i = y as usize * self.w + x as usize;
                gx[i] = 0.5 * (self.px(x + 1, y) - self.px(x - 1, y));
                gy[i] = 0.5 * (self.px(x, y + 1) - self.px(x, y - 1));
            }
        }
        (
            Plane {
                w: self.w,
                h: self.h,
                data: gx,
            },
            Plane {
                w: self.w,
                h: self.h,
                data: gy,
            },
        )
    }
}

/// Gaussian pyramid with per-level gradients.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub(crate) levels: Vec<Plane>,
    pub(crate) gx: Vec<Plane>,
    pub(crate) gy: Vec<Plane>,
}

impl Pyramid {
    pub fn build(frame: &GrayFrame, levels: usize) -> Self {
        let mut planes = vec![Plane::from_frame(frame)];
        for _ in 1..levels.max(1) {
            let next = planes.last().unwrap().pyr_down();
            if next.w < 4 || next.h < 4 {
                break;
            }
            planes.push(next);
        }
        let (gx, gy) = planes.iter().map(Plane::gradients).unzip();
        Self {
            levels: planes,
            gx,
            gy,
        }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn width(&self) -> usize {
        self.levels[0].w
    }

    pub fn height(&self) -> usize {
        self.levels[0].h
    }
}

struct LkLevel<'a> {
    prev: &'a Plane,
    gx: &'a Plane,
    gy: &'a Plane,
    cur: &'a Plane,
}

/// Window buffers reused across refinements.
#[derive(Default)]
struct Scratch {
    ix: Vec<f32>,
    iy: Vec<f32>,
    iv: Vec<f32>,
}

impl LkLevel<'_> {
    /// Iterative LK refinement of `guess` for the window centered at `p`.
    /// Returns `None` when the structure tensor is degenerate.
    fn refine(
        &self,
        p: (f32, f32),
        guess: (f32, f32),
        half: i64,
        iterations: usize,
        s: &mut Scratch,
    ) -> Option<(f32, f32)> {
        let integral = p.0.fract() == 0.0 && p.1.fract() == 0.0;
        let side = 2 * half + 1;
        let n = (side * side) as usize;
        s.ix.clear();
        s.iy.clear();
        s.iv.clear();
        let (mut gxx, mut gxy, mut gyy) = (0.0f32, 0.0f32, 0.0f32);
        for dy in -half..=half {
            for dx in -half..=half {
                let (a, b, c) = if integral {
                    let (x, y) = (p.0 as i64 + dx, p.1 as i64 + dy);
                    (self.gx.px(x, y), self.gy.px(x, y), self.prev.px(x, y))
                } else {
                    let (x, y) = (p.0 + dx as f32, p.1 + dy as f32);
                    (self.gx.sample(x, y), self.gy.sample(x, y), self.prev.sample(x, y))
                };
                gxx += a * a;
                gxy += a * b;
                gyy += b * b;
                s.ix.push(a);
                s.iy.push(b);
                s.iv.push(c);
            }
        }
        let tr = gxx + gyy;
        let det = gxx * gyy - gxy * gxy;
        let min_eig = 0.5 * (tr - ((gxx - gyy).powi(2) + 4.0 * gxy * gxy).sqrt());
        if min_eig / n as f32 <= MIN_EIGEN || det <= 0.0 {
            return None;
        }
        let cur = self.cur;
        let mut d = guess;
        for _ in 0..iterations {
            let (mut bx, mut by) = (0.0f32, 0.0f32);
            let (qx, qy) = (p.0 + d.0, p.1 + d.1);
            let (fx0, fy0) = (qx.floor(), qy.floor());
            let inside = fx0 - half as f32 >= 0.0
                && fy0 - half as f32 >= 0.0
                && fx0 + (half + 1) as f32 <= (cur.w - 1) as f32
                && fy0 + (half + 1) as f32 <= (cur.h - 1) as f32;
            if inside {
                // every window pixel shares the same bilinear weights
                let (fx, fy) = (qx - fx0, qy - fy0);
                let x0 = fx0 as usize - half as usize;
                let y0 = fy0 as usize - half as usize;
                let side = side as usize;
                for r in 0..side {
                    let row0 = &cur.data[(y0 + r) * cur.w + x0..][..side + 1];
                    let row1 = &cur.data[(y0 + r + 1) * cur.w + x0..][..side + 1];
                    let k0 = r * side;
                    for c in 0..side {
                        let a = row0[c] * (1.0 - fx) + row0[c + 1] * fx;
                        let b = row1[c] * (1.0 - fx) + row1[c + 1] * fx;
                        let it = s.iv[k0 + c] - (a * (1.0 - fy) + b * fy);
                        bx += it * s.ix[k0 + c];
                        by += it * s.iy[k0 + c];
                    }
                }
            } else {
                let mut k = 0;
                for dy in -half..=half {
                    for dx in -half..=half {
                        let j = cur.sample(p.0 + dx as f32 + d.0, p.1 + dy as f32 + d.1);
                        let it = s.iv[k] - j;
                        bx += it * s.ix[k];
                        by += it * s.iy[k];
                        k += 1;
                    }
                }
            }
            let sx = (gyy * bx - gxy * by) / det;
            let sy = (gxx * by - gxy * bx) / det;
            d.0 += sx;
            d.1 += sy;
            if sx * sx + sy * sy < CONVERGED_STEP * CONVERGED_STEP {
                break;
            }
        }
        if d.0.is_finite() && d.1.is_finite() {
            Some(d)
        } else {
            None
        }
    }
}

/// Dense pyramidal Lucas-Kanade flow computed at every pixel.
pub fn dense_flow(prev: &GrayFrame, cur: &GrayFrame, params: &FlowParams) -> Result<FlowField> {
    if !prev.same_size(cur) {
        return Err(Error::DimensionMismatch(format!(
            "frames {}x{} and {}x{}",
            prev.width(),
            prev.height(),
            cur.width(),
            cur.height()
        )));
    }
    let pp = Pyramid::build(prev, params.levels);
    let cp = Pyramid::build(cur, params.levels);
    Ok(dense_flow_pyramids(&pp, &cp, params))
}

pub fn dense_flow_pyramids(pp: &Pyramid, cp: &Pyramid, params: &FlowParams) -> FlowField {
    let half = (params.window / 2).max(1) as i64;
    let depth = pp.depth().min(cp.depth());
    let mut coarse: Option<FlowField> = None;
    for l in (0..depth).rev() {
        let level = LkLevel {
            prev: &pp.levels[l],
            gx: &pp.gx[l],
            gy: &pp.gy[l],
            cur: &cp.levels[l],
        };
        let (w, h) = (level.prev.w, level.prev.h);
        let guess_plane = coarse.as_ref().map(|c| {
            (
                Plane {
                    w: c.width,
                    h: c.height,
                    data: c.u.clone(),
                },
                Plane {
                    w: c.width,
                    h: c.height,
                    data: c.v.clone(),
                },
            )
        });
        let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut ru = vec![0.0f32; w];
                let mut rv = vec![0.0f32; w];
                let mut scratch = Scratch::default();
                for x in 0..w {
                    let guess = match &guess_plane {
                        Some((gu, gv)) => {
                            let (sx, sy) = (x as f32 * 0.5, y as f32 * 0.5);
                            (2.0 * gu.sample(sx, sy), 2.0 * gv.sample(sx, sy))
                        }
                        None => (0.0, 0.0),
                    };
                    let d = level
                        .refine((x as f32, y as f32), guess, half, params.iterations, &mut scratch)
                        .unwrap_or(guess);
                    ru[x] = d.0;
                    rv[x] = d.1;
                }
                (ru, rv)
            })
            .collect();
        let mut field = FlowField::zeros(w, h);
        for (y, (ru, rv)) in rows.into_iter().enumerate() {
            field.u[y * w..(y + 1) * w].copy_from_slice(&ru);
            field.v[y * w..(y + 1) * w].copy_from_slice(&rv);
        }
        coarse = Some(field);
    }
    coarse.expect("pyramid has at least one level")
}

/// Flow-gradient magnitude from normalized 3x3 Sobel responses of both
/// flow channels. Border pixels are 0.
pub fn flow_gradient_magnitude(flow: &FlowField) -> Vec<f32> {
    let (w, h) = (flow.width, flow.height);
    let mut mag = vec![0.0f32; w * h];
    if w < 3 || h < 3 {
        return mag;
    }
    let sobel = |ch: &[f32], x: usize, y: usize| -> (f32, f32) {
        let p = |dx: isize, dy: isize| ch[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
        let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
        let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
        (gx / 8.0, gy / 8.0)
    };
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let (ux, uy) = sobel(&flow.u, x, y);
            let (vx, vy) = sobel(&flow.v, x, y);
            mag[y * w + x] = (ux * ux + uy * uy + vx * vx + vy * vy).sqrt();
        }
    }
    mag
}

pub fn flow_gradient_voting_map(flow: &FlowField, grad_threshold: f64) -> VotingMap {
    let mag = flow_gradient_magnitude(flow);
    let votes = mag
        .iter()
        .map(|&m| u8::from(m as f64 > grad_threshold))
        .collect();
    VotingMap::from_votes(flow.width, flow.height, votes)
}

fn track_point(
    from: &Pyramid,
    to: &Pyramid,
    p: Vec2,
    half: i64,
    iterations: usize,
) -> Option<Vec2> {
    let depth = from.depth().min(to.depth());
    let mut g = (0.0f32, 0.0f32);
    let mut finest_ok = false;
    let mut scratch = Scratch::default();
    for l in (0..depth).rev() {
        let scale = (1u32 << l) as f32;
        let level = LkLevel {
            prev: &from.levels[l],
            gx: &from.gx[l],
            gy: &from.gy[l],
            cur: &to.levels[l],
        };
        let pl = (p.x as f32 / scale, p.y as f32 / scale);
        match level.refine(pl, g, half, iterations, &mut scratch) {
            Some(d) => {
                g = d;
                finest_ok = l == 0;
            }
            None => finest_ok = false,
        }
        if l > 0 {
            g = (2.0 * g.0, 2.0 * g.1);
        }
    }
    if !finest_ok {
        return None;
    }
    let q = Vec2::new(p.x + g.0 as f64, p.y + g.1 as f64);
    let inside = q.x >= 0.0
        && q.y >= 0.0
        && q.x <= (from.width() - 1) as f64
        && q.y <= (from.height() - 1) as f64;
    inside.then_some(q)
}

/// Track `points` forward and back; a point is valid when both directions
/// converge and the round trip lands within `fb_threshold` pixels.
pub fn sparse_flow_fb_pyramids(
    prev: &Pyramid,
    cur: &Pyramid,
    points: &[Vec2],
    window: usize,
    iterations: usize,
    fb_threshold: f64,
) -> Vec<Correspondence> {
    let half = (window / 2).max(1) as i64;
    points
        .iter()
        .map(|&p| {
            let fwd = track_point(prev, cur, p, half, iterations);
            let back = fwd.and_then(|q| track_point(cur, prev, q, half, iterations));
            match (fwd, back) {
                (Some(q), Some(r)) => {
                    let fb = (r - p).norm();
                    Correspondence {
                        origin: p,
                        tracked: q,
                        fb_error: fb,
                        valid: fb <= fb_threshold,
                    }
                }
                (q, _) => Correspondence {
                    origin: p,
                    tracked: q.unwrap_or(p),
                    fb_error: f64::INFINITY,
                    valid: false,
                },
            }
        })
        .collect()
}

pub fn sparse_flow_fb(
    prev: &GrayFrame,
    cur: &GrayFrame,
    points: &[Vec2],
    window: usize,
    fb_threshold: f64,
) -> Result<Vec<Correspondence>> {
    if !prev.same_size(cur) {
        return Err(Error::DimensionMismatch("sparse flow frames differ in size".into()));
    }
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidConfig(format!("sparse window {window} must be odd and >= 3")));
    }
    let pp = Pyramid::build(prev, 3);
    let cp = Pyramid::build(cur, 3);
    Ok(sparse_flow_fb_pyramids(&pp, &cp, points, window, 20, fb_threshold))
}

/// Everything computed once per frame pair and shared read-only by all
/// per-track work.
#[derive(Debug, Clone)]
pub struct FlowArtifacts {
    pub prev: Pyramid,
    pub cur: Pyramid,
    pub flow: FlowField,
    pub votes: VotingMap,
}

impl FlowArtifacts {
    pub fn compute(
        prev: &GrayFrame,
        cur: &GrayFrame,
        params: &FlowParams,
        grad_threshold: f64,
    ) -> Result<Self> {
        if !prev.same_size(cur) {
            return Err(Error::DimensionMismatch("flow frames differ in size".into()));
        }
        let pp = Pyramid::build(prev, params.levels);
        let cp = Pyramid::build(cur, params.levels);
        let flow = dense_flow_pyramids(&pp, &cp, params);
        let votes = flow_gradient_voting_map(&flow, grad_threshold);
        Ok(Self {
            prev: pp,
            cur: cp,
            flow,
            votes,
        })
    }

    /// Pyramids only, for runs that skip dense flow.
    pub fn pyramids_only(prev: &GrayFrame, cur: &GrayFrame, levels: usize) -> Self {
        let (w, h) = (prev.width(), prev.height());
        Self {
            prev: Pyramid::build(prev, levels),
            cur: Pyramid::build(cur, levels),
            flow: FlowField::zeros(w, h),
            votes: VotingMap::from_votes(w, h, vec![0; w * h]),
        }
    }
}

/// Serialize a flow field: `u32` width, `u32` height, then interleaved
/// `(u, v)` `f32` pairs, all little-endian.
pub fn encode_flo2(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + flow.u.len() * 8);
    out.extend_from_slice(&(flow.width as u32).to_le_bytes());
    out.extend_from_slice(&(flow.height as u32).to_le_bytes());
    for (u, v) in flow.u.iter().zip(&flow.v) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo2(bytes: &[u8]) -> Result<FlowField> {
    let bad = || Error::DimensionMismatch("truncated flo2 data".into());
    if bytes.len() < 8 {
        return Err(bad());
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + w * h * 8 {
        return Err(bad());
    }
    let mut flow = FlowField::zeros(w, h);
    for i in 0..w * h {
        let o = 8 + i * 8;
        flow.u[i] = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        flow.v[i] = f32::from_le_bytes(bytes[o + 4..o + 8].try_into().unwrap());
    }
    Ok(flow)
}
