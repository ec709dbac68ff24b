//! Deterministic synthetic scenes: textured background, scripted vehicles,
//! ground truth and corrupted detections.
//!
//! Scenario files are flat `key = value` lines. `vehicle`, `dropout` and
//! `occluder` may repeat. A vehicle line is a start point with options
//! followed by `|`-separated commands:
//!
//! ```text
//! vehicle = 30,48 heading 0 start 0 contrast 30 texture 1 | move 8,0 x10 | wait 10 | move 8,0 x10
//! ```
//!
//! Commands: `move DX,DY xN [hold]`, `wait N`, `to X,Y @ SPEED`,
//! `turn DEG over N speed S`. Headings are degrees in image coordinates
//! (`+x` is 0, `+y` is 90).

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::types::{BBox, Detection, GrayFrame, Observation, Source, Track, TrackPool, Vec2};

const STREAM_NOISE: u64 = 0;
const STREAM_DETECTIONS: u64 = 1;
const STREAM_BACKGROUND: u64 = 2;
const STREAM_TEXTURE: u64 = 3;
const STREAM_CONTRAST: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Move { d: Vec2, n: u32, hold: bool },
    Wait(u32),
    To { target: Vec2, speed: f64 },
    Turn { degrees: f64, n: u32, speed: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleScript {
    pub start: Vec2,
    pub heading_deg: f64,
    pub start_frame: u32,
    pub contrast: Option<f64>,
    pub texture: Option<u64>,
    pub commands: Vec<Command>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
    pub value: f64,
}

impl Occluder {
    fn contains(&self, p: Vec2) -> bool {
        p.x >= self.x0 && p.x < self.x0 + self.w && p.y >= self.y0 && p.y < self.y0 + self.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub width: usize,
    pub height: usize,
    pub frames: u32,
    pub seed: u64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    pub background_mean: f64,
    pub background_contrast: f64,
    /// Static per-pixel texture of the background (gray levels).
    pub background_grain: f64,
    pub noise_sigma: f64,
    pub miss_speed: f64,
    pub merge_distance: f64,
    pub jitter_sigma: f64,
    pub clutter_rate: f64,
    /// Inclusive frame ranges with no detections at all.
    pub dropouts: Vec<(u32, u32)>,
    pub occluders: Vec<Occluder>,
    pub vehicles: Vec<VehicleScript>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 128,
            frames: 30,
            seed: 0,
            vehicle_length: 12.0,
            vehicle_width: 6.0,
            background_mean: 100.0,
            background_contrast: 30.0,
            background_grain: 3.0,
            noise_sigma: 2.0,
            miss_speed: 0.0,
            merge_distance: 0.0,
            jitter_sigma: 0.0,
            clutter_rate: 0.0,
            dropouts: Vec::new(),
            occluders: Vec::new(),
            vehicles: Vec::new(),
        }
    }
}

fn parse_pair(s: &str) -> Option<Vec2> {
    let (a, b) = s.split_once(',')?;
    Some(Vec2::new(a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn parse_count(s: &str) -> Option<u32> {
    s.strip_prefix('x').unwrap_or(s).parse().ok()
}

fn parse_command(s: &str) -> std::result::Result<Command, String> {
    let toks: Vec<&str> = s.split_whitespace().collect();
    let bad = || format!("malformed command `{s}`");
    match toks.as_slice() {
        ["move", d, n] | ["move", d, n, "hold"] => Ok(Command::Move {
            d: parse_pair(d).ok_or_else(bad)?,
            n: parse_count(n).ok_or_else(bad)?,
            hold: toks.len() == 4,
        }),
        ["wait", n] => Ok(Command::Wait(n.parse().map_err(|_| bad())?)),
        ["to", p, "@", v] => {
            let speed: f64 = v.parse().map_err(|_| bad())?;
            if speed <= 0.0 {
                return Err(format!("speed must be positive in `{s}`"));
            }
            Ok(Command::To {
                target: parse_pair(p).ok_or_else(bad)?,
                speed,
            })
        }
        ["turn", deg, "over", n, "speed", v] => Ok(Command::Turn {
            degrees: deg.parse().map_err(|_| bad())?,
            n: n.parse().map_err(|_| bad())?,
            speed: v.parse().map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

fn parse_vehicle(s: &str) -> std::result::Result<VehicleScript, String> {
    let mut parts = s.split('|');
    let head: Vec<&str> = parts.next().unwrap_or("").split_whitespace().collect();
    let start = head.first().and_then(|p| parse_pair(p)).ok_or("vehicle needs a start point X,Y")?;
    let mut v = VehicleScript {
        start,
        heading_deg: 0.0,
        start_frame: 0,
        contrast: None,
        texture: None,
        commands: Vec::new(),
    };
    let mut i = 1;
    while i < head.len() {
        let val = head.get(i + 1).ok_or_else(|| format!("missing value for `{}`", head[i]))?;
        let num = || val.parse::<f64>().map_err(|_| format!("bad number `{val}`"));
        match head[i] {
            "heading" => v.heading_deg = num()?,
            "start" => v.start_frame = val.parse().map_err(|_| format!("bad frame `{val}`"))?,
            "contrast" => v.contrast = Some(num()?),
            "texture" => v.texture = Some(val.parse().map_err(|_| format!("bad texture `{val}`"))?),
            other => return Err(format!("unknown vehicle option `{other}`")),
        }
        i += 2;
    }
    for c in parts {
        v.commands.push(parse_command(c.trim())?);
    }
    Ok(v)
}

impl ScenarioConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut c = ScenarioConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::parse(origin, i + 1, m);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || v.parse::<f64>().map_err(|_| err(format!("bad number for `{k}`: `{v}`")));
            let int = || v.parse::<u64>().map_err(|_| err(format!("bad integer for `{k}`: `{v}`")));
            match k {
                "width" => c.width = int()? as usize,
                "height" => c.height = int()? as usize,
                "frames" => c.frames = int()? as u32,
                "seed" => c.seed = int()?,
                "vehicle_length" => c.vehicle_length = num()?,
                "vehicle_width" => c.vehicle_width = num()?,
                "background_mean" => c.background_mean = num()?,
                "background_contrast" => c.background_contrast = num()?,
                "background_grain" => c.background_grain = num()?,
                "noise_sigma" => c.noise_sigma = num()?,
                "miss_speed" => c.miss_speed = num()?,
                "merge_distance" => c.merge_distance = num()?,
                "jitter_sigma" => c.jitter_sigma = num()?,
                "clutter_rate" => c.clutter_rate = num()?,
                "dropout" => {
                    let (a, b) = v.split_once('-').ok_or_else(|| err(format!("dropout needs A-B, got `{v}`")))?;
                    let a: u32 = a.trim().parse().map_err(|_| err(format!("bad dropout `{v}`")))?;
                    let b: u32 = b.trim().parse().map_err(|_| err(format!("bad dropout `{v}`")))?;
                    c.dropouts.push((a, b));
                }
                "occluder" => {
                    let xs: Vec<f64> = v
                        .split(',')
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| err(format!("bad occluder `{v}`")))?;
                    if xs.len() != 4 && xs.len() != 5 {
                        return Err(err(format!("occluder needs x,y,w,h[,value], got `{v}`")));
                    }
                    c.occluders.push(Occluder {
                        x0: xs[0],
                        y0: xs[1],
                        w: xs[2],
                        h: xs[3],
                        value: xs.get(4).copied().unwrap_or(c.background_mean),
                    });
                }
                "vehicle" => c.vehicles.push(parse_vehicle(v).map_err(err)?),
                _ => return Err(err(format!("unknown key `{k}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return bad("width, height and frames must be positive");
        }
        if self.vehicle_length <= 0.0 || self.vehicle_width <= 0.0 {
            return bad("vehicle size must be positive");
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("miss_speed", self.miss_speed),
            ("merge_distance", self.merge_distance),
            ("jitter_sigma", self.jitter_sigma),
            ("clutter_rate", self.clutter_rate),
            ("background_contrast", self.background_contrast),
            ("background_grain", self.background_grain),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        for &(a, b) in &self.dropouts {
            if a > b {
                return bad("dropout range must be ascending");
            }
        }
        for (i, v) in self.vehicles.iter().enumerate() {
            for (f, s) in self.trajectory(v) {
                if f >= self.frames {
                    break;
                }
                let b = self.gt_box(s.pos, s.heading);
                if b.cx - b.w / 2.0 < 0.0
                    || b.cy - b.h / 2.0 < 0.0
                    || b.cx + b.w / 2.0 > self.width as f64
                    || b.cy + b.h / 2.0 > self.height as f64
                {
                    return Err(Error::InvalidConfig(format!(
                        "vehicle {} leaves the frame at frame {f}",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-frame states of a scripted vehicle, starting at its start frame.
    pub fn trajectory(&self, v: &VehicleScript) -> Vec<(u32, VehicleState)> {
        let mut pos = v.start;
        let mut heading = v.heading_deg;
        let mut out = vec![(v.start_frame, VehicleState { pos, heading })];
        let push = |pos: Vec2, heading: f64, out: &mut Vec<(u32, VehicleState)>| {
            let f = out.last().unwrap().0 + 1;
            out.push((f, VehicleState { pos, heading }));
        };
        for c in &v.commands {
            match *c {
                Command::Move { d, n, hold } => {
                    if !hold && d.norm() > 0.0 {
                        heading = d.y.atan2(d.x).to_degrees();
                    }
                    for _ in 0..n {
                        pos = pos + d;
                        push(pos, heading, &mut out);
                    }
                }
                Command::Wait(n) => {
                    for _ in 0..n {
                        push(pos, heading, &mut out);
                    }
                }
                Command::To { target, speed } => {
                    let d = target - pos;
                    if d.norm() > 0.0 {
                        heading = d.y.atan2(d.x).to_degrees();
                    }
                    while (target - pos).norm() > 1e-9 {
                        let rest = target - pos;
                        pos = if rest.norm() <= speed {
                            target
                        } else {
                            pos + rest * (speed / rest.norm())
                        };
                        push(pos, heading, &mut out);
                    }
                }
                Command::Turn { degrees, n, speed } => {
                    for _ in 0..n {
                        heading += degrees / n as f64;
                        let r = heading.to_radians();
                        pos = pos + Vec2::new(r.cos(), r.sin()) * speed;
                        push(pos, heading, &mut out);
                    }
                }
            }
        }
        out
    }

    /// Axis-aligned box of the oriented vehicle rectangle.
    pub fn gt_box(&self, pos: Vec2, heading_deg: f64) -> BBox {
        let r = heading_deg.to_radians();
        let (c, s) = (r.cos().abs(), r.sin().abs());
        let clean = |x: f64| (x * 1e6).round() / 1e6;
        BBox {
            cx: pos.x,
            cy: pos.y,
            w: clean(self.vehicle_length * c + self.vehicle_width * s),
            h: clean(self.vehicle_length * s + self.vehicle_width * c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub pos: Vec2,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub frames: Vec<GrayFrame>,
    pub gt_tracks: Vec<Track>,
    pub detections: Vec<Vec<Detection>>,
}

/// Smoothed lattice noise in `[-1, 1]`.
struct ValueNoise {
    cell: f64,
    gw: usize,
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut SplitMix64, w: usize, h: usize, cell: f64) -> Self {
        let gw = (w as f64 / cell) as usize + 2;
        let gh = (h as f64 / cell) as usize + 2;
        Self {
            cell,
            gw,
            grid: (0..gw * gh).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
        let g = |a: usize, b: usize| self.grid[b * self.gw + a];
        let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
        let bot = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

fn background(c: &ScenarioConfig) -> Vec<f64> {
    let mut rng = SplitMix64::substream(c.seed, STREAM_BACKGROUND, 0);
    let coarse = ValueNoise::new(&mut rng, c.width, c.height, 16.0);
    let fine = ValueNoise::new(&mut rng, c.width, c.height, 4.0);
    let mut out = Vec::with_capacity(c.width * c.height);
    for y in 0..c.height {
        for x in 0..c.width {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let smooth = 0.85 * coarse.at(fx, fy) + 0.15 * fine.at(fx, fy);
            let grain = if c.background_grain > 0.0 { c.background_grain * rng.normal() } else { 0.0 };
            out.push(c.background_mean + c.background_contrast * smooth + grain);
        }
    }
    out
}

/// Per-vehicle appearance: a vaulted body brightest at its center, a darker
/// windshield band and a faint random texture in vehicle coordinates.
struct Appearance {
    contrast: f64,
    cells: Vec<f64>,
}

const TEX_U: usize = 6;
const TEX_V: usize = 3;
/// Brightness lost at the ends of the long and short body axes.
const VAULT_U: f64 = 0.2;
const VAULT_V: f64 = 0.9;
/// Subsamples per pixel side when rasterizing vehicles.
const SUPERSAMPLE: usize = 4;

impl Appearance {
    fn new(c: &ScenarioConfig, index: usize, v: &VehicleScript) -> Self {
        let tex = v.texture.unwrap_or(index as u64 + 1);
        let mut rng = SplitMix64::substream(c.seed, STREAM_TEXTURE, tex);
        let cells = (0..TEX_U * TEX_V).map(|_| rng.uniform(0.92, 1.0)).collect();
        let contrast = v.contrast.unwrap_or_else(|| {
            SplitMix64::substream(c.seed, STREAM_CONTRAST, index as u64).uniform(15.0, 40.0)
        });
        Self { contrast, cells }
    }

    /// Brightness factor at normalized vehicle coordinates `u, v` in `[0, 1)`
    /// (`u = 1` is the front).
    fn factor(&self, u: f64, v: f64) -> f64 {
        let vault = (1.0 - VAULT_U * (2.0 * u - 1.0).powi(2)) * (1.0 - VAULT_V * (2.0 * v - 1.0).powi(2));
        let band = if (0.62..0.78).contains(&u) { 0.4 } else { 1.0 };
        let iu = ((u * TEX_U as f64) as usize).min(TEX_U - 1);
        let iv = ((v * TEX_V as f64) as usize).min(TEX_V - 1);
        vault * band * self.cells[iv * TEX_U + iu]
    }
}

struct Placed<'a> {
    state: VehicleState,
    look: &'a Appearance,
}

fn render_frame(
    c: &ScenarioConfig,
    bg: &[f64],
    vehicles: &[Placed<'_>],
    index: u32,
) -> GrayFrame {
    let mut img = bg.to_vec();
    let (l, wv) = (c.vehicle_length, c.vehicle_width);
    let reach = (l * l + wv * wv).sqrt() / 2.0 + 1.0;
    for p in vehicles {
        let r = p.state.heading.to_radians();
        let (cs, sn) = (r.cos(), r.sin());
        let (px, py) = (p.state.pos.x, p.state.pos.y);
        let local_bg = {
            let x = (px as usize).min(c.width - 1);
            let y = (py as usize).min(c.height - 1);
            bg[y * c.width + x]
        };
        let x0 = (px - reach).floor().max(0.0) as usize;
        let y0 = (py - reach).floor().max(0.0) as usize;
        let x1 = ((px + reach).ceil() as usize).min(c.width);
        let y1 = ((py + reach).ceil() as usize).min(c.height);
        let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
        for y in y0..y1 {
            for x in x0..x1 {
                let (mut cover, mut sum) = (0.0, 0.0);
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let dx = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - px;
                        let dy = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - py;
                        let u = dx * cs + dy * sn;
                        let v = -dx * sn + dy * cs;
                        if u.abs() < l / 2.0 && v.abs() < wv / 2.0 {
                            cover += 1.0;
                            sum += p.look.factor(u / l + 0.5, v / wv + 0.5);
                        }
                    }
                }
                if cover > 0.0 {
                    let body = local_bg + p.look.contrast * sum / cover;
                    let i = y * c.width + x;
                    img[i] = img[i] * (1.0 - cover / n) + body * cover / n;
                }
            }
        }
    }
    for o in &c.occluders {
        for y in 0..c.height {
            for x in 0..c.width {
                if o.contains(Vec2::new(x as f64 + 0.5, y as f64 + 0.5)) {
                    img[y * c.width + x] = o.value;
                }
            }
        }
    }
    let mut rng = SplitMix64::substream(c.seed, STREAM_NOISE, index as u64);
    let data = img
        .iter()
        .map(|&v| {
            let n = if c.noise_sigma > 0.0 { c.noise_sigma * rng.normal() } else { 0.0 };
            (v + n).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayFrame::new(c.width, c.height, data, index).expect("dimensions validated")
}

/// Render frames, ground truth and detections for a scenario.
pub fn simulate(c: &ScenarioConfig) -> Result<SimOutput> {
    c.validate()?;
    let bg = background(c);
    let looks: Vec<Appearance> = c.vehicles.iter().enumerate().map(|(i, v)| Appearance::new(c, i, v)).collect();
    let trajectories: Vec<Vec<(u32, VehicleState)>> = c
        .vehicles
        .iter()
        .map(|v| c.trajectory(v).into_iter().filter(|(f, _)| *f < c.frames).collect())
        .collect();
    let state_at = |vi: usize, f: u32| -> Option<VehicleState> {
        let tr = &trajectories[vi];
        let first = tr.first()?.0;
        tr.get(f.checked_sub(first)? as usize).map(|x| x.1)
    };

    let frames: Vec<GrayFrame> = (0..c.frames)
        .into_par_iter()
        .map(|f| {
            let placed: Vec<Placed> = (0..c.vehicles.len())
                .filter_map(|vi| state_at(vi, f).map(|state| Placed { state, look: &looks[vi] }))
                .collect();
            render_frame(c, &bg, &placed, f)
        })
        .collect();

    let gt_tracks = trajectories
        .iter()
        .enumerate()
        .filter(|(_, tr)| !tr.is_empty())
        .map(|(i, tr)| {
            let obs = tr
                .iter()
                .map(|(f, s)| Observation::new(*f, c.gt_box(s.pos, s.heading), Source::Detection))
                .collect();
            Track::new(i as u64 + 1, obs)
        })
        .collect::<Result<Vec<_>>>()?;

    let blob = c.vehicle_length * c.vehicle_width;
    let mut detections = Vec::with_capacity(c.frames as usize);
    for f in 0..c.frames {
        let mut rng = SplitMix64::substream(c.seed, STREAM_DETECTIONS, f as u64);
        let dropped = c.dropouts.iter().any(|&(a, b)| (a..=b).contains(&f));
        let mut blobs: Vec<(BBox, f64)> = Vec::new();
        if !dropped {
            for vi in 0..c.vehicles.len() {
                let Some(s) = state_at(vi, f) else { continue };
                let speed = match f.checked_sub(1).and_then(|p| state_at(vi, p)) {
                    Some(prev) => (s.pos - prev.pos).norm(),
                    None => state_at(vi, f + 1).map_or(0.0, |n| (n.pos - s.pos).norm()),
                };
                if speed < c.miss_speed || c.occluders.iter().any(|o| o.contains(s.pos)) {
                    continue;
                }
                blobs.push((c.gt_box(s.pos, s.heading), blob));
            }
        }
        let merged = merge_blobs(blobs, c.merge_distance);
        let mut dets: Vec<Detection> = merged
            .into_iter()
            .map(|(b, area)| {
                let (jx, jy) = if c.jitter_sigma > 0.0 {
                    (c.jitter_sigma * rng.normal(), c.jitter_sigma * rng.normal())
                } else {
                    (0.0, 0.0)
                };
                Detection::new(f, b.translated(Vec2::new(jx, jy)), area)
            })
            .collect();
        let k = rng.poisson(c.clutter_rate);
        for _ in 0..k {
            let hw = c.vehicle_length / 2.0;
            let hh = c.vehicle_width / 2.0;
            let x = rng.uniform(hw, c.width as f64 - hw);
            let y = rng.uniform(hh, c.height as f64 - hh);
            dets.push(Detection::new(
                f,
                BBox {
                    cx: x,
                    cy: y,
                    w: c.vehicle_length,
                    h: c.vehicle_width,
                },
                blob,
            ));
        }
        detections.push(dets);
    }
    Ok(SimOutput {
        frames,
        gt_tracks,
        detections,
    })
}

/// Union blobs whose centers are closer than `distance`, transitively.
fn merge_blobs(blobs: Vec<(BBox, f64)>, distance: f64) -> Vec<(BBox, f64)> {
    let n = blobs.len();
    let mut group: Vec<usize> = (0..n).collect();
    fn root(g: &mut [usize], mut i: usize) -> usize {
        while g[i] != i {
            g[i] = g[g[i]];
            i = g[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if (blobs[i].0.center() - blobs[j].0.center()).norm() < distance {
                let (a, b) = (root(&mut group, i), root(&mut group, j));
                group[a.max(b)] = a.min(b);
            }
        }
    }
    let mut out: Vec<(usize, BBox, f64)> = Vec::new();
    for i in 0..n {
        let r = root(&mut group, i);
        match out.iter_mut().find(|(k, _, _)| *k == r) {
            Some(e) => {
                e.1 = e.1.union(&blobs[i].0);
                e.2 += blobs[i].1;
            }
            None => out.push((r, blobs[i].0, blobs[i].1)),
        }
    }
    out.into_iter().map(|(_, b, a)| (b, a)).collect()
}

/// 3x5 bitmaps for the digits 0-9, one row per entry, MSB on the left.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

const INK: u8 = 255;

/// Draw each track's box outline at the frame, with its id above it.
pub fn render_annotated(frame: &GrayFrame, pool: &TrackPool) -> GrayFrame {
    let mut out = frame.clone();
    let (w, h) = (frame.width() as i64, frame.height() as i64);
    let put = |img: &mut GrayFrame, x: i64, y: i64| {
        if x >= 0 && y >= 0 && x < w && y < h {
            img.set(x as usize, y as usize, INK);
        }
    };
    for track in pool.iter() {
        let Some(o) = track.at(frame.index()) else { continue };
        let r = o.bbox.pixel_rect();
        for x in r.x0..r.x1() {
            put(&mut out, x, r.y0);
            put(&mut out, x, r.y1() - 1);
        }
        for y in r.y0..r.y1() {
            put(&mut out, r.x0, y);
            put(&mut out, r.x1() - 1, y);
        }
        for (k, ch) in track.id.to_string().bytes().enumerate() {
            let glyph = DIGITS[(ch - b'0') as usize];
            let gx = r.x0 + 4 * k as i64;
            let gy = r.y0 - 7;
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        put(&mut out, gx + col, gy + row as i64);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_vehicle(extra: &str) -> ScenarioConfig {
        ScenarioConfig::parse(
            &format!("width = 200\nheight = 80\nframes = 12\nnoise_sigma = 0\n{extra}\nvehicle = 20,40 | move 10,0 x11\n"),
            "test",
        )
        .unwrap()
    }

    #[test]
    fn clean_scene_detections_equal_gt() {
        let out = simulate(&one_vehicle("")).unwrap();
        assert_eq!(out.frames.len(), 12);
        assert_eq!(out.gt_tracks.len(), 1);
        for (f, dets) in out.detections.iter().enumerate() {
            assert_eq!(dets.len(), 1);
            assert_eq!(dets[0].bbox, out.gt_tracks[0].at(f as u32).unwrap().bbox);
            assert_eq!(dets[0].blob_area, 72.0);
        }
    }

    #[test]
    fn stop_drops_detections_exactly() {
        let c = ScenarioConfig::parse(
            "width = 300\nheight = 80\nframes = 31\nmiss_speed = 1\nvehicle = 20,40 | move 8,0 x10 | wait 10 | move 8,0 x10\n",
            "test",
        )
        .unwrap();
        let out = simulate(&c).unwrap();
        for (f, d) in out.detections.iter().enumerate() {
            assert_eq!(d.is_empty(), (11..=20).contains(&f), "frame {f}");
        }
        assert_eq!(out.gt_tracks[0].len(), 31);
    }

    #[test]
    fn merges_follow_the_distance_trace() {
        let text = "width = 300\nheight = 80\nframes = 16\nnoise_sigma = 0\nmerge_distance = 14\n\
                    vehicle = 20,40 | move 12,0 x15\n\
                    vehicle = 62,49 | move 6,0 x15\n";
        let c = ScenarioConfig::parse(text, "test").unwrap();
        let out = simulate(&c).unwrap();
        for f in 0..16u32 {
            let a = out.gt_tracks[0].at(f).unwrap().bbox.center();
            let b = out.gt_tracks[1].at(f).unwrap().bbox.center();
            let close = (a - b).norm() < 14.0;
            let dets = &out.detections[f as usize];
            assert_eq!(dets.len(), if close { 1 } else { 2 }, "frame {f}");
            if close {
                assert_eq!(dets[0].blob_area, 144.0);
            }
        }
        let merged_frames = out.detections.iter().filter(|d| d.len() == 1).count();
        assert_eq!(merged_frames, 3);
    }

    #[test]
    fn same_seed_same_output() {
        let mut c = one_vehicle("jitter_sigma = 1\nclutter_rate = 2\nnoise_sigma = 3");
        c.seed = 99;
        assert_eq!(simulate(&c).unwrap(), simulate(&c).unwrap());
        let mut d = c.clone();
        d.seed = 100;
        assert_ne!(simulate(&c).unwrap().frames, simulate(&d).unwrap().frames);
    }

    #[test]
    fn vehicles_are_brighter_than_background() {
        let c = one_vehicle("");
        let out = simulate(&c).unwrap();
        let f = &out.frames[0];
        let b = out.gt_tracks[0].at(0).unwrap().bbox.pixel_rect();
        let inside: f64 = (b.y0..b.y1())
            .flat_map(|y| (b.x0..b.x1()).map(move |x| (x, y)))
            .map(|(x, y)| f.at(x as usize, y as usize) as f64)
            .sum::<f64>()
            / 72.0;
        let empty = simulate(&ScenarioConfig { vehicles: vec![], ..c.clone() }).unwrap();
        let bgm: f64 = (b.y0..b.y1())
            .flat_map(|y| (b.x0..b.x1()).map(move |x| (x, y)))
            .map(|(x, y)| empty.frames[0].at(x as usize, y as usize) as f64)
            .sum::<f64>()
            / 72.0;
        assert!(inside > bgm + 5.0, "{inside} vs {bgm}");
    }

    #[test]
    fn turning_changes_the_box() {
        let c = ScenarioConfig::parse(
            "width = 200\nheight = 200\nframes = 8\nvehicle = 40,40 | turn 90 over 6 speed 8 | wait 1\n",
            "test",
        )
        .unwrap();
        let out = simulate(&c).unwrap();
        let t = &out.gt_tracks[0];
        assert_eq!((t.at(0).unwrap().bbox.w, t.at(0).unwrap().bbox.h), (12.0, 6.0));
        assert_eq!((t.at(6).unwrap().bbox.w, t.at(6).unwrap().bbox.h), (6.0, 12.0));
        assert!(t.at(3).unwrap().bbox.w > 12.0);
    }

    #[test]
    fn occluded_vehicle_is_not_detected() {
        let c = ScenarioConfig::parse(
            "width = 200\nheight = 80\nframes = 12\noccluder = 80,20,30,40,70\nvehicle = 20,40 | move 10,0 x11\n",
            "test",
        )
        .unwrap();
        let out = simulate(&c).unwrap();
        for f in 0..12u32 {
            let x = out.gt_tracks[0].at(f).unwrap().bbox.cx;
            let hidden = (80.0..110.0).contains(&x);
            assert_eq!(out.detections[f as usize].is_empty(), hidden, "frame {f}");
        }
    }

    #[test]
    fn dropouts_remove_everything() {
        let out = simulate(&one_vehicle("dropout = 3-5\nclutter_rate = 3")).unwrap();
        for f in 3..=5 {
            assert!(out.detections[f].iter().all(|d| d.bbox.h == 6.0));
        }
        let c = one_vehicle("dropout = 3-5");
        let out = simulate(&c).unwrap();
        assert!(out.detections[3..=5].iter().all(|d| d.is_empty()));
        assert!(!out.detections[2].is_empty());
    }

    #[test]
    fn script_commands() {
        let c = ScenarioConfig::parse(
            "width = 300\nheight = 200\nframes = 40\nvehicle = 20,20 start 2 | to 50,60 @ 10 | wait 2 | move 0,5 x2 hold\n",
            "test",
        )
        .unwrap();
        let tr = c.trajectory(&c.vehicles[0]);
        assert_eq!(tr[0].0, 2);
        let ends: Vec<Vec2> = tr.iter().map(|s| s.1.pos).collect();
        assert_eq!(ends[5], Vec2::new(50.0, 60.0));
        assert_eq!(tr.len(), 1 + 5 + 2 + 2);
        let last = tr.last().unwrap().1;
        assert_eq!(last.pos, Vec2::new(50.0, 70.0));
        assert!((last.heading - (40f64).atan2(30.0).to_degrees()).abs() < 1e-9);
        let out = simulate(&c).unwrap();
        assert_eq!(out.gt_tracks[0].first_frame(), 2);
        assert_eq!(out.gt_tracks[0].last_frame(), 11);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let e = ScenarioConfig::parse("width = 10\nbogus = 3\n", "cfg").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = ScenarioConfig::parse("vehicle = 1,1 | jump 3\n", "cfg").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = ScenarioConfig::parse("noise_sigma = -1\n", "cfg").unwrap_err();
        assert!(matches!(e, Error::InvalidConfig(_)));
        let e = ScenarioConfig::parse("width = 50\nheight = 50\nvehicle = 40,25 | move 10,0 x3\n", "cfg").unwrap_err();
        assert!(matches!(e, Error::InvalidConfig(_)));
    }

    #[test]
    fn render_empty_pool_is_identity() {
        let out = simulate(&one_vehicle("")).unwrap();
        assert_eq!(render_annotated(&out.frames[0], &TrackPool::new()), out.frames[0]);
    }

    #[test]
    fn render_draws_one_outline_per_track() {
        let frame = GrayFrame::filled(120, 80, 0, 3);
        let mut pool = TrackPool::new();
        pool.spawn(vec![Observation::new(3, BBox::from_pixel_origin(20, 30, 12, 6), Source::Lct)])
            .unwrap();
        let img = render_annotated(&frame, &pool);
        // the full outline is drawn
        let r = BBox::from_pixel_origin(20, 30, 12, 6).pixel_rect();
        for x in r.x0..r.x1() {
            assert_eq!(img.at(x as usize, r.y0 as usize), INK);
            assert_eq!(img.at(x as usize, (r.y1() - 1) as usize), INK);
        }
        // interior untouched
        assert_eq!(img.at(25, 32), 0);
        // ten tracks make ten outlines: count top-left corners with ink
        // right and below but not left or above
        let mut pool = TrackPool::new();
        for k in 0..10 {
            pool.spawn(vec![Observation::new(
                3,
                BBox::from_pixel_origin(5 + 11 * (k % 5), 12 + 30 * (k / 5), 8, 6),
                Source::Lct,
            )])
            .unwrap();
        }
        let img = render_annotated(&frame, &pool);
        assert_eq!((img.width(), img.height()), (120, 80));
        let mut corners = 0;
        for k in 0..10i64 {
            let (x, y) = (5 + 11 * (k % 5), 12 + 30 * (k / 5));
            let ink = |x: i64, y: i64| img.at(x as usize, y as usize) == INK;
            if ink(x, y) && ink(x + 7, y) && ink(x, y + 5) && ink(x + 7, y + 5) && !ink(x + 3, y + 3) {
                corners += 1;
            }
        }
        assert_eq!(corners, 10);
    }
}
