//! Shared raster, geometry and trajectory types.
//!
//! Pixel `(x, y)` has its center at coordinate `(x, y)`. Boxes carry
//! real-valued centers; every raster read rounds the center to the nearest
//! pixel and spans `round(w)` by `round(h)` pixels starting at
//! `round(cx) - round(w) / 2`.

use std::collections::BTreeMap;
use std::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};

/// 2-D vector in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// Unsigned angle between two vectors in `[0, pi]`.
    pub fn angle_to(self, other: Vec2) -> f64 {
        let cross = self.x * other.y - self.y * other.x;
        cross.abs().atan2(self.dot(other))
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

/// An 8-bit grayscale frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    data: Vec<u8>,
    index: u32,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, data: Vec<u8>, index: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DimensionMismatch("frame must be non-empty".into()));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} frame needs {} bytes, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            index,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8, index: u32) -> Self {
        Self::new(width, height, vec![value; width * height], index).expect("non-empty frame")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn with_index(mut self, index: u32) -> Self {
        self.index = index;
        self
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Pixel value, or `None` outside the frame.
    #[inline]
    pub fn get(&self, x: i64, y: i64) -> Option<u8> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            None
        } else {
            Some(self.data[y as usize * self.width + x as usize])
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }

    pub fn same_size(&self, other: &GrayFrame) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// A small grayscale patch. Values are kept as `f32` so rotated variants can
/// carry a non-integer fill value.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Patch {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} patch with {} values",
                width,
                height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f32 {
        let sum: f64 = self.data.iter().map(|&v| v as f64).sum();
        (sum / self.data.len() as f64) as f32
    }

    pub fn same_size(&self, other: &Patch) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Nearest-neighbour rotation about the patch center by `degrees`
    /// (counter-clockwise on screen). Pixels whose source falls outside the
    /// patch take the patch mean.
    pub fn rotated(&self, degrees: f64) -> Patch {
        if degrees == 0.0 {
            return self.clone();
        }
        let (s, c) = degrees.to_radians().sin_cos();
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        let fill = self.mean();
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                // y points down, so a counter-clockwise screen rotation of the
                // content samples the source at R(theta) applied with flipped y.
                let sx = c * dx - s * dy + cx;
                let sy = s * dx + c * dy + cy;
                let (ix, iy) = (sx.round(), sy.round());
                if ix >= 0.0 && iy >= 0.0 && (ix as usize) < self.width && (iy as usize) < self.height
                {
                    data.push(self.at(ix as usize, iy as usize));
                } else {
                    data.push(fill);
                }
            }
        }
        Patch {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Integer pixel rectangle produced by rounding a [`BBox`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: i64,
    pub y0: i64,
    pub w: usize,
    pub h: usize,
}

impl PixelRect {
    pub fn x1(&self) -> i64 {
        self.x0 + self.w as i64
    }

    pub fn y1(&self) -> i64 {
        self.y0 + self.h as i64
    }
}

/// Axis-aligned box with a real-valued center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "box {w}x{h} at ({cx}, {cy}) must have positive size"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn with_center(&self, c: Vec2) -> BBox {
        BBox {
            cx: c.x,
            cy: c.y,
            ..*self
        }
    }

    pub fn translated(&self, d: Vec2) -> BBox {
        self.with_center(self.center() + d)
    }

    pub fn dilated(&self, by: f64) -> BBox {
        BBox {
            w: self.w + 2.0 * by,
            h: self.h + 2.0 * by,
            ..*self
        }
    }

    /// Closed containment test used by the observation match rule.
    pub fn contains(&self, p: Vec2) -> bool {
        (p.x - self.cx).abs() <= self.w / 2.0 && (p.y - self.cy).abs() <= self.h / 2.0
    }

    /// True when either center lies inside the other box.
    pub fn center_match(&self, other: &BBox) -> bool {
        self.contains(other.center()) || other.contains(self.center())
    }

    pub fn union(&self, other: &BBox) -> BBox {
        let x0 = (self.cx - self.w / 2.0).min(other.cx - other.w / 2.0);
        let x1 = (self.cx + self.w / 2.0).max(other.cx + other.w / 2.0);
        let y0 = (self.cy - self.h / 2.0).min(other.cy - other.h / 2.0);
        let y1 = (self.cy + self.h / 2.0).max(other.cy + other.h / 2.0);
        BBox {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn pixel_size(&self) -> (usize, usize) {
        (
            (self.w.round() as usize).max(1),
            (self.h.round() as usize).max(1),
        )
    }

    pub fn pixel_rect(&self) -> PixelRect {
        let (w, h) = self.pixel_size();
        PixelRect {
            x0: self.cx.round() as i64 - (w / 2) as i64,
            y0: self.cy.round() as i64 - (h / 2) as i64,
            w,
            h,
        }
    }

    /// Box whose [`pixel_rect`](Self::pixel_rect) starts at `(x0, y0)`.
    pub fn from_pixel_origin(x0: i64, y0: i64, w: usize, h: usize) -> BBox {
        BBox {
            cx: (x0 + (w / 2) as i64) as f64,
            cy: (y0 + (h / 2) as i64) as f64,
            w: w as f64,
            h: h as f64,
        }
    }
}

/// A motion detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub frame: u32,
    pub bbox: BBox,
    pub blob_area: f64,
    /// Created by splitting a potential merged detection.
    pub synthetic: bool,
}

impl Detection {
    pub fn new(frame: u32, bbox: BBox, blob_area: f64) -> Self {
        Self {
            frame,
            bbox,
            blob_area,
            synthetic: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Detection,
    Lct,
    Interpolated,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Detection => "DET",
            Source::Lct => "LCT",
            Source::Interpolated => "INTERP",
        }
    }

    pub fn parse(s: &str) -> Option<Source> {
        match s {
            "DET" => Some(Source::Detection),
            "LCT" => Some(Source::Lct),
            "INTERP" => Some(Source::Interpolated),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub frame: u32,
    pub bbox: BBox,
    pub source: Source,
}

impl Observation {
    pub fn new(frame: u32, bbox: BBox, source: Source) -> Self {
        Self {
            frame,
            bbox,
            source,
        }
    }
}

/// Rotation angles (degrees) of the stable template variants.
pub const DEFAULT_ROTATIONS: [f64; 7] = [-90.0, -60.0, -30.0, 0.0, 30.0, 60.0, 90.0];

/// A stable template and its rotation variants.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub base: Patch,
    pub angles: Vec<f64>,
    pub variants: Vec<Patch>,
}

impl TemplateSet {
    pub fn new(base: Patch) -> Self {
        Self::with_angles(base, &DEFAULT_ROTATIONS)
    }

    pub fn with_angles(base: Patch, angles: &[f64]) -> Self {
        let variants = angles.iter().map(|&a| base.rotated(a)).collect();
        Self {
            base,
            angles: angles.to_vec(),
            variants,
        }
    }
}

/// Crop the box from the frame; pixels outside the frame read as 0.
pub fn crop_patch(frame: &GrayFrame, bbox: &BBox) -> Result<Patch> {
    let r = bbox.pixel_rect();
    if r.x1() <= 0 || r.y1() <= 0 || r.x0 >= frame.width() as i64 || r.y0 >= frame.height() as i64
    {
        return Err(Error::OutOfFrame);
    }
    let mut data = Vec::with_capacity(r.w * r.h);
    for y in r.y0..r.y1() {
        for x in r.x0..r.x1() {
            data.push(frame.get(x, y).unwrap_or(0) as f32);
        }
    }
    Ok(Patch {
        width: r.w,
        height: r.h,
        data,
    })
}

/// Write a patch back at the box location, skipping out-of-frame pixels.
pub fn embed_patch(frame: &mut GrayFrame, bbox: &BBox, patch: &Patch) {
    let r = bbox.pixel_rect();
    for py in 0..patch.height.min(r.h) {
        for px in 0..patch.width.min(r.w) {
            let (x, y) = (r.x0 + px as i64, r.y0 + py as i64);
            if frame.get(x, y).is_some() {
                let v = patch.at(px, py).round().clamp(0.0, 255.0) as u8;
                frame.set(x as usize, y as usize, v);
            }
        }
    }
}

/// An identity trajectory in the track pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    observations: Vec<Observation>,
    pub stable_template: Option<TemplateSet>,
    /// Frame whose observation last refreshed the stable template.
    pub template_frame: Option<u32>,
    pub consecutive_misses: u32,
    pub active: bool,
}

impl Track {
    pub fn new(id: u64, observations: Vec<Observation>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::InvalidConfig(format!("track {id} has no observations")));
        }
        if observations.windows(2).any(|w| w[0].frame >= w[1].frame) {
            return Err(Error::InvalidConfig(format!(
                "track {id} observations are not strictly increasing in frame"
            )));
        }
        Ok(Self {
            id,
            observations,
            stable_template: None,
            template_frame: None,
            consecutive_misses: 0,
            active: true,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn first(&self) -> &Observation {
        &self.observations[0]
    }

    pub fn last(&self) -> &Observation {
        self.observations.last().expect("track is never empty")
    }

    pub fn first_frame(&self) -> u32 {
        self.first().frame
    }

    pub fn last_frame(&self) -> u32 {
        self.last().frame
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn at(&self, frame: u32) -> Option<&Observation> {
        self.observations
            .binary_search_by_key(&frame, |o| o.frame)
            .ok()
            .map(|i| &self.observations[i])
    }

    /// Append an observation after the current last one.
    pub fn push(&mut self, obs: Observation) -> Result<()> {
        if obs.frame <= self.last_frame() {
            return Err(Error::InvalidConfig(format!(
                "track {} already extends to frame {}, cannot append frame {}",
                self.id,
                self.last_frame(),
                obs.frame
            )));
        }
        self.observations.push(obs);
        Ok(())
    }

    /// Insert an observation at a frame the track does not yet cover.
    /// Returns false when the frame is already occupied.
    pub fn insert(&mut self, obs: Observation) -> bool {
        match self.observations.binary_search_by_key(&obs.frame, |o| o.frame) {
            Ok(_) => false,
            Err(i) => {
                self.observations.insert(i, obs);
                true
            }
        }
    }

    /// `center(t) - center(t - 1)`.
    pub fn velocity_at(&self, t: u32) -> Result<Vec2> {
        let missing = |frame| Error::MissingObservation {
            track_id: self.id,
            frame,
        };
        if t == 0 {
            return Err(missing(0));
        }
        let cur = self.at(t).ok_or_else(|| missing(t))?;
        let prev = self.at(t - 1).ok_or_else(|| missing(t - 1))?;
        Ok(cur.bbox.center() - prev.bbox.center())
    }

    /// Most recent velocity at or before `t` whose magnitude is at least `min_speed`.
    pub fn recent_velocity(&self, t: u32, min_speed: f64) -> Option<Vec2> {
        let end = self.observations.partition_point(|o| o.frame <= t);
        self.observations[..end]
            .windows(2)
            .rev()
            .filter(|w| w[1].frame == w[0].frame + 1)
            .map(|w| w[1].bbox.center() - w[0].bbox.center())
            .find(|v| v.norm() >= min_speed)
    }
}

/// The set of all tracks, keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackPool {
    pub tracks: BTreeMap<u64, Track>,
    pub next_id: u64,
}

impl TrackPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Create a track with a fresh id.
    pub fn spawn(&mut self, observations: Vec<Observation>) -> Result<u64> {
        let id = self.next_id;
        let track = Track::new(id, observations)?;
        self.tracks.insert(id, track);
        self.next_id += 1;
        Ok(id)
    }

    /// Insert an externally built track, keeping `next_id` ahead of it.
    pub fn insert(&mut self, track: Track) {
        self.next_id = self.next_id.max(track.id + 1);
        self.tracks.insert(track.id, track);
    }

    pub fn get(&self, id: u64) -> Option<&Track> {
        self.tracks.get(&id)
    }

    pub fn get_mut(&mut self, id: u64) -> Option<&mut Track> {
        self.tracks.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Track> {
        self.tracks.values()
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }
}
