//! Local context tracker.
//!
//! Each active track is extended from `t - 1` to `t` by sampling candidate
//! boxes from dense-flow discontinuities and from sparse median flow, then
//! choosing one candidate jointly with the candidates of nearby tracks that
//! move the same way. The joint choice lives on a star graph centered on
//! the target, which dynamic programming solves exactly.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{sparse_flow_fb_pyramids, FlowArtifacts};
use crate::matching::{best_variant_score, ncc_slices, non_max_suppression, read_window, ScoredCandidate};
use crate::types::{crop_patch, BBox, GrayFrame, PixelRect, Track, TrackPool, Vec2};

#[derive(Debug, Clone, PartialEq)]
pub struct LctParams {
    pub phi: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub neighbor_radius: f64,
    pub neighbor_angle_deg: f64,
    pub stopped_speed: f64,
    /// Acceleration magnitude below which its orientation is ignored.
    pub accel_floor: f64,
    pub search_window: usize,
    pub sparse_window: usize,
    pub sparse_iterations: usize,
    pub fb_threshold: f64,
    pub vote_fraction: f64,
    pub sparse_fraction: f64,
    pub sigma_m: f64,
    pub sigma_theta: f64,
    pub sigma_am: f64,
    pub sigma_atheta: f64,
    /// When false the pairwise term is fixed at 1.
    pub binary_term: bool,
}

impl Default for LctParams {
    fn default() -> Self {
        Self {
            phi: 0.5,
            lambda: 3.0,
            alpha: 0.01,
            beta: 0.05,
            neighbor_radius: 50.0,
            neighbor_angle_deg: 45.0,
            stopped_speed: 0.5,
            accel_floor: 2.0,
            search_window: 160,
            sparse_window: 15,
            sparse_iterations: 20,
            fb_threshold: 1.0,
            vote_fraction: 0.25,
            sparse_fraction: 0.125,
            sigma_m: 10.0,
            sigma_theta: std::f64::consts::FRAC_PI_4,
            sigma_am: 10.0,
            sigma_atheta: std::f64::consts::FRAC_PI_2,
            binary_term: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HypothesisOrigin {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hypothesis {
    pub bbox: BBox,
    pub appearance_prev: f64,
    pub appearance_stable: f64,
    pub origin: HypothesisOrigin,
}

/// Displacement expressed in a target-velocity frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextRelation {
    pub d_par: f64,
    pub d_perp: f64,
    /// Unit vector along the target velocity.
    pub basis: Vec2,
}

impl ContextRelation {
    /// `basis` must be a unit vector; the normal is its left normal.
    pub fn decompose(displacement: Vec2, basis: Vec2) -> Self {
        let normal = Vec2::new(-basis.y, basis.x);
        Self {
            d_par: displacement.dot(basis),
            d_perp: displacement.dot(normal),
            basis,
        }
    }

    pub fn displacement(&self) -> Vec2 {
        let normal = Vec2::new(-self.basis.y, self.basis.x);
        self.basis * self.d_par + normal * self.d_perp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LctResult {
    pub track_id: u64,
    pub selected: Option<Hypothesis>,
    pub objective_value: f64,
}

/// Scores for one neighbor's node set: `binary[i][k]` couples target node
/// `i` with neighbor node `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborNodes {
    pub unary: Vec<f64>,
    pub binary: Vec<Vec<f64>>,
}

/// Star-shaped hypothesis graph reduced to its scores.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisGraph {
    pub target_unary: Vec<f64>,
    pub neighbors: Vec<NeighborNodes>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub target: usize,
    /// `None` for neighbors with an empty node set.
    pub neighbors: Vec<Option<usize>>,
    pub objective: f64,
}

/// Exact maximizer of `lambda * sum(U) + sum(B)` over one node per set.
///
/// Given a target node, neighbors are independent, so each contributes its
/// own best `lambda * U + B`.
pub fn optimize(graph: &HypothesisGraph) -> Result<Selection> {
    if graph.target_unary.is_empty() {
        return Err(Error::EmptyTargetSet);
    }
    let mut best: Option<Selection> = None;
    for (i, &u) in graph.target_unary.iter().enumerate() {
        let mut total = graph.lambda * u;
        let mut picks = Vec::with_capacity(graph.neighbors.len());
        for n in &graph.neighbors {
            let mut arg: Option<(usize, f64)> = None;
            for (k, &un) in n.unary.iter().enumerate() {
                let s = graph.lambda * un + n.binary[i][k];
                if arg.map_or(true, |(_, b)| s > b) {
                    arg = Some((k, s));
                }
            }
            if let Some((k, s)) = arg {
                total += s;
                picks.push(Some(k));
            } else {
                picks.push(None);
            }
        }
        if best.as_ref().map_or(true, |b| total > b.objective) {
            best = Some(Selection {
                target: i,
                neighbors: picks,
                objective: total,
            });
        }
    }
    Ok(best.expect("target set is non-empty"))
}

#[inline]
fn gauss(d: f64, sigma: f64) -> f64 {
    (-d * d / (2.0 * sigma * sigma)).exp()
}

/// Magnitude and orientation Gaussian similarity of two vectors. The
/// orientation factor is dropped when either vector is shorter than `floor`.
pub fn vector_similarity(a: Vec2, b: Vec2, sigma_m: f64, sigma_theta: f64, floor: f64) -> f64 {
    let mag = gauss(a.norm() - b.norm(), sigma_m);
    if a.norm() < floor || b.norm() < floor {
        return mag;
    }
    mag * gauss(a.angle_to(b), sigma_theta)
}

/// Motion factor for moving the track's `t - 1` box to `center` at `t`.
pub fn motion_similarity(track: &Track, t: u32, center: Vec2, p: &LctParams) -> f64 {
    let Some(prev) = t.checked_sub(1).and_then(|f| track.at(f)) else {
        return 1.0;
    };
    let v_h = center - prev.bbox.center();
    let Ok(v1) = track.velocity_at(t - 1) else {
        return 1.0;
    };
    let vel = vector_similarity(v_h, v1, p.sigma_m, p.sigma_theta, p.stopped_speed);
    let acc = match t.checked_sub(2).map(|f| track.velocity_at(f)) {
        Some(Ok(v2)) => vector_similarity(v_h - v1, v1 - v2, p.sigma_am, p.sigma_atheta, p.accel_floor),
        _ => 1.0,
    };
    vel * acc
}

pub fn unary_score(h: &Hypothesis, track: &Track, t: u32, p: &LctParams) -> f64 {
    h.appearance_prev.clamp(0.0, 1.0) * motion_similarity(track, t, h.bbox.center(), p)
}

/// Unit vector along the target's velocity at `t - 1`, falling back to
/// the most recent fast-enough velocity and then to `+x`.
pub fn velocity_basis(track: &Track, t_prev: u32, floor: f64) -> Vec2 {
    let v = track
        .velocity_at(t_prev)
        .ok()
        .filter(|v| v.norm() >= floor)
        .or_else(|| track.recent_velocity(t_prev, floor))
        .unwrap_or(Vec2::new(1.0, 0.0));
    v * (1.0 / v.norm())
}

pub fn binary_score(
    h_target: &Hypothesis,
    h_neighbor: &Hypothesis,
    rel_prev: &ContextRelation,
    alpha: f64,
    beta: f64,
) -> f64 {
    let now = ContextRelation::decompose(h_neighbor.bbox.center() - h_target.bbox.center(), rel_prev.basis);
    (-alpha * (rel_prev.d_par - now.d_par).abs()).exp() * (-beta * (rel_prev.d_perp - now.d_perp).abs()).exp()
}

/// Active tracks near the target at `t_prev` that move in a similar
/// direction. Stopped tracks, or tracks without a velocity, qualify by
/// distance alone.
pub fn motion_neighbors<'a>(pool: &'a TrackPool, target: &Track, t_prev: u32, p: &LctParams) -> Vec<&'a Track> {
    let Some(me) = target.at(t_prev) else {
        return Vec::new();
    };
    let my_v = target.velocity_at(t_prev).ok();
    let limit = p.neighbor_angle_deg.to_radians();
    pool.iter()
        .filter(|o| o.active && o.id != target.id)
        .filter(|o| {
            let Some(obs) = o.at(t_prev) else { return false };
            if (obs.bbox.center() - me.bbox.center()).norm() > p.neighbor_radius {
                return false;
            }
            match (my_v, o.velocity_at(t_prev).ok()) {
                (Some(a), Some(b)) if a.norm() >= p.stopped_speed && b.norm() >= p.stopped_speed => {
                    a.angle_to(b) <= limit + 1e-12
                }
                _ => true,
            }
        })
        .collect()
}

/// Box with the track's `t - 1` size, as used for every hypothesis.
fn last_box(track: &Track, t_prev: u32) -> Option<BBox> {
    track.at(t_prev).map(|o| o.bbox)
}

struct GateContext<'a> {
    track: &'a Track,
    cur: &'a GrayFrame,
    prev_patch: Vec<f32>,
    pw: usize,
    ph: usize,
    phi: f64,
}

impl<'a> GateContext<'a> {
    fn new(track: &'a Track, prev: &GrayFrame, cur: &'a GrayFrame, t_prev: u32, phi: f64) -> Option<Self> {
        let b = last_box(track, t_prev)?;
        let patch = crop_patch(prev, &b).ok()?;
        Some(Self {
            track,
            cur,
            pw: patch.width,
            ph: patch.height,
            prev_patch: patch.data,
            phi,
        })
    }

    /// Both appearance scores of a placement whose top-left corner is
    /// `(x0, y0)`, or `None` if either gate fails or the box leaves the frame.
    fn gate(&self, x0: i64, y0: i64, buf: &mut Vec<f32>) -> Option<(f64, f64)> {
        if x0 < 0
            || y0 < 0
            || x0 as usize + self.pw > self.cur.width()
            || y0 as usize + self.ph > self.cur.height()
        {
            return None;
        }
        buf.resize(self.pw * self.ph, 0.0);
        read_window(self.cur, x0, y0, self.pw, self.ph, buf);
        let a_prev = ncc_slices(&self.prev_patch, buf);
        if a_prev <= self.phi {
            return None;
        }
        let a_stable = match &self.track.stable_template {
            Some(ts) => {
                let bbox = BBox::from_pixel_origin(x0, y0, self.pw, self.ph);
                let (tw, th) = (ts.base.width, ts.base.height);
                let patch = if (tw, th) == (self.pw, self.ph) {
                    crate::types::Patch::new(self.pw, self.ph, buf.clone()).ok()?
                } else {
                    let b = BBox::new(bbox.cx, bbox.cy, tw as f64, th as f64).ok()?;
                    crop_patch(self.cur, &b).ok()?
                };
                best_variant_score(&patch, ts).ok()?.0
            }
            None => a_prev,
        };
        (a_stable > self.phi).then_some((a_prev, a_stable))
    }
}

/// Candidate boxes from dense flow discontinuities inside the search window.
pub fn sample_dense(
    track: &Track,
    prev: &GrayFrame,
    cur: &GrayFrame,
    artifacts: &FlowArtifacts,
    p: &LctParams,
) -> Vec<Hypothesis> {
    let t = cur.index();
    let Some(t_prev) = t.checked_sub(1) else {
        return Vec::new();
    };
    let Some(ctx) = GateContext::new(track, prev, cur, t_prev, p.phi) else {
        return Vec::new();
    };
    let b = last_box(track, t_prev).expect("checked by gate context");
    let r = b.pixel_rect();
    let (w, h) = (ctx.pw as i64, ctx.ph as i64);
    let half = (p.search_window / 2) as i64;
    let (cx, cy) = (b.cx.round() as i64, b.cy.round() as i64);
    let x_lo = (cx - half).max(0);
    let y_lo = (cy - half).max(0);
    let x_hi = (cx + half).min(cur.width() as i64) - w;
    let y_hi = (cy + half).min(cur.height() as i64) - h;
    let need = (p.vote_fraction * (r.w * r.h) as f64).ceil() as u32;
    let mut buf = Vec::new();
    let mut cands = Vec::new();
    for y0 in y_lo..=y_hi {
        for x0 in x_lo..=x_hi {
            let pr = PixelRect {
                x0,
                y0,
                w: r.w,
                h: r.h,
            };
            if artifacts.votes.count_in(&pr) < need.max(1) {
                continue;
            }
            if let Some((a, s)) = ctx.gate(x0, y0, &mut buf) {
                cands.push((
                    ScoredCandidate {
                        bbox: BBox::from_pixel_origin(x0, y0, r.w, r.h),
                        score: a,
                        best_variant: None,
                    },
                    s,
                ));
            }
        }
    }
    let stable: Vec<f64> = cands.iter().map(|c| c.1).collect();
    let kept = non_max_suppression(cands.iter().map(|c| c.0).collect(), b.w / 2.0);
    kept.into_iter()
        .map(|k| {
            let idx = cands
                .iter()
                .position(|c| c.0.bbox == k.bbox)
                .expect("kept candidate comes from the input");
            Hypothesis {
                bbox: k.bbox,
                appearance_prev: k.score,
                appearance_stable: stable[idx],
                origin: HypothesisOrigin::Dense,
            }
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One candidate box shifted by the median of validated sparse flow.
pub fn sample_sparse(
    track: &Track,
    prev: &GrayFrame,
    cur: &GrayFrame,
    artifacts: &FlowArtifacts,
    p: &LctParams,
) -> Option<Hypothesis> {
    let t_prev = cur.index().checked_sub(1)?;
    let ctx = GateContext::new(track, prev, cur, t_prev, p.phi)?;
    let b = last_box(track, t_prev)?;
    let r = b.pixel_rect();
    let points: Vec<Vec2> = (r.y0..r.y1())
        .flat_map(|y| (r.x0..r.x1()).map(move |x| Vec2::new(x as f64, y as f64)))
        .filter(|q| q.x >= 0.0 && q.y >= 0.0 && q.x < cur.width() as f64 && q.y < cur.height() as f64)
        .collect();
    let cs = sparse_flow_fb_pyramids(
        &artifacts.prev,
        &artifacts.cur,
        &points,
        p.sparse_window,
        p.sparse_iterations,
        p.fb_threshold,
    );
    let valid: Vec<_> = cs.iter().filter(|c| c.valid).collect();
    if (valid.len() as f64) < p.sparse_fraction * (r.w * r.h) as f64 || valid.is_empty() {
        return None;
    }
    let dx = median(valid.iter().map(|c| c.tracked.x - c.origin.x).collect());
    let dy = median(valid.iter().map(|c| c.tracked.y - c.origin.y).collect());
    let moved = b.translated(Vec2::new(dx, dy));
    let mr = moved.pixel_rect();
    let mut buf = Vec::new();
    let (a, s) = ctx.gate(mr.x0, mr.y0, &mut buf)?;
    Some(Hypothesis {
        bbox: moved,
        appearance_prev: a,
        appearance_stable: s,
        origin: HypothesisOrigin::Sparse,
    })
}

pub fn sample_hypotheses(
    track: &Track,
    prev: &GrayFrame,
    cur: &GrayFrame,
    artifacts: &FlowArtifacts,
    p: &LctParams,
) -> Vec<Hypothesis> {
    let mut hs = sample_dense(track, prev, cur, artifacts, p);
    hs.extend(sample_sparse(track, prev, cur, artifacts, p));
    hs
}

/// Build the star graph for `target` from cached hypothesis sets.
pub fn build_graph(
    target: &Track,
    target_hyps: &[Hypothesis],
    neighbors: &[(&Track, &[Hypothesis])],
    t: u32,
    p: &LctParams,
) -> HypothesisGraph {
    let t_prev = t - 1;
    let basis = velocity_basis(target, t_prev, p.stopped_speed);
    let me = target.at(t_prev).map(|o| o.bbox.center()).unwrap_or(Vec2::ZERO);
    let nodes = neighbors
        .iter()
        .map(|(n, hs)| {
            let them = n.at(t_prev).map(|o| o.bbox.center()).unwrap_or(Vec2::ZERO);
            let rel = ContextRelation::decompose(them - me, basis);
            NeighborNodes {
                unary: hs.iter().map(|h| unary_score(h, n, t, p)).collect(),
                binary: target_hyps
                    .iter()
                    .map(|ht| {
                        hs.iter()
                            .map(|hn| {
                                if p.binary_term {
                                    binary_score(ht, hn, &rel, p.alpha, p.beta)
                                } else {
                                    1.0
                                }
                            })
                            .collect()
                    })
                    .collect(),
            }
        })
        .collect();
    HypothesisGraph {
        target_unary: target_hyps.iter().map(|h| unary_score(h, target, t, p)).collect(),
        neighbors: nodes,
        lambda: p.lambda,
    }
}

/// Per-track record for the optional JSON Lines dump.
#[derive(Debug, Clone, Serialize)]
pub struct LctDebugRecord {
    pub frame: u32,
    pub track_id: u64,
    pub hypotheses: Vec<DebugHypothesis>,
    pub neighbors: Vec<u64>,
    pub selected: Option<usize>,
    pub objective: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DebugHypothesis {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub appearance_prev: f64,
    pub appearance_stable: f64,
    pub origin: HypothesisOrigin,
}

/// Extend every active track present at `t - 1` to `cur`.
pub fn lct_step(
    pool: &TrackPool,
    prev: &GrayFrame,
    cur: &GrayFrame,
    artifacts: &FlowArtifacts,
    p: &LctParams,
) -> (Vec<LctResult>, Vec<LctDebugRecord>) {
    let t = cur.index();
    let Some(t_prev) = t.checked_sub(1) else {
        return (Vec::new(), Vec::new());
    };
    let live: Vec<&Track> = pool.iter().filter(|tr| tr.active && tr.at(t_prev).is_some()).collect();
    let cache: Vec<Vec<Hypothesis>> = live
        .par_iter()
        .map(|tr| sample_hypotheses(tr, prev, cur, artifacts, p))
        .collect();
    let index_of = |id: u64| live.iter().position(|tr| tr.id == id);
    let out: Vec<(LctResult, LctDebugRecord)> = live
        .par_iter()
        .enumerate()
        .map(|(i, tr)| {
            let hs = &cache[i];
            let nbrs: Vec<(&Track, &[Hypothesis])> = motion_neighbors(pool, tr, t_prev, p)
                .into_iter()
                .filter_map(|n| index_of(n.id).map(|j| (live[j], cache[j].as_slice())))
                .collect();
            let graph = build_graph(tr, hs, &nbrs, t, p);
            let sel = optimize(&graph).ok();
            let result = LctResult {
                track_id: tr.id,
                selected: sel.as_ref().map(|s| hs[s.target]),
                objective_value: sel.as_ref().map_or(0.0, |s| s.objective),
            };
            let record = LctDebugRecord {
                frame: t,
                track_id: tr.id,
                hypotheses: hs
                    .iter()
                    .map(|h| DebugHypothesis {
                        cx: h.bbox.cx,
                        cy: h.bbox.cy,
                        w: h.bbox.w,
                        h: h.bbox.h,
                        appearance_prev: h.appearance_prev,
                        appearance_stable: h.appearance_stable,
                        origin: h.origin,
                    })
                    .collect(),
                neighbors: nbrs.iter().map(|(n, _)| n.id).collect(),
                selected: sel.as_ref().map(|s| s.target),
                objective: result.objective_value,
            };
            (result, record)
        })
        .collect();
    out.into_iter().unzip()
}
