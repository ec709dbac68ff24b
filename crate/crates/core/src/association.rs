//! Tracklet-to-track association and track-pool fusion.

use std::collections::BTreeMap;

use crate::dbt::Tracklet;
use crate::error::{Error, Result};
use crate::lct::LctResult;
use crate::matching::ncc;
use crate::types::{crop_patch, BBox, GrayFrame, Observation, Patch, Source, TemplateSet, Track, TrackPool, Vec2};

#[derive(Debug, Clone, PartialEq)]
pub struct AssocParams {
    pub zeta: f64,
    pub sigma_v: f64,
    pub gap_decay: f64,
    pub max_gap: u32,
    pub termination_misses: u32,
    pub rotations: Vec<f64>,
}

impl Default for AssocParams {
    fn default() -> Self {
        Self {
            zeta: 0.6,
            sigma_v: 10.0,
            gap_decay: 0.01,
            max_gap: 8,
            termination_misses: 8,
            rotations: crate::types::DEFAULT_ROTATIONS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociationScore {
    pub s_p: f64,
    pub s_v: f64,
    pub a: f64,
}

impl AssociationScore {
    fn new(s_p: f64, s_v: f64) -> Self {
        Self { s_p, s_v, a: s_p * s_v }
    }
}

fn velocity_kernel(a: Vec2, b: Vec2, sigma: f64) -> f64 {
    let d = (a - b).norm();
    (-d * d / (2.0 * sigma * sigma)).exp()
}

/// Tracklet velocity between its first two observations.
fn tracklet_start_velocity(t: &Tracklet) -> Option<Vec2> {
    let o = &t.observations;
    (o.len() >= 2).then(|| o[1].bbox.center() - o[0].bbox.center())
}

/// Track velocity at `frame`, or the most recent one before it.
fn track_velocity_near(track: &Track, frame: u32) -> Option<Vec2> {
    track
        .velocity_at(frame)
        .ok()
        .or_else(|| track.recent_velocity(frame, 0.0))
}

fn s_v(track: &Track, tracklet: &Tracklet, frame: u32, sigma: f64) -> f64 {
    match (track_velocity_near(track, frame), tracklet_start_velocity(tracklet)) {
        (Some(a), Some(b)) => velocity_kernel(a, b, sigma),
        _ => 1.0,
    }
}

/// Score a tracklet that overlaps the track in time.
pub fn associate_overlap(existing: &Track, tracklet: &Tracklet, p: &AssocParams) -> Result<AssociationScore> {
    let lo = existing.first_frame().max(tracklet.start());
    let hi = existing.last_frame().min(tracklet.end());
    if lo > hi {
        return Err(Error::NoOverlap);
    }
    let matched = (lo..=hi)
        .filter(|&f| match (existing.at(f), tracklet.at(f)) {
            (Some(a), Some(b)) => a.bbox.center_match(&b.bbox),
            _ => false,
        })
        .count();
    let s_p = matched as f64 / (hi - lo + 1) as f64;
    let vf = (tracklet.start() + 1).min(tracklet.end());
    Ok(AssociationScore::new(s_p, s_v(existing, tracklet, vf, p.sigma_v)))
}

/// Score a tracklet that starts after the track ends, by projecting its
/// first observation back to the track's last frame.
pub fn associate_gap(existing: &Track, tracklet: &Tracklet, p: &AssocParams) -> Result<AssociationScore> {
    let end = existing.last_frame();
    if tracklet.start() <= end {
        return Err(Error::NoOverlap);
    }
    let gap = tracklet.start() - end - 1;
    if gap > p.max_gap {
        return Err(Error::GapTooLarge { gap, max: p.max_gap });
    }
    let v = tracklet_start_velocity(tracklet).unwrap_or(Vec2::ZERO);
    let steps = (tracklet.start() - end) as f64;
    let projected = tracklet.observations[0].bbox.center() - v * steps;
    let dist = (projected - existing.last().bbox.center()).norm();
    let s_p = (-p.gap_decay * dist).exp();
    Ok(AssociationScore::new(s_p, s_v(existing, tracklet, end, p.sigma_v)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssociationKind {
    Overlap,
    Gap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub track_id: u64,
    pub tracklet: usize,
    pub score: AssociationScore,
    pub kind: AssociationKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Resolution {
    pub assignments: Vec<Assignment>,
    /// Tracklet indices that seed new tracks.
    pub unassigned: Vec<usize>,
}

fn greedy(
    mut cands: Vec<Assignment>,
    zeta: f64,
    used_tracks: &mut Vec<u64>,
    used_tracklets: &mut [bool],
    out: &mut Vec<Assignment>,
) {
    cands.sort_by(|a, b| {
        b.score
            .a
            .total_cmp(&a.score.a)
            .then(a.track_id.cmp(&b.track_id))
            .then(a.tracklet.cmp(&b.tracklet))
    });
    for c in cands {
        if c.score.a <= zeta || used_tracks.contains(&c.track_id) || used_tracklets[c.tracklet] {
            continue;
        }
        used_tracks.push(c.track_id);
        used_tracklets[c.tracklet] = true;
        out.push(c);
    }
}

/// Two-pass greedy one-to-one assignment: overlap candidates first, then
/// gap candidates for whatever is left. Inactive tracks may be resumed by a
/// gap match.
pub fn resolve_associations(pool: &TrackPool, tracklets: &[Tracklet], p: &AssocParams) -> Resolution {
    let mut used_tracks = Vec::new();
    let mut used = vec![false; tracklets.len()];
    let mut assignments = Vec::new();

    let mut overlap = Vec::new();
    for track in pool.iter() {
        for (i, tl) in tracklets.iter().enumerate() {
            let r = associate_overlap(track, tl, p);
            if let Ok(score) = r {
                overlap.push(Assignment {
                    track_id: track.id,
                    tracklet: i,
                    score,
                    kind: AssociationKind::Overlap,
                });
            }
        }
    }
    greedy(overlap, p.zeta, &mut used_tracks, &mut used, &mut assignments);

    let mut gap = Vec::new();
    for track in pool.iter().filter(|t| !used_tracks.contains(&t.id)) {
        for (i, tl) in tracklets.iter().enumerate().filter(|(i, _)| !used[*i]) {
            if let Ok(score) = associate_gap(track, tl, p) {
                gap.push(Assignment {
                    track_id: track.id,
                    tracklet: i,
                    score,
                    kind: AssociationKind::Gap,
                });
            }
        }
    }
    greedy(gap, p.zeta, &mut used_tracks, &mut used, &mut assignments);

    Resolution {
        assignments,
        unassigned: (0..tracklets.len()).filter(|&i| !used[i]).collect(),
    }
}

/// What changed during one fusion step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FuseReport {
    pub template_updates: Vec<u64>,
    pub new_tracks: Vec<u64>,
    /// Source of the observation appended at the current frame, per track.
    pub extended: Vec<(u64, Source)>,
    pub deactivated: Vec<u64>,
}

/// Replace the stable template with the patch of the track's latest
/// observation in `frame`.
pub fn update_stable_template(track: &mut Track, frame: &GrayFrame, rotations: &[f64]) -> Result<()> {
    let obs = *track.at(frame.index()).ok_or(Error::MissingObservation {
        track_id: track.id,
        frame: frame.index(),
    })?;
    let patch = crop_patch(frame, &obs.bbox)?;
    set_template(track, patch, obs.frame, rotations);
    Ok(())
}

fn set_template(track: &mut Track, patch: Patch, frame: u32, rotations: &[f64]) {
    track.stable_template = Some(TemplateSet::with_angles(patch, rotations));
    track.template_frame = Some(frame);
}

/// Linear interpolation of the box between two observations.
fn interpolate(a: &Observation, b: &Observation, frame: u32) -> Observation {
    let s = (frame - a.frame) as f64 / (b.frame - a.frame) as f64;
    let lerp = |x: f64, y: f64| x + (y - x) * s;
    Observation::new(
        frame,
        BBox {
            cx: lerp(a.bbox.cx, b.bbox.cx),
            cy: lerp(a.bbox.cy, b.bbox.cy),
            w: lerp(a.bbox.w, b.bbox.w),
            h: lerp(a.bbox.h, b.bbox.h),
        },
        Source::Interpolated,
    )
}

/// NCC of the candidate box in `cur` against `reference`, sampled at the
/// reference size around the candidate center.
fn candidate_ncc(reference: &Patch, cur: &GrayFrame, candidate: &BBox) -> f64 {
    BBox::new(candidate.cx, candidate.cy, reference.width as f64, reference.height as f64)
        .and_then(|b| crop_patch(cur, &b))
        .and_then(|p| ncc(reference, &p))
        .unwrap_or(f64::NEG_INFINITY)
}

/// Apply assignments and LCT results for frame `cur.index()`.
pub fn fuse_and_update(
    pool: &mut TrackPool,
    tracklets: &[Tracklet],
    resolution: &Resolution,
    lct_results: &[LctResult],
    prev: Option<&GrayFrame>,
    cur: &GrayFrame,
    p: &AssocParams,
) -> Result<FuseReport> {
    let t = cur.index();
    let mut report = FuseReport::default();
    let mut by_track: BTreeMap<u64, usize> = BTreeMap::new();
    for a in &resolution.assignments {
        if by_track.insert(a.track_id, a.tracklet).is_some() {
            return Err(Error::ConflictingAssignment(a.track_id));
        }
    }
    let lct: BTreeMap<u64, &LctResult> = lct_results.iter().map(|r| (r.track_id, r)).collect();

    let ids: Vec<u64> = pool.tracks.keys().copied().collect();
    for id in ids {
        let track = pool.get_mut(id).expect("id from pool");
        let assigned = by_track.get(&id).map(|&i| &tracklets[i]);
        let mut det_at_t = None;
        if let Some(tl) = assigned {
            let before = track.observations().iter().rev().find(|o| o.frame < tl.start()).copied();
            for o in &tl.observations {
                if o.frame < t {
                    track.insert(*o);
                } else if o.frame == t {
                    det_at_t = Some(*o);
                }
            }
            if let Some(b) = before {
                let first = tl.observations[0];
                for f in b.frame + 1..first.frame {
                    track.insert(interpolate(&b, &first, f));
                }
            }
            track.active = true;
        }
        let lct_at_t = if track.active {
            lct.get(&id).and_then(|r| r.selected).map(|h| Observation::new(t, h.bbox, Source::Lct))
        } else {
            None
        };
        let chosen = match (det_at_t, lct_at_t) {
            (Some(d), Some(l)) => {
                let reference = prev.and_then(|pf| {
                    track
                        .at(t.checked_sub(1)?)
                        .and_then(|o| crop_patch(pf, &o.bbox).ok())
                });
                match reference {
                    Some(r) if candidate_ncc(&r, cur, &l.bbox) > candidate_ncc(&r, cur, &d.bbox) => Some(l),
                    _ => Some(d),
                }
            }
            (d, l) => d.or(l),
        };
        if let Some(o) = chosen {
            if track.at(t).is_none() && track.insert(o) {
                report.extended.push((id, o.source));
            }
        }
        if let Some(tl) = assigned {
            if track.at(t).is_some() {
                update_stable_template(track, cur, &p.rotations)?;
            } else {
                let last = tl.observations.len() - 1;
                set_template(track, tl.patches[last].clone(), tl.observations[last].frame, &p.rotations);
            }
            report.template_updates.push(id);
        }
        if assigned.is_some() || track.at(t).is_some() {
            track.consecutive_misses = 0;
        } else if track.active {
            track.consecutive_misses += 1;
            if track.consecutive_misses >= p.termination_misses {
                track.active = false;
                report.deactivated.push(id);
            }
        }
    }

    for &i in &resolution.unassigned {
        let tl = &tracklets[i];
        let id = pool.spawn(tl.observations.clone())?;
        let track = pool.get_mut(id).expect("just spawned");
        set_template(track, tl.patches[0].clone(), tl.observations[0].frame, &p.rotations);
        report.new_tracks.push(id);
    }
    Ok(report)
}
