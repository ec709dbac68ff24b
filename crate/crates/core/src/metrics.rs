//! CLEAR-style tracking metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{BBox, Track};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub recall: f64,
    pub precision: f64,
    pub fp_per_frame: f64,
    pub fp_per_gt: f64,
    pub moda: f64,
    pub swaps_per_track: f64,
    pub breaks_per_track: f64,
    pub mota: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub swaps: u64,
    pub breaks: u64,
    pub gt_detections: u64,
    pub frames: u64,
    pub gt_tracks: u64,
}

impl MetricsReport {
    /// Aligned two-column text table.
    pub fn to_table(&self) -> String {
        let rows = [
            ("Recall", self.recall),
            ("Precision", self.precision),
            ("FP/F", self.fp_per_frame),
            ("FP/GT", self.fp_per_gt),
            ("MODA", self.moda),
            ("S/T", self.swaps_per_track),
            ("B/T", self.breaks_per_track),
            ("MOTA", self.mota),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            s.push_str(&format!("{k:<10} {v:>8.3}\n"));
        }
        s
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Match predictions to ground truth frame by frame and count errors.
///
/// Only frames inside the ground-truth frame range are scored.
pub fn evaluate(gt: &[Track], pred: &[Track]) -> Result<MetricsReport> {
    let gt_obs = gt.iter().map(|t| t.len()).sum::<usize>();
    if gt_obs == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let lo = gt.iter().filter(|t| !t.is_empty()).map(|t| t.first_frame()).min().unwrap();
    let hi = gt.iter().filter(|t| !t.is_empty()).map(|t| t.last_frame()).max().unwrap();
    let pred_in_range = pred
        .iter()
        .flat_map(|t| t.observations())
        .filter(|o| (lo..=hi).contains(&o.frame))
        .count();
    let pred_total: usize = pred.iter().map(|t| t.len()).sum();
    if pred_total > 0 && pred_in_range == 0 {
        return Err(Error::EmptyOverlap);
    }

    let mut by_frame_gt: BTreeMap<u32, Vec<(u64, BBox)>> = BTreeMap::new();
    for t in gt {
        for o in t.observations() {
            by_frame_gt.entry(o.frame).or_default().push((t.id, o.bbox));
        }
    }
    let mut by_frame_pred: BTreeMap<u32, Vec<(u64, BBox)>> = BTreeMap::new();
    for t in pred {
        for o in t.observations().iter().filter(|o| (lo..=hi).contains(&o.frame)) {
            by_frame_pred.entry(o.frame).or_default().push((t.id, o.bbox));
        }
    }

    let (mut tp, mut fp, mut fn_, mut swaps, mut breaks) = (0u64, 0u64, 0u64, 0u64, 0u64);
    let mut pred_last_gt: BTreeMap<u64, u64> = BTreeMap::new();
    let mut pred_gts: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    let mut gt_last_pred: BTreeMap<u64, u64> = BTreeMap::new();
    let empty = Vec::new();
    for f in lo..=hi {
        let g = by_frame_gt.get(&f).unwrap_or(&empty);
        let p = by_frame_pred.get(&f).unwrap_or(&empty);
        let mut pairs: Vec<(f64, u64, u64, usize, usize)> = Vec::new();
        for (gi, (gid, gb)) in g.iter().enumerate() {
            for (pi, (pid, pb)) in p.iter().enumerate() {
                if gb.center_match(pb) {
                    pairs.push(((gb.center() - pb.center()).norm(), *gid, *pid, gi, pi));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut g_used = vec![false; g.len()];
        let mut p_used = vec![false; p.len()];
        let mut matches = Vec::new();
        for (_, gid, pid, gi, pi) in pairs {
            if g_used[gi] || p_used[pi] {
                continue;
            }
            g_used[gi] = true;
            p_used[pi] = true;
            matches.push((gid, pid));
        }
        tp += matches.len() as u64;
        fn_ += (g.len() - matches.len()) as u64;
        fp += (p.len() - matches.len()) as u64;
        for (gid, pid) in matches {
            if let Some(&prev_g) = pred_last_gt.get(&pid) {
                if prev_g != gid {
                    swaps += 1;
                }
            }
            if let Some(&prev_p) = gt_last_pred.get(&gid) {
                let fresh = pred_gts.get(&pid).map_or(true, |s| s.iter().all(|&x| x == gid));
                if prev_p != pid && fresh {
                    breaks += 1;
                }
            }
            pred_last_gt.insert(pid, gid);
            pred_gts.entry(pid).or_default().insert(gid);
            gt_last_pred.insert(gid, pid);
        }
    }

    let gt_detections = gt_obs as u64;
    let gt_tracks = gt.iter().filter(|t| !t.is_empty()).count() as u64;
    let frames = (hi - lo + 1) as u64;
    Ok(MetricsReport {
        recall: ratio(tp, gt_detections),
        precision: ratio(tp, tp + fp),
        fp_per_frame: ratio(fp, frames),
        fp_per_gt: ratio(fp, gt_detections),
        moda: 1.0 - (fn_ + fp) as f64 / gt_detections as f64,
        swaps_per_track: ratio(swaps, gt_tracks),
        breaks_per_track: ratio(breaks, gt_tracks),
        mota: 1.0 - (fn_ + fp + swaps) as f64 / gt_detections as f64,
        tp,
        fp,
        fn_,
        swaps,
        breaks,
        gt_detections,
        frames,
        gt_tracks,
    })
}
