//! The per-frame tracking loop tying flow, LCT, DBT and association together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::association::{fuse_and_update, resolve_associations, AssociationKind, Resolution};
use crate::config::PipelineConfig;
use crate::dbt::{extract_tracklets, flush, grow_trees, Forest, Tracklet};
use crate::error::{Error, Result};
use crate::flow::FlowArtifacts;
use crate::io;
use crate::lct::{lct_step, LctResult};
use crate::types::{Detection, GrayFrame, TrackPool};

#[derive(Debug, Serialize)]
struct TrackletRecord {
    frame: u32,
    index: usize,
    start: u32,
    end: u32,
    score: f64,
    track_id: Option<u64>,
    kind: Option<&'static str>,
    association: Option<f64>,
}

fn tracklet_records(frame: u32, tracklets: &[Tracklet], res: &Resolution) -> Vec<TrackletRecord> {
    tracklets
        .iter()
        .enumerate()
        .map(|(i, tl)| {
            let a = res.assignments.iter().find(|a| a.tracklet == i);
            TrackletRecord {
                frame,
                index: i,
                start: tl.start(),
                end: tl.end(),
                score: tl.score,
                track_id: a.map(|a| a.track_id),
                kind: a.map(|a| match a.kind {
                    AssociationKind::Overlap => "overlap",
                    AssociationKind::Gap => "gap",
                }),
                association: a.map(|a| a.score.a),
            }
        })
        .collect()
}

/// Online tracker consuming one frame and its detections at a time.
pub struct Tracker {
    config: PipelineConfig,
    pool: TrackPool,
    forest: Forest,
    prev: Option<GrayFrame>,
    debug_dir: Option<PathBuf>,
    lct_log: Vec<crate::lct::LctDebugRecord>,
    tracklet_log: Vec<TrackletRecord>,
}

impl Tracker {
    pub fn new(config: PipelineConfig) -> Self {
        Self {
            config,
            pool: TrackPool::new(),
            forest: Forest::new(),
            prev: None,
            debug_dir: None,
            lct_log: Vec::new(),
            tracklet_log: Vec::new(),
        }
    }

    /// Write per-frame flow, voting maps and JSON Lines logs under `dir`.
    pub fn with_debug_dir(mut self, dir: &Path) -> Self {
        self.debug_dir = Some(dir.to_path_buf());
        self
    }

    pub fn pool(&self) -> &TrackPool {
        &self.pool
    }

    pub fn step(&mut self, cur: &GrayFrame, detections: &[Detection]) -> Result<()> {
        let t = cur.index();
        self.step_inner(cur, detections).map_err(|e| Error::AtFrame {
            frame: t,
            source: Box::new(e),
        })
    }

    fn step_inner(&mut self, cur: &GrayFrame, detections: &[Detection]) -> Result<()> {
        let t = cur.index();
        let cfg = &self.config;
        let mut lct_results: Vec<LctResult> = Vec::new();
        if let Some(prev) = self.prev.as_ref().filter(|_| !cfg.dbt_only) {
            let art = FlowArtifacts::compute(prev, cur, &cfg.flow, cfg.grad_threshold)?;
            let (results, records) = lct_step(&self.pool, prev, cur, &art, &cfg.lct);
            lct_results = results;
            if let Some(dir) = &self.debug_dir {
                io::write_flo2(&dir.join("flow").join(format!("frame_{t:06}.flo2")), &art.flow)?;
                io::write_voting_pgm(&dir.join("votes").join(format!("frame_{t:06}.pgm")), &art.votes)?;
                self.lct_log.extend(records);
            }
        }
        grow_trees(&mut self.forest, detections, cur, &cfg.dbt);
        let tracklets = extract_tracklets(&mut self.forest, t, &cfg.dbt);
        self.associate(&tracklets, &lct_results, cur)?;
        self.prev = Some(cur.clone());
        Ok(())
    }

    fn associate(&mut self, tracklets: &[Tracklet], lct_results: &[LctResult], cur: &GrayFrame) -> Result<()> {
        let res = resolve_associations(&self.pool, tracklets, &self.config.assoc);
        if self.debug_dir.is_some() {
            self.tracklet_log.extend(tracklet_records(cur.index(), tracklets, &res));
        }
        let prev = self.prev.as_ref().filter(|p| p.index() + 1 == cur.index());
        fuse_and_update(&mut self.pool, tracklets, &res, lct_results, prev, cur, &self.config.assoc)?;
        Ok(())
    }

    /// Emit the trees still open and associate them at the last frame.
    pub fn finish(mut self) -> Result<TrackPool> {
        if let Some(last) = self.prev.take() {
            let tracklets = flush(&mut self.forest, &self.config.dbt);
            self.associate(&tracklets, &[], &last)
                .map_err(|e| Error::AtFrame {
                    frame: last.index(),
                    source: Box::new(e),
                })?;
        }
        if let Some(dir) = &self.debug_dir {
            io::write_jsonl(&dir.join("lct.jsonl"), &self.lct_log)?;
            io::write_jsonl(&dir.join("tracklets.jsonl"), &self.tracklet_log)?;
        }
        Ok(self.pool)
    }
}

/// Run the tracker over a frame sequence.
pub fn run(
    frames: &[GrayFrame],
    detections: &BTreeMap<u32, Vec<Detection>>,
    config: &PipelineConfig,
    debug_dir: Option<&Path>,
) -> Result<TrackPool> {
    let mut tracker = Tracker::new(config.clone());
    if let Some(d) = debug_dir {
        tracker = tracker.with_debug_dir(d);
    }
    for f in frames {
        let dets = detections.get(&f.index()).map_or(&[][..], Vec::as_slice);
        tracker.step(f, dets)?;
    }
    tracker.finish()
}
