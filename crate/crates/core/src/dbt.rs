//! Detection-based tracking with layered detection trees.
//!
//! Every tree starts from one detection and grows one layer per frame.
//! Each node remembers the best-scoring path that reaches it, so the
//! tracklet a tree emits is read off by walking parents from the best node
//! of its deepest layer.

use crate::lct::vector_similarity;
use crate::matching::{ncc_scan, ncc_slices, read_window};
use crate::types::{crop_patch, BBox, Detection, GrayFrame, Observation, Patch, Source, Vec2};

#[derive(Debug, Clone, PartialEq)]
pub struct DbtParams {
    pub gate: f64,
    pub window: usize,
    pub min_length: usize,
    pub merge_factor: f64,
    pub split_merged: bool,
    pub split_dilation: f64,
    pub max_children: usize,
    pub min_edge_ncc: f64,
    pub min_edge_motion: f64,
    pub phi: f64,
    pub seed_suppression: f64,
    /// Search radius, in pixels, around a same-size child when scoring
    /// appearance; absorbs detector jitter.
    pub jitter_search: i64,
    pub sigma_m: f64,
    pub sigma_theta: f64,
    pub sigma_am: f64,
    pub sigma_atheta: f64,
    pub stopped_speed: f64,
    pub accel_floor: f64,
}

impl Default for DbtParams {
    fn default() -> Self {
        Self {
            gate: 80.0,
            window: 8,
            min_length: 3,
            merge_factor: 1.5,
            split_merged: true,
            split_dilation: 2.0,
            max_children: 5,
            min_edge_ncc: 0.3,
            min_edge_motion: 1e-4,
            phi: 0.5,
            seed_suppression: 2.0,
            jitter_search: 1,
            sigma_m: 10.0,
            sigma_theta: std::f64::consts::FRAC_PI_4,
            sigma_am: 10.0,
            sigma_atheta: std::f64::consts::FRAC_PI_2,
            stopped_speed: 0.5,
            accel_floor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub detection: Detection,
    pub patch: Patch,
    pub parent: Option<usize>,
    /// Log of the product of edge scores along the best path; 0 at the root.
    pub best_path_score: f64,
    pub best_path_velocity: Option<Vec2>,
    pub children: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTree {
    pub nodes: Vec<TreeNode>,
    /// Node indices grouped by layer; layer `k` holds frame `root_frame + k`.
    pub layers: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub observations: Vec<Observation>,
    pub patches: Vec<Patch>,
    pub blob_areas: Vec<f64>,
    /// Product of edge scores along the path.
    pub score: f64,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn start(&self) -> u32 {
        self.observations[0].frame
    }

    pub fn end(&self) -> u32 {
        self.observations[self.observations.len() - 1].frame
    }

    pub fn at(&self, frame: u32) -> Option<&Observation> {
        let i = frame.checked_sub(self.start())? as usize;
        self.observations.get(i)
    }
}

impl DetectionTree {
    pub fn new(root: Detection, patch: Patch) -> Self {
        Self {
            nodes: vec![TreeNode {
                detection: root,
                patch,
                parent: None,
                best_path_score: 0.0,
                best_path_velocity: None,
                children: 0,
            }],
            layers: vec![vec![0]],
        }
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn root_frame(&self) -> u32 {
        self.nodes[0].detection.frame
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn last_frame(&self) -> u32 {
        self.root_frame() + self.layers.len() as u32 - 1
    }

    /// Attach `detection` under `parent` with edge score `edge` in `(0, 1]`.
    /// The parent must sit in the deepest layer or the one above it.
    pub fn add_child(&mut self, parent: usize, detection: Detection, patch: Patch, edge: f64) -> usize {
        let p = &self.nodes[parent];
        let frame = p.detection.frame + 1;
        let layer = (frame - self.root_frame()) as usize;
        assert!(layer <= self.layers.len(), "child layer must be contiguous");
        let node = TreeNode {
            best_path_score: p.best_path_score + edge.ln(),
            best_path_velocity: Some(detection.bbox.center() - p.detection.bbox.center()),
            detection,
            patch,
            parent: Some(parent),
            children: 0,
        };
        self.nodes[parent].children += 1;
        self.nodes.push(node);
        let idx = self.nodes.len() - 1;
        if layer == self.layers.len() {
            self.layers.push(Vec::new());
        }
        self.layers[layer].push(idx);
        idx
    }

    /// Path from the root to the best node of the deepest layer. Ties go to
    /// the earliest node in the layer.
    pub fn best_path(&self) -> (Vec<usize>, f64) {
        let last = self.layers.last().expect("tree has a root layer");
        let mut best = last[0];
        for &i in &last[1..] {
            if self.nodes[i].best_path_score > self.nodes[best].best_path_score {
                best = i;
            }
        }
        let score = self.nodes[best].best_path_score;
        let mut path = vec![best];
        while let Some(p) = self.nodes[*path.last().unwrap()].parent {
            path.push(p);
        }
        path.reverse();
        (path, score)
    }

    pub fn to_tracklet(&self) -> Tracklet {
        let (path, score) = self.best_path();
        Tracklet {
            observations: path
                .iter()
                .map(|&i| Observation::new(self.nodes[i].detection.frame, self.nodes[i].detection.bbox, Source::Detection))
                .collect(),
            patches: path.iter().map(|&i| self.nodes[i].patch.clone()).collect(),
            blob_areas: path.iter().map(|&i| self.nodes[i].detection.blob_area).collect(),
            score: score.exp(),
        }
    }
}

/// `1.5 x parent area < child area`, strictly.
pub fn detect_merged(parent_area: f64, child_area: f64, factor: f64) -> bool {
    factor * parent_area < child_area
}

/// Synthetic detections at local maxima of the parent patch inside the
/// dilated merged box.
pub fn split_merged(parent: &TreeNode, merged: &Detection, frame: &GrayFrame, p: &DbtParams) -> Vec<Detection> {
    let region = merged.bbox.dilated(p.split_dilation);
    let Ok(found) = ncc_scan(frame, &parent.patch, &region, 1, p.phi) else {
        return Vec::new();
    };
    found
        .into_iter()
        .map(|c| Detection {
            frame: merged.frame,
            bbox: c.bbox,
            blob_area: parent.detection.blob_area,
            synthetic: true,
        })
        .collect()
}

/// Best NCC of the parent patch placed around the child. A merged child is
/// searched over every placement centered inside its box; otherwise only
/// within the jitter radius of its center.
fn edge_appearance(parent: &TreeNode, child: &Detection, merged: bool, frame: &GrayFrame, p: &DbtParams) -> f64 {
    let (pw, ph) = (parent.patch.width, parent.patch.height);
    if pw > frame.width() || ph > frame.height() {
        return 0.0;
    }
    let c = child.bbox.center();
    let (rx, ry) = if merged {
        ((child.bbox.w / 2.0).floor() as i64, (child.bbox.h / 2.0).floor() as i64)
    } else {
        (p.jitter_search, p.jitter_search)
    };
    let mut buf = vec![0.0f32; pw * ph];
    let mut best = f64::NEG_INFINITY;
    for dy in -ry..=ry {
        for dx in -rx..=rx {
            let b = BBox::from_pixel_origin(0, 0, pw, ph).with_center(Vec2::new(c.x + dx as f64, c.y + dy as f64));
            let r = b.pixel_rect();
            if r.x0 < 0 || r.y0 < 0 || r.x1() > frame.width() as i64 || r.y1() > frame.height() as i64 {
                continue;
            }
            read_window(frame, r.x0, r.y0, pw, ph, &mut buf);
            best = best.max(ncc_slices(&parent.patch.data, &buf));
        }
    }
    if best == f64::NEG_INFINITY {
        0.0
    } else {
        best
    }
}

fn edge_motion(tree: &DetectionTree, parent: usize, child: &Detection, p: &DbtParams) -> f64 {
    let n = &tree.nodes[parent];
    let v_h = child.bbox.center() - n.detection.bbox.center();
    let Some(v1) = n.best_path_velocity else {
        return 1.0;
    };
    let vel = vector_similarity(v_h, v1, p.sigma_m, p.sigma_theta, p.stopped_speed);
    let acc = match n.parent.and_then(|g| tree.nodes[g].best_path_velocity) {
        Some(v0) => vector_similarity(v_h - v1, v1 - v0, p.sigma_am, p.sigma_atheta, p.accel_floor),
        None => 1.0,
    };
    vel * acc
}

/// Edge score, or `None` when the edge is gated out.
pub fn edge_score(
    tree: &DetectionTree,
    parent: usize,
    child: &Detection,
    frame: &GrayFrame,
    p: &DbtParams,
) -> Option<f64> {
    let n = &tree.nodes[parent];
    if (child.bbox.center() - n.detection.bbox.center()).norm() > p.gate {
        return None;
    }
    let merged = detect_merged(n.detection.blob_area, child.blob_area, p.merge_factor);
    let app = edge_appearance(n, child, merged, frame, p);
    if app <= p.min_edge_ncc {
        return None;
    }
    let mot = edge_motion(tree, parent, child, p);
    if mot <= p.min_edge_motion {
        return None;
    }
    Some(app * mot)
}

struct Candidate {
    parent: usize,
    detection: Detection,
    edge: f64,
    score: f64,
    /// Index into the frame's detection list, for adoption bookkeeping.
    source: Option<usize>,
}

/// The set of live detection trees.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Forest {
    pub trees: Vec<DetectionTree>,
}

impl Forest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }
}

fn grow_one(tree: &mut DetectionTree, detections: &[Detection], frame: &GrayFrame, p: &DbtParams, adopted: &mut [bool]) {
    let t = frame.index();
    if tree.last_frame() + 1 != t {
        return;
    }
    let leaves = tree.layers.last().unwrap().clone();
    let mut cands: Vec<Candidate> = Vec::new();
    for (di, d) in detections.iter().enumerate() {
        let mut best: Option<Candidate> = None;
        for &n in &leaves {
            if let Some(e) = edge_score(tree, n, d, frame, p) {
                let s = tree.nodes[n].best_path_score + e.ln();
                if best.as_ref().map_or(true, |b| s > b.score) {
                    best = Some(Candidate {
                        parent: n,
                        detection: *d,
                        edge: e,
                        score: s,
                        source: Some(di),
                    });
                }
            }
        }
        cands.extend(best);
    }
    if p.split_merged {
        for &n in &leaves {
            for d in detections {
                let node = &tree.nodes[n];
                if (d.bbox.center() - node.detection.bbox.center()).norm() > p.gate
                    || !detect_merged(node.detection.blob_area, d.blob_area, p.merge_factor)
                {
                    continue;
                }
                for s in split_merged(node, d, frame, p) {
                    if let Some(e) = edge_score(tree, n, &s, frame, p) {
                        let score = tree.nodes[n].best_path_score + e.ln();
                        let dup = cands.iter_mut().find(|c| {
                            c.detection.synthetic
                                && (c.detection.bbox.center() - s.bbox.center()).norm() < p.seed_suppression
                        });
                        match dup {
                            Some(c) if c.score >= score => {}
                            Some(c) => {
                                *c = Candidate {
                                    parent: n,
                                    detection: s,
                                    edge: e,
                                    score,
                                    source: None,
                                }
                            }
                            None => cands.push(Candidate {
                                parent: n,
                                detection: s,
                                edge: e,
                                score,
                                source: None,
                            }),
                        }
                    }
                }
            }
        }
    }
    // keep each parent's best children, in candidate order
    let mut keep = vec![true; cands.len()];
    for &n in &leaves {
        let mut mine: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].parent == n).collect();
        mine.sort_by(|&a, &b| cands[b].score.total_cmp(&cands[a].score).then(a.cmp(&b)));
        for &i in mine.iter().skip(p.max_children) {
            keep[i] = false;
        }
    }
    for (c, k) in cands.into_iter().zip(keep) {
        if !k {
            continue;
        }
        let Ok(patch) = crop_patch(frame, &c.detection.bbox) else {
            continue;
        };
        if let Some(di) = c.source {
            adopted[di] = true;
        }
        tree.add_child(c.parent, c.detection, patch, c.edge);
    }
}

/// Extend every tree by the detections of `frame` and seed new trees from
/// detections no tree adopted.
pub fn grow_trees(forest: &mut Forest, detections: &[Detection], frame: &GrayFrame, p: &DbtParams) {
    let mut adopted = vec![false; detections.len()];
    for tree in &mut forest.trees {
        grow_one(tree, detections, frame, p, &mut adopted);
    }
    let mut seeds: Vec<Vec2> = Vec::new();
    for (d, a) in detections.iter().zip(adopted) {
        if a {
            continue;
        }
        let c = d.bbox.center();
        if seeds.iter().any(|s| (*s - c).norm() < p.seed_suppression) {
            continue;
        }
        if let Ok(patch) = crop_patch(frame, &d.bbox) {
            seeds.push(c);
            forest.trees.push(DetectionTree::new(*d, patch));
        }
    }
}

/// Emit tracklets from trees that filled the window or stopped growing at
/// `current_frame`; those trees leave the forest. Stalled trees shorter than
/// the minimum length are dropped silently.
pub fn extract_tracklets(forest: &mut Forest, current_frame: u32, p: &DbtParams) -> Vec<Tracklet> {
    let mut out = Vec::new();
    forest.trees.retain(|tree| {
        let full = tree.depth() >= p.window;
        let stalled = tree.last_frame() < current_frame;
        if full || (stalled && tree.depth() >= p.min_length) {
            out.push(tree.to_tracklet());
            return false;
        }
        !stalled
    });
    out
}

/// Emit every remaining tree long enough to form a tracklet.
pub fn flush(forest: &mut Forest, p: &DbtParams) -> Vec<Tracklet> {
    let out = forest
        .trees
        .iter()
        .filter(|t| t.depth() >= p.min_length)
        .map(DetectionTree::to_tracklet)
        .collect();
    forest.trees.clear();
    out
}
