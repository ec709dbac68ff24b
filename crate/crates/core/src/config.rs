//! Pipeline configuration read from flat `key = value` files.

use std::path::Path;

use crate::association::AssocParams;
use crate::dbt::DbtParams;
use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::lct::LctParams;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub flow: FlowParams,
    /// Flow-gradient magnitude above which a pixel votes (px/frame).
    pub grad_threshold: f64,
    pub lct: LctParams,
    pub dbt: DbtParams,
    pub assoc: AssocParams,
    /// Skip flow and LCT entirely.
    pub dbt_only: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            flow: FlowParams::default(),
            grad_threshold: 1.0,
            lct: LctParams::default(),
            dbt: DbtParams::default(),
            assoc: AssocParams::default(),
            dbt_only: false,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

impl PipelineConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            c.set_line(line).map_err(|m| Error::parse(origin, i + 1, m))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn set_line(&mut self, line: &str) -> std::result::Result<(), String> {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("expected `key = value`, got `{line}`"))?;
        let (k, v) = (k.trim(), v.trim());
        let f = || v.parse::<f64>().map_err(|_| format!("bad number for `{k}`: `{v}`"));
        let u = || v.parse::<usize>().map_err(|_| format!("bad integer for `{k}`: `{v}`"));
        let b = || parse_bool(v).ok_or_else(|| format!("bad boolean for `{k}`: `{v}`"));
        match k {
            "flow_levels" => self.flow.levels = u()?,
            "flow_window" => self.flow.window = u()?,
            "flow_iterations" => self.flow.iterations = u()?,
            "grad_threshold" => self.grad_threshold = f()?,
            "phi" => {
                self.lct.phi = f()?;
                self.dbt.phi = self.lct.phi;
            }
            "lambda" => self.lct.lambda = f()?,
            "alpha" => self.lct.alpha = f()?,
            "beta" => self.lct.beta = f()?,
            "neighbor_radius" => self.lct.neighbor_radius = f()?,
            "neighbor_angle_deg" => self.lct.neighbor_angle_deg = f()?,
            "stopped_speed" => {
                self.lct.stopped_speed = f()?;
                self.dbt.stopped_speed = self.lct.stopped_speed;
            }
            "accel_floor" => {
                self.lct.accel_floor = f()?;
                self.dbt.accel_floor = self.lct.accel_floor;
            }
            "search_window" => self.lct.search_window = u()?,
            "sparse_window" => self.lct.sparse_window = u()?,
            "sparse_iterations" => self.lct.sparse_iterations = u()?,
            "fb_threshold" => self.lct.fb_threshold = f()?,
            "vote_fraction" => self.lct.vote_fraction = f()?,
            "sparse_fraction" => self.lct.sparse_fraction = f()?,
            "sigma_m" => {
                self.lct.sigma_m = f()?;
                self.dbt.sigma_m = self.lct.sigma_m;
            }
            "sigma_theta" => {
                self.lct.sigma_theta = f()?;
                self.dbt.sigma_theta = self.lct.sigma_theta;
            }
            "sigma_am" => {
                self.lct.sigma_am = f()?;
                self.dbt.sigma_am = self.lct.sigma_am;
            }
            "sigma_atheta" => {
                self.lct.sigma_atheta = f()?;
                self.dbt.sigma_atheta = self.lct.sigma_atheta;
            }
            "binary_term" => self.lct.binary_term = b()?,
            "gate" => self.dbt.gate = f()?,
            "dbt_window" => self.dbt.window = u()?,
            "min_tracklet_length" => self.dbt.min_length = u()?,
            "merge_factor" => self.dbt.merge_factor = f()?,
            "split_merged" => self.dbt.split_merged = b()?,
            "split_dilation" => self.dbt.split_dilation = f()?,
            "max_children" => self.dbt.max_children = u()?,
            "min_edge_ncc" => self.dbt.min_edge_ncc = f()?,
            "min_edge_motion" => self.dbt.min_edge_motion = f()?,
            "seed_suppression" => self.dbt.seed_suppression = f()?,
            "jitter_search" => self.dbt.jitter_search = u()? as i64,
            "zeta" => self.assoc.zeta = f()?,
            "sigma_v" => self.assoc.sigma_v = f()?,
            "gap_decay" => self.assoc.gap_decay = f()?,
            "max_gap" => self.assoc.max_gap = u()? as u32,
            "termination_misses" => self.assoc.termination_misses = u()? as u32,
            "rotation_set" => {
                self.assoc.rotations = v
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| format!("bad rotation list `{v}`"))?;
            }
            "dbt_only" => self.dbt_only = b()?,
            _ => return Err(format!("unknown key `{k}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        let unit = [
            ("phi", self.lct.phi),
            ("zeta", self.assoc.zeta),
            ("vote_fraction", self.lct.vote_fraction),
            ("sparse_fraction", self.lct.sparse_fraction),
            ("min_edge_ncc", self.dbt.min_edge_ncc),
        ];
        for (k, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{k} must lie in [0, 1], got {v}"));
            }
        }
        let non_negative = [
            ("lambda", self.lct.lambda),
            ("alpha", self.lct.alpha),
            ("beta", self.lct.beta),
            ("grad_threshold", self.grad_threshold),
            ("fb_threshold", self.lct.fb_threshold),
            ("stopped_speed", self.lct.stopped_speed),
            ("accel_floor", self.lct.accel_floor),
            ("gap_decay", self.assoc.gap_decay),
            ("min_edge_motion", self.dbt.min_edge_motion),
            ("seed_suppression", self.dbt.seed_suppression),
            ("split_dilation", self.dbt.split_dilation),
        ];
        for (k, v) in non_negative {
            if !(v >= 0.0) {
                return fail(format!("{k} must be non-negative, got {v}"));
            }
        }
        let positive = [
            ("neighbor_radius", self.lct.neighbor_radius),
            ("neighbor_angle_deg", self.lct.neighbor_angle_deg),
            ("sigma_m", self.lct.sigma_m),
            ("sigma_theta", self.lct.sigma_theta),
            ("sigma_am", self.lct.sigma_am),
            ("sigma_atheta", self.lct.sigma_atheta),
            ("sigma_v", self.assoc.sigma_v),
            ("gate", self.dbt.gate),
            ("merge_factor", self.dbt.merge_factor),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return fail(format!("{k} must be positive, got {v}"));
            }
        }
        if self.flow.levels == 0 || self.flow.iterations == 0 || self.flow.window < 3 || self.flow.window % 2 == 0 {
            return fail("flow needs levels >= 1, iterations >= 1 and an odd window >= 3".into());
        }
        if self.lct.sparse_window < 3 || self.lct.sparse_window % 2 == 0 || self.lct.sparse_iterations == 0 {
            return fail("sparse_window must be odd and >= 3, sparse_iterations >= 1".into());
        }
        if self.lct.search_window == 0 {
            return fail("search_window must be positive".into());
        }
        if self.dbt.window < 2 || self.dbt.min_length == 0 || self.dbt.min_length > self.dbt.window {
            return fail("need dbt_window >= 2 and 1 <= min_tracklet_length <= dbt_window".into());
        }
        if self.dbt.max_children == 0 || self.assoc.termination_misses == 0 {
            return fail("max_children and termination_misses must be positive".into());
        }
        if self.assoc.rotations.is_empty() || self.assoc.rotations.iter().any(|r| !r.is_finite()) {
            return fail("rotation_set must be a non-empty list of finite angles".into());
        }
        Ok(())
    }
}
