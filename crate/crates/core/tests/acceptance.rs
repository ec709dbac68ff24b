//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use lctrack::lct::{optimize, HypothesisGraph, NeighborNodes};
use lctrack::matching::ncc;
use lctrack::metrics::evaluate;
use lctrack::rng::SplitMix64;
use lctrack::types::{BBox, Observation, Patch, Source, Track};
use tempfile::TempDir;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Oracles

/// Enumerate every joint selection in lexicographic order, keeping the first
/// strict maximum.
fn brute_force(g: &HypothesisGraph) -> (Vec<usize>, f64) {
    let mut sizes = vec![g.target_unary.len()];
    sizes.extend(g.neighbors.iter().map(|n| n.unary.len()));
    let mut idx = vec![0usize; sizes.len()];
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let i = idx[0];
        let mut o = g.lambda * g.target_unary[i];
        for (n, &k) in g.neighbors.iter().zip(&idx[1..]) {
            o += g.lambda * n.unary[k] + n.binary[i][k];
        }
        if best.as_ref().map_or(true, |b| o > b.1) {
            best = Some((idx.clone(), o));
        }
        let mut d = sizes.len();
        loop {
            if d == 0 {
                return best.expect("at least one selection");
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < sizes[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn random_graph(rng: &mut SplitMix64) -> HypothesisGraph {
    let size = |rng: &mut SplitMix64| 1 + (rng.next_u64() % 5) as usize;
    let sets = size(rng);
    let n_t = size(rng);
    let target_unary = (0..n_t).map(|_| rng.next_f64()).collect();
    let neighbors = (1..sets)
        .map(|_| {
            let k = size(rng);
            NeighborNodes {
                unary: (0..k).map(|_| rng.next_f64()).collect(),
                binary: (0..n_t).map(|_| (0..k).map(|_| rng.next_f64()).collect()).collect(),
            }
        })
        .collect();
    HypothesisGraph {
        target_unary,
        neighbors,
        lambda: 3.0,
    }
}

/// Textbook single-pass NCC over raw sums.
fn ncc_direct(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let (mut sa, mut sb, mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        sa += x;
        sb += y;
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    let num = n * sab - sa * sb;
    let den = ((n * saa - sa * sa) * (n * sbb - sb * sb)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn random_patch(rng: &mut SplitMix64) -> Patch {
    let data = (0..64).map(|_| (rng.next_u64() % 256) as f32).collect();
    Patch::new(8, 8, data).unwrap()
}

fn obs(frame: u32, x: f64, y: f64) -> Observation {
    Observation::new(frame, BBox::new(x, y, 12.0, 6.0).unwrap(), Source::Detection)
}

fn track(id: u64, pts: &[(u32, f64, f64)]) -> Track {
    Track::new(id, pts.iter().map(|&(f, x, y)| obs(f, x, y)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Library criteria

fn dp_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = SplitMix64::new(2024);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let g = random_graph(&mut rng);
        let sel = optimize(&g).map_err(|e| e.to_string())?;
        let (oracle, value) = brute_force(&g);
        let mut got = vec![sel.target];
        got.extend(sel.neighbors.iter().map(|k| k.expect("neighbor sets are non-empty")));
        if got != oracle || (sel.objective - value).abs() > 1e-9 {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatches == 0 && secs < 5.0,
        format!("{mismatches} mismatches in 1000 graphs, {secs:.2} s"),
    )
}

fn ncc_correctness() -> Outcome {
    let mut rng = SplitMix64::new(7);
    let mut worst_self = 0.0f64;
    let mut worst_gain = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for i in 0..10_000 {
        let a = random_patch(&mut rng);
        let b = random_patch(&mut rng);
        worst_self = worst_self.max((ncc(&a, &a).unwrap() - 1.0).abs());
        // gains and offsets that stay exact in f32
        let gain = [0.5f32, 2.0, 3.0, 7.25][i % 4];
        let offset = (i % 50) as f32;
        let scaled = Patch::new(8, 8, a.data.iter().map(|v| gain * v + offset).collect()).unwrap();
        worst_gain = worst_gain.max((ncc(&scaled, &b).unwrap() - ncc(&a, &b).unwrap()).abs());
        worst_oracle = worst_oracle.max((ncc(&a, &b).unwrap() - ncc_direct(&a.data, &b.data)).abs());
    }
    check(
        worst_self <= 1e-9 && worst_gain <= 1e-9 && worst_oracle <= 1e-9,
        format!("max errors: self {worst_self:.1e}, gain {worst_gain:.1e}, oracle {worst_oracle:.1e} over 10000 pairs"),
    )
}

fn metrics_oracle() -> Outcome {
    // GT A and B, five frames each, far apart.
    let a: Vec<_> = (0..5).map(|f| (f, 20.0 + 4.0 * f as f64, 20.0)).collect();
    let b: Vec<_> = (0..5).map(|f| (f, 20.0 + 4.0 * f as f64, 80.0)).collect();
    let gt = vec![track(0, &a), track(1, &b)];
    // P follows A for three frames then jumps to B: one swap. Q covers the
    // start of B. A's last two frames are missed. R is one false positive.
    let p = track(10, &[a[0], a[1], a[2], b[3], b[4]]);
    let q = track(11, &b[..3]);
    let r = track(12, &[(2, 200.0, 200.0)]);
    let m = evaluate(&gt, &[p, q, r]).map_err(|e| e.to_string())?;
    let id = evaluate(&gt, &gt).map_err(|e| e.to_string())?;
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-9;
    let worked = close(m.recall, 0.8)
        && close(m.precision, 8.0 / 9.0)
        && close(m.moda, 0.7)
        && close(m.mota, 0.6)
        && m.swaps == 1;
    let identity = [id.recall, id.precision, id.moda, id.mota].iter().all(|&v| close(v, 1.0))
        && id.swaps == 0
        && id.breaks == 0;
    check(
        worked && identity,
        format!(
            "worked example recall {:.3} precision {:.6} MODA {:.3} MOTA {:.3} swaps {}; identity {}",
            m.recall,
            m.precision,
            m.moda,
            m.mota,
            m.swaps,
            if identity { "all 1" } else { "not all 1" }
        ),
    )
}

// ---------------------------------------------------------------------------
// Scenario criteria, driven through the command-line tool

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.cfg"))
}

fn lctrack(args: &[&str], env: &[(&str, &str)]) -> Result<Duration, String> {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_lctrack"))
        .args(args)
        .envs(env.iter().copied())
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("lctrack {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(start.elapsed())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// A simulated scenario on disk.
struct Scene {
    dir: PathBuf,
}

impl Scene {
    fn simulate(root: &Path, cfg: &Path, seed: Option<u64>) -> Result<Self, String> {
        let tag = seed.map_or("default".to_string(), |s| s.to_string());
        let dir = root.join(format!("{}-{tag}", cfg.file_stem().unwrap().to_string_lossy()));
        let seed_arg = seed.map(|s| s.to_string());
        let mut args = vec!["simulate"];
        if let Some(sa) = &seed_arg {
            args.extend(["--seed", sa]);
        }
        args.extend([s(cfg), s(&dir)]);
        lctrack(&args, &[])?;
        Ok(Self { dir })
    }

    /// Track with extra flags and evaluate. Returns the metrics, the tracks
    /// file and the tracking wall time.
    fn track(&self, name: &str, flags: &[&str]) -> Result<(serde_json::Value, PathBuf, Duration), String> {
        let out = self.dir.join(format!("{name}.csv"));
        let mut args = vec!["track"];
        args.extend_from_slice(flags);
        let (frames, dets) = (self.dir.join("frames"), self.dir.join("detections.csv"));
        args.extend([s(&frames), s(&dets), s(&out)]);
        let took = lctrack(&args, &[])?;
        lctrack(&["eval", s(&self.dir.join("gt.csv")), s(&out)], &[])?;
        let json = fs::read_to_string(self.dir.join(format!("{name}.metrics.json"))).map_err(|e| e.to_string())?;
        let report = serde_json::from_str(&json).map_err(|e| e.to_string())?;
        Ok((report, out, took))
    }

    fn config(&self, name: &str, body: &str) -> Result<PathBuf, String> {
        let p = self.dir.join(name);
        fs::write(&p, body).map_err(|e| e.to_string())?;
        Ok(p)
    }
}

fn count(m: &serde_json::Value, key: &str) -> u64 {
    m[key].as_u64().unwrap_or(u64::MAX)
}

/// Observations whose area exceeds 1.5 times their track's median area.
fn oversize_observations(tracks: &Path) -> Result<usize, String> {
    let tracks = lctrack::io::read_tracks(tracks).map_err(|e| e.to_string())?;
    let mut n = 0;
    for t in &tracks {
        let mut areas: Vec<f64> = t.observations().iter().map(|o| o.bbox.area()).collect();
        areas.sort_by(f64::total_cmp);
        let k = areas.len();
        let median = if k % 2 == 1 { areas[k / 2] } else { 0.5 * (areas[k / 2 - 1] + areas[k / 2]) };
        n += areas.iter().filter(|&&a| a > 1.5 * median).count();
    }
    Ok(n)
}

fn stop_go(root: &Path) -> Outcome {
    let start = Instant::now();
    let scene = Scene::simulate(root, &scenario("stop_go"), None)?;
    let (full, _, _) = scene.track("full", &[])?;
    let (dbt, _, _) = scene.track("dbt", &["--dbt-only"])?;
    let secs = start.elapsed().as_secs_f64();
    let recall = full["recall"].as_f64().unwrap_or(0.0);
    check(
        count(&full, "breaks") == 0 && recall >= 0.95 && count(&dbt, "breaks") >= 1 && secs < 30.0,
        format!(
            "full: breaks {} recall {recall:.3}; dbt-only: breaks {}; {secs:.1} s",
            count(&full, "breaks"),
            count(&dbt, "breaks")
        ),
    )
}

fn merged_detections(root: &Path) -> Outcome {
    let start = Instant::now();
    let scene = Scene::simulate(root, &scenario("near_pass_merge"), None)?;
    let nosplit = scene.config("nosplit.cfg", "split_merged = false\n")?;
    let (split, split_tracks, _) = scene.track("split", &["--dbt-only"])?;
    let (plain, plain_tracks, _) = scene.track("nosplit", &["--dbt-only", "--config", s(&nosplit)])?;
    let secs = start.elapsed().as_secs_f64();
    let (big_split, big_plain) = (oversize_observations(&split_tracks)?, oversize_observations(&plain_tracks)?);
    let with_split = count(&split, "swaps") == 0 && big_split == 0;
    let without = count(&plain, "swaps") >= 1 || big_plain >= 1;
    check(
        with_split && without && secs < 30.0,
        format!(
            "split: swaps {} oversize {big_split}; no split: swaps {} oversize {big_plain}; {secs:.1} s",
            count(&split, "swaps"),
            count(&plain, "swaps")
        ),
    )
}

fn context_discrimination(root: &Path) -> Outcome {
    let cfg = scenario("convoy");
    let scene = Scene::simulate(root, &cfg, None)?;
    let (full, _, took) = scene.track("full", &[])?;
    let secs = took.as_secs_f64();
    let mut swapped = 0;
    for seed in 0..10 {
        let scene = Scene::simulate(root, &cfg, Some(seed))?;
        let nob = scene.config("nob.cfg", "binary_term = false\n")?;
        let (m, _, _) = scene.track("nob", &["--config", s(&nob)])?;
        if count(&m, "swaps") >= 1 {
            swapped += 1;
        }
    }
    check(
        count(&full, "swaps") == 0 && swapped >= 3 && secs < 60.0,
        format!(
            "full: swaps {} in {secs:.1} s; without binary term: swaps on {swapped}/10 seeds",
            count(&full, "swaps")
        ),
    )
}

fn turning(root: &Path) -> Outcome {
    let scene = Scene::simulate(root, &scenario("turning"), None)?;
    let rot0 = scene.config("rot0.cfg", "rotation_set = 0\n")?;
    let (var, _, _) = scene.track("variants", &[])?;
    let (zero, _, _) = scene.track("rot0", &["--config", s(&rot0)])?;
    check(
        count(&var, "breaks") == 0 && count(&zero, "breaks") >= 1,
        format!(
            "rotation variants: breaks {}; 0 degrees only: breaks {}",
            count(&var, "breaks"),
            count(&zero, "breaks")
        ),
    )
}

fn determinism(root: &Path) -> Outcome {
    let threads = std::thread::available_parallelism().map_or(8, |n| n.get()).max(8).to_string();
    let mut runs = Vec::new();
    for (tag, n) in [("a", "1"), ("b", threads.as_str())] {
        let dir = root.join(format!("det-{tag}"));
        let env = [("RAYON_NUM_THREADS", n)];
        lctrack(&["simulate", "--seed", "11", s(&scenario("turning")), s(&dir)], &env)?;
        let tracks = dir.join("tracks.csv");
        lctrack(
            &[
                "track",
                "--dump-debug",
                s(&dir.join("frames")),
                s(&dir.join("detections.csv")),
                s(&tracks),
            ],
            &env,
        )?;
        lctrack(&["eval", s(&dir.join("gt.csv")), s(&tracks)], &env)?;
        runs.push(dir);
    }
    let files = [
        "detections.csv",
        "gt.csv",
        "tracks.csv",
        "tracks.metrics.json",
        "tracks_debug/lct.jsonl",
        "tracks_debug/tracklets.jsonl",
    ];
    let mut differing = Vec::new();
    for f in files {
        let a = fs::read(runs[0].join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = fs::read(runs[1].join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b {
            differing.push(f);
        }
    }
    check(
        differing.is_empty(),
        format!(
            "{} files compared across 1 and {threads} worker threads, differing: {differing:?}",
            files.len()
        ),
    )
}

/// Twenty vehicles in ten lanes of alternating direction, in two waves.
fn throughput_scene() -> String {
    let mut text = String::from("width = 512\nheight = 512\nframes = 100\n");
    for lane in 0..10 {
        let y = 24 + 48 * lane;
        for start in [0, 40] {
            if lane % 2 == 0 {
                text += &format!("vehicle = 20,{y} start {start} | move 8,0 x59\n");
            } else {
                text += &format!("vehicle = 492,{y} start {start} | move -8,0 x59\n");
            }
        }
    }
    text
}

fn throughput(root: &Path) -> Outcome {
    let cfg = root.join("throughput.cfg");
    fs::write(&cfg, throughput_scene()).map_err(|e| e.to_string())?;
    let scene = Scene::simulate(root, &cfg, None)?;
    let (full, _, t_full) = scene.track("full", &[])?;
    let (_, _, t_dbt) = scene.track("dbt", &["--dbt-only"])?;
    let (full_s, dbt_s) = (t_full.as_secs_f64(), t_dbt.as_secs_f64());
    check(
        full_s < 120.0 && 2.0 * dbt_s <= full_s,
        format!(
            "full {full_s:.1} s (recall {:.3}), dbt-only {dbt_s:.2} s, ratio {:.0}x",
            full["recall"].as_f64().unwrap_or(0.0),
            full_s / dbt_s.max(1e-9)
        ),
    )
}

fn main() {
    let root = TempDir::new().expect("temporary directory");
    let root = root.path();
    let criteria: [(&str, &dyn Fn() -> Outcome); 9] = [
        ("DP optimality", &dp_optimality),
        ("NCC correctness", &ncc_correctness),
        ("stop-then-go recovery", &|| stop_go(root)),
        ("merged-detection handling", &|| merged_detections(root)),
        ("context discrimination", &|| context_discrimination(root)),
        ("turning target", &|| turning(root)),
        ("metrics oracle", &metrics_oracle),
        ("determinism", &|| determinism(root)),
        ("throughput", &|| throughput(root)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {}: {tag} {name}: {detail}", i + 1);
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
