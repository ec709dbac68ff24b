//! Normalized cross-correlation, template scanning and non-maximum suppression.

use crate::error::{Error, Result};
use crate::types::{BBox, GrayFrame, Patch, TemplateSet};

/// A scored template placement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCandidate {
    pub bbox: BBox,
    pub score: f64,
    pub best_variant: Option<usize>,
}

/// Zero-mean normalized cross-correlation. Flat patches score 0.
pub fn ncc(a: &Patch, b: &Patch) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::DimensionMismatch(format!(
            "ncc of {}x{} and {}x{} patches",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(ncc_slices(&a.data, &b.data))
}

pub(crate) fn ncc_slices(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let (mut sa, mut sb) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        sa += x as f64;
        sb += y as f64;
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut sab, mut saa, mut sbb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 1e-9 || sbb <= 1e-9 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Maximum NCC over the rotation variants; ties go to the lowest index.
pub fn best_variant_score(patch: &Patch, templates: &TemplateSet) -> Result<(f64, usize)> {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, v) in templates.variants.iter().enumerate() {
        let s = ncc(patch, v)?;
        if s > best.0 {
            best = (s, i);
        }
    }
    if best.0 == f64::NEG_INFINITY {
        return Err(Error::DimensionMismatch("empty template set".into()));
    }
    Ok(best)
}

/// Scan `template` over `region` and return strict 8-neighbourhood local
/// maxima whose score exceeds `phi`.
pub fn ncc_scan(
    frame: &GrayFrame,
    template: &Patch,
    region: &BBox,
    stride: usize,
    phi: f64,
) -> Result<Vec<ScoredCandidate>> {
    let stride = stride.max(1) as i64;
    let r = region.pixel_rect();
    let x_lo = r.x0.max(0);
    let y_lo = r.y0.max(0);
    let x_hi = r.x1().min(frame.width() as i64) - template.width as i64;
    let y_hi = r.y1().min(frame.height() as i64) - template.height as i64;
    if x_hi < x_lo || y_hi < y_lo {
        return Err(Error::RegionTooSmall);
    }
    let nx = ((x_hi - x_lo) / stride + 1) as usize;
    let ny = ((y_hi - y_lo) / stride + 1) as usize;
    let mut scores = vec![0.0f64; nx * ny];
    let mut buf = vec![0.0f32; template.data.len()];
    for j in 0..ny {
        for i in 0..nx {
            let x0 = x_lo + i as i64 * stride;
            let y0 = y_lo + j as i64 * stride;
            read_window(frame, x0, y0, template.width, template.height, &mut buf);
            scores[j * nx + i] = ncc_slices(&template.data, &buf);
        }
    }
    let mut out = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let s = scores[j * nx + i];
            if s <= phi {
                continue;
            }
            let mut is_max = true;
            'nb: for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ii, jj) = (i as i64 + di, j as i64 + dj);
                    if ii < 0 || jj < 0 || ii >= nx as i64 || jj >= ny as i64 {
                        continue;
                    }
                    if scores[jj as usize * nx + ii as usize] >= s {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                let x0 = x_lo + i as i64 * stride;
                let y0 = y_lo + j as i64 * stride;
                out.push(ScoredCandidate {
                    bbox: BBox::from_pixel_origin(x0, y0, template.width, template.height),
                    score: s,
                    best_variant: None,
                });
            }
        }
    }
    Ok(out)
}

/// Copy a window that lies inside the frame into `buf`.
#[inline]
pub(crate) fn read_window(frame: &GrayFrame, x0: i64, y0: i64, w: usize, h: usize, buf: &mut [f32]) {
    let data = frame.data();
    let fw = frame.width();
    for y in 0..h {
        let row = (y0 as usize + y) * fw + x0 as usize;
        for (dst, &src) in buf[y * w..(y + 1) * w].iter_mut().zip(&data[row..row + w]) {
            *dst = src as f32;
        }
    }
}

fn nms_order(a: &ScoredCandidate, b: &ScoredCandidate) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
}

/// Greedy suppression: keep the best remaining candidate, drop every other
/// candidate whose center lies within `radius` of it.
pub fn non_max_suppression(mut candidates: Vec<ScoredCandidate>, radius: f64) -> Vec<ScoredCandidate> {
    candidates.sort_by(nms_order);
    let mut kept: Vec<ScoredCandidate> = Vec::new();
    for c in candidates {
        if kept
            .iter()
            .all(|k| (k.bbox.center() - c.bbox.center()).norm() > radius)
        {
            kept.push(c);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_patch(rng: &mut SplitMix64, w: usize, h: usize) -> Patch {
        Patch::new(w, h, (0..w * h).map(|_| (rng.next_u64() % 256) as f32).collect()).unwrap()
    }

    fn noise_frame(seed: u64, w: usize, h: usize) -> GrayFrame {
        let mut rng = SplitMix64::new(seed);
        GrayFrame::new(w, h, (0..w * h).map(|_| (rng.next_u64() % 256) as u8).collect(), 0).unwrap()
    }

    fn plant(frame: &mut GrayFrame, p: &Patch, x0: usize, y0: usize) {
        for y in 0..p.height {
            for x in 0..p.width {
                frame.set(x0 + x, y0 + y, p.at(x, y) as u8);
            }
        }
    }

    /// Direct summation with population standard deviations.
    fn ncc_oracle(a: &Patch, b: &Patch) -> f64 {
        let n = a.data.len() as f64;
        let ma = a.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mb = b.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let sa = (a.data.iter().map(|&v| (v as f64 - ma).powi(2)).sum::<f64>() / n).sqrt();
        let sb = (b.data.iter().map(|&v| (v as f64 - mb).powi(2)).sum::<f64>() / n).sqrt();
        let cross: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| (x as f64 - ma) * (y as f64 - mb))
            .sum();
        cross / (sa * sb * n)
    }

    #[test]
    fn self_and_affine_correlation() {
        let mut rng = SplitMix64::new(3);
        let p = random_patch(&mut rng, 8, 8);
        assert!((ncc(&p, &p).unwrap() - 1.0).abs() < 1e-12);
        let q = Patch::new(8, 8, p.data.iter().map(|v| 0.5 * v + 17.0).collect()).unwrap();
        assert!((ncc(&p, &q).unwrap() - 1.0).abs() < 1e-9);
        let neg = Patch::new(8, 8, p.data.iter().map(|v| 255.0 - v).collect()).unwrap();
        assert!((ncc(&p, &neg).unwrap() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn seeded_pair_matches_oracle() {
        let mut rng = SplitMix64::new(11);
        let a = random_patch(&mut rng, 8, 8);
        let b = random_patch(&mut rng, 8, 8);
        assert!((ncc(&a, &b).unwrap() - ncc_oracle(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn flat_patch_scores_zero() {
        let flat = Patch::new(4, 4, vec![9.0; 16]).unwrap();
        let mut rng = SplitMix64::new(5);
        let p = random_patch(&mut rng, 4, 4);
        assert_eq!(ncc(&flat, &p).unwrap(), 0.0);
        assert_eq!(ncc(&flat, &flat).unwrap(), 0.0);
    }

    #[test]
    fn ncc_dimension_mismatch() {
        let a = Patch::new(4, 4, vec![0.0; 16]).unwrap();
        let b = Patch::new(4, 2, vec![0.0; 8]).unwrap();
        assert!(matches!(ncc(&a, &b), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn scan_finds_single_plant() {
        let mut frame = noise_frame(21, 64, 48);
        let mut rng = SplitMix64::new(99);
        let t = random_patch(&mut rng, 12, 10);
        plant(&mut frame, &t, 30, 20);
        let region = BBox::new(32.0, 24.0, 40.0, 30.0).unwrap();
        let found = ncc_scan(&frame, &t, &region, 1, 0.5).unwrap();
        assert_eq!(found.len(), 1);
        let r = found[0].bbox.pixel_rect();
        assert_eq!((r.x0, r.y0), (30, 20));
        assert!(found[0].score > 0.99);
    }

    #[test]
    fn scan_finds_two_plants() {
        let mut frame = noise_frame(8, 80, 40);
        let mut rng = SplitMix64::new(100);
        let t = random_patch(&mut rng, 12, 10);
        plant(&mut frame, &t, 20, 15);
        plant(&mut frame, &t, 40, 15);
        let region = BBox::new(40.0, 20.0, 70.0, 30.0).unwrap();
        let mut found = ncc_scan(&frame, &t, &region, 1, 0.5).unwrap();
        found.sort_by(|a, b| a.bbox.cx.total_cmp(&b.bbox.cx));
        assert_eq!(found.len(), 2);
        assert!((found[0].bbox.cx - 26.0).abs() <= 1.0);
        assert!((found[1].bbox.cx - 46.0).abs() <= 1.0);
        assert!((found[0].bbox.cy - 20.0).abs() <= 1.0);
    }

    #[test]
    fn scan_on_constant_frame_is_empty() {
        let frame = GrayFrame::filled(40, 40, 77, 0);
        let mut rng = SplitMix64::new(1);
        let t = random_patch(&mut rng, 6, 6);
        let found = ncc_scan(&frame, &t, &BBox::new(20.0, 20.0, 30.0, 30.0).unwrap(), 1, 0.5).unwrap();
        assert!(found.is_empty());
    }

    #[test]
    fn scan_region_too_small() {
        let frame = GrayFrame::filled(40, 40, 77, 0);
        let t = Patch::new(10, 10, vec![0.0; 100]).unwrap();
        let r = ncc_scan(&frame, &t, &BBox::new(20.0, 20.0, 6.0, 6.0).unwrap(), 1, 0.5);
        assert!(matches!(r, Err(Error::RegionTooSmall)));
    }

    #[test]
    fn variant_scoring() {
        let mut rng = SplitMix64::new(12);
        let base = random_patch(&mut rng, 9, 9);
        let set = TemplateSet::new(base.clone());
        let (s, i) = best_variant_score(&base, &set).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(i, 3);

        let turned = base.rotated(30.0);
        let (_, i) = best_variant_score(&turned, &set).unwrap();
        assert_eq!(set.angles[i], 30.0);

        let flat = Patch::new(9, 9, vec![3.0; 81]).unwrap();
        assert_eq!(best_variant_score(&flat, &set).unwrap(), (0.0, 0));
    }

    fn cand(cx: f64, cy: f64, score: f64) -> ScoredCandidate {
        ScoredCandidate {
            bbox: BBox::new(cx, cy, 4.0, 4.0).unwrap(),
            score,
            best_variant: None,
        }
    }

    #[test]
    fn nms_basics() {
        assert!(non_max_suppression(vec![], 5.0).is_empty());
        let kept = non_max_suppression(vec![cand(0.0, 0.0, 0.6), cand(3.0, 0.0, 0.9)], 5.0);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    /// Independent greedy: repeatedly pick the maximum of the remaining set.
    fn greedy_oracle(cands: &[ScoredCandidate], radius: f64) -> Vec<ScoredCandidate> {
        let mut alive: Vec<bool> = vec![true; cands.len()];
        let mut out = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for (i, c) in cands.iter().enumerate() {
                if !alive[i] {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(b) => {
                        let o = &cands[b];
                        let better = c.score > o.score
                            || (c.score == o.score && c.bbox.cx < o.bbox.cx)
                            || (c.score == o.score && c.bbox.cx == o.bbox.cx && c.bbox.cy < o.bbox.cy);
                        Some(if better { i } else { b })
                    }
                };
            }
            let Some(b) = best else { break };
            out.push(cands[b]);
            for (i, c) in cands.iter().enumerate() {
                let d = ((c.bbox.cx - cands[b].bbox.cx).powi(2) + (c.bbox.cy - cands[b].bbox.cy).powi(2)).sqrt();
                if d <= radius {
                    alive[i] = false;
                }
            }
        }
        out
    }

    #[test]
    fn nms_matches_greedy_oracle() {
        for seed in 0..50 {
            let mut rng = SplitMix64::new(seed);
            let cands: Vec<_> = (0..10)
                .map(|_| cand(rng.uniform(0.0, 40.0), rng.uniform(0.0, 40.0), rng.next_f64()))
                .collect();
            assert_eq!(non_max_suppression(cands.clone(), 8.0), greedy_oracle(&cands, 8.0));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn patch_strategy() -> impl Strategy<Value = (Patch, Patch)> {
            (1usize..10, 1usize..10).prop_flat_map(|(w, h)| {
                (
                    proptest::collection::vec(0u8..=255, w * h),
                    proptest::collection::vec(0u8..=255, w * h),
                )
                    .prop_map(move |(a, b)| {
                        (
                            Patch::new(w, h, a.into_iter().map(f32::from).collect()).unwrap(),
                            Patch::new(w, h, b.into_iter().map(f32::from).collect()).unwrap(),
                        )
                    })
            })
        }

        proptest! {
            #[test]
            fn ncc_bounded_and_symmetric((a, b) in patch_strategy()) {
                let ab = ncc(&a, &b).unwrap();
                let ba = ncc(&b, &a).unwrap();
                prop_assert!(ab.abs() <= 1.0);
                prop_assert!((ab - ba).abs() < 1e-12);
            }

            #[test]
            fn nms_output_is_antichain(
                pts in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0, 0.0f64..1.0), 0..30),
                radius in 0.5f64..15.0,
            ) {
                let cands: Vec<_> = pts.iter().map(|&(x, y, s)| cand(x, y, s)).collect();
                let kept = non_max_suppression(cands, radius);
                for (i, a) in kept.iter().enumerate() {
                    for b in &kept[i + 1..] {
                        prop_assert!((a.bbox.center() - b.bbox.center()).norm() > radius);
                    }
                }
            }

            #[test]
            fn scan_recovers_planted_template(x0 in 0usize..30, y0 in 0usize..20, seed in 0u64..500) {
                let mut frame = noise_frame(seed, 40, 28);
                let mut rng = SplitMix64::new(seed + 7);
                let t = random_patch(&mut rng, 7, 5);
                let (x0, y0) = (x0.min(40 - 7), y0.min(28 - 5));
                plant(&mut frame, &t, x0, y0);
                let found = ncc_scan(&frame, &t, &BBox::new(20.0, 14.0, 40.0, 28.0).unwrap(), 1, 0.5).unwrap();
                let hit = found.iter().any(|c| {
                    let r = c.bbox.pixel_rect();
                    r.x0 == x0 as i64 && r.y0 == y0 as i64 && c.score > 0.999
                });
                prop_assert!(hit);
            }
        }
    }
}
