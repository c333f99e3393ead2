//! Probability map to discrete centroids: thresholding, connected
//! components, probability-weighted centroid extraction, and optional
//! reconciliation with the regressed object count.

use crate::error::{Error, Result};
use crate::geom::Point;

/// Single-channel detection-confidence grid over an image.
#[derive(Clone, Debug)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ProbMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "probability map {}x{} needs {} values, got {}",
                width,
                height,
                width * height,
                values.len()
            )));
        }
        Ok(ProbMap {
            width,
            height,
            values,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdMode {
    Fixed,
    Otsu,
}

#[derive(Clone, Copy, Debug)]
pub struct ExtractionParams {
    pub threshold_mode: ThresholdMode,
    /// Threshold when mode is `Fixed`, and the Otsu fallback for constant maps.
    pub fixed_threshold: f64,
    pub min_component_area: usize,
    pub reconcile_with_count: bool,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        ExtractionParams {
            threshold_mode: ThresholdMode::Otsu,
            fixed_threshold: 0.5,
            min_component_area: 2,
            reconcile_with_count: false,
        }
    }
}

impl ExtractionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.fixed_threshold > 0.0 && self.fixed_threshold < 1.0) {
            return Err(Error::invalid("fixed threshold must lie in (0,1)"));
        }
        if self.min_component_area < 1 {
            return Err(Error::invalid("min component area must be >= 1"));
        }
        Ok(())
    }
}

/// 256-bin Otsu threshold maximizing between-class variance. Constant maps
/// fall back to 0.5. Ties resolve to the lowest candidate.
pub fn otsu_threshold(p: &ProbMap) -> f64 {
    let lo = p.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = p.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return 0.5;
    }
    // per-bin counts and sums of the actual values, so class means are exact
    let mut count = [0usize; 256];
    let mut sum = [0.0f64; 256];
    for &v in &p.values {
        let bin = ((v * 256.0).floor() as usize).min(255);
        count[bin] += 1;
        sum[bin] += v;
    }
    let total_n = p.values.len() as f64;
    let total_sum: f64 = sum.iter().sum();

    let mut best_k = 1usize;
    let mut best_var = f64::NEG_INFINITY;
    let mut n0 = 0.0f64;
    let mut s0 = 0.0f64;
    for k in 1..=255usize {
        n0 += count[k - 1] as f64;
        s0 += sum[k - 1];
        let n1 = total_n - n0;
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let mu0 = s0 / n0;
        let mu1 = (total_sum - s0) / n1;
        let var = n0 / total_n * n1 / total_n * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_k = k;
        }
    }
    best_k as f64 / 256.0
}

/// One 8-connected region of above-threshold pixels.
#[derive(Clone, Debug)]
pub struct Component {
    /// Member pixels as (x, y), in discovery order.
    pub pixels: Vec<(usize, usize)>,
    pub area: usize,
    /// Probability-weighted centroid (weights are the original map values).
    pub centroid: Point,
    /// Total probability mass.
    pub mass: f64,
    /// Mean probability over member pixels.
    pub mean_p: f64,
}

fn component_from_pixels(pixels: Vec<(usize, usize)>, p: &ProbMap) -> Component {
    let mut mass = 0.0;
    let (mut cx, mut cy) = (0.0, 0.0);
    for &(x, y) in &pixels {
        let w = p.at(x, y);
        mass += w;
        cx += w * x as f64;
        cy += w * y as f64;
    }
    // all-zero-weight component: fall back to the unweighted mean
    let centroid = if mass > 0.0 {
        Point::new(cx / mass, cy / mass)
    } else {
        let n = pixels.len() as f64;
        Point::new(
            pixels.iter().map(|&(x, _)| x as f64).sum::<f64>() / n,
            pixels.iter().map(|&(_, y)| y as f64).sum::<f64>() / n,
        )
    };
    let area = pixels.len();
    let mean_p = if area > 0 { mass / area as f64 } else { 0.0 };
    Component {
        pixels,
        area,
        centroid,
        mass,
        mean_p,
    }
}

/// 8-connected components of `binary`, in scan-discovery order, with
/// probability-weighted statistics taken from `p`.
pub fn connected_components(binary: &[bool], p: &ProbMap) -> Vec<Component> {
    let (w, h) = (p.width, p.height);
    debug_assert_eq!(binary.len(), w * h);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        if !binary[start] || seen[start] {
            continue;
        }
        let mut queue = vec![start];
        seen[start] = true;
        let mut pixels = Vec::new();
        while let Some(idx) = queue.pop() {
            let (x, y) = (idx % w, idx / w);
            pixels.push((x, y));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if binary[nidx] && !seen[nidx] {
                        seen[nidx] = true;
                        queue.push(nidx);
                    }
                }
            }
        }
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        out.push(component_from_pixels(pixels, p));
    }
    out
}

/// Deterministic 2-means split of a pixel set: initialized from the farthest
/// pixel pair, Lloyd iterations until stable. Returns `None` when the
/// component cannot be divided.
fn two_means_split(pixels: &[(usize, usize)]) -> Option<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    if pixels.len() < 2 {
        return None;
    }
    let (mut ai, mut bi) = (0usize, 1usize);
    let mut best = -1.0f64;
    for i in 0..pixels.len() {
        for j in i + 1..pixels.len() {
            let dx = pixels[i].0 as f64 - pixels[j].0 as f64;
            let dy = pixels[i].1 as f64 - pixels[j].1 as f64;
            let d = dx * dx + dy * dy;
            if d > best {
                best = d;
                ai = i;
                bi = j;
            }
        }
    }
    let mut ca = (pixels[ai].0 as f64, pixels[ai].1 as f64);
    let mut cb = (pixels[bi].0 as f64, pixels[bi].1 as f64);
    let mut assign = vec![false; pixels.len()]; // false -> a, true -> b
    for _ in 0..32 {
        let mut changed = false;
        for (k, &(x, y)) in pixels.iter().enumerate() {
            let da = (x as f64 - ca.0).powi(2) + (y as f64 - ca.1).powi(2);
            let db = (x as f64 - cb.0).powi(2) + (y as f64 - cb.1).powi(2);
            let to_b = db < da;
            if assign[k] != to_b {
                assign[k] = to_b;
                changed = true;
            }
        }
        let (mut sa, mut sb) = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0));
        for (k, &(x, y)) in pixels.iter().enumerate() {
            let s = if assign[k] { &mut sb } else { &mut sa };
            s.0 += x as f64;
            s.1 += y as f64;
            s.2 += 1.0;
        }
        if sa.2 == 0.0 || sb.2 == 0.0 {
            return None;
        }
        ca = (sa.0 / sa.2, sa.1 / sa.2);
        cb = (sb.0 / sb.2, sb.1 / sb.2);
        if !changed {
            break;
        }
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (k, &px) in pixels.iter().enumerate() {
        if assign[k] {
            b.push(px);
        } else {
            a.push(px);
        }
    }
    if a.is_empty() || b.is_empty() {
        return None;
    }
    Some((a, b))
}

/// A predicted centroid with its component's mean probability as the score.
#[derive(Clone, Copy, Debug)]
pub struct PredPoint {
    pub point: Point,
    pub score: f64,
}

/// Threshold, drop small components, emit probability-weighted centroids.
/// With reconciliation on and a rounded count estimate available, split the
/// largest components (2-means) or keep only the highest-mass ones until the
/// component count matches the estimate.
pub fn extract_centroids(
    p: &ProbMap,
    params: &ExtractionParams,
    c_hat: Option<f64>,
) -> Result<Vec<PredPoint>> {
    params.validate()?;
    let tau = match params.threshold_mode {
        ThresholdMode::Fixed => params.fixed_threshold,
        ThresholdMode::Otsu => otsu_threshold(p),
    };
    let binary: Vec<bool> = p.values.iter().map(|&v| v >= tau).collect();
    let mut comps: Vec<Component> = connected_components(&binary, p)
        .into_iter()
        .filter(|c| c.area >= params.min_component_area)
        .collect();

    if params.reconcile_with_count {
        if let Some(chat) = c_hat {
            let target = chat.round_ties_even().max(0.0) as usize;
            // Split largest-area components until the target is reached or
            // nothing remains divisible.
            while comps.len() < target {
                let largest = (0..comps.len()).max_by_key(|&i| (comps[i].area, usize::MAX - i));
                let Some(i) = largest else { break };
                match two_means_split(&comps[i].pixels) {
                    Some((a, b)) => {
                        let ca = component_from_pixels(a, p);
                        let cb = component_from_pixels(b, p);
                        comps.remove(i);
                        comps.push(ca);
                        comps.push(cb);
                    }
                    None => break,
                }
            }
            if comps.len() > target {
                // keep the `target` highest-mass components, stable on ties
                let mut order: Vec<usize> = (0..comps.len()).collect();
                order.sort_by(|&a, &b| {
                    comps[b]
                        .mass
                        .partial_cmp(&comps[a].mass)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                });
                let keep: Vec<usize> = order.into_iter().take(target).collect();
                let mut kept: Vec<Component> = Vec::with_capacity(target);
                for (i, c) in comps.into_iter().enumerate() {
                    if keep.contains(&i) {
                        kept.push(c);
                    }
                }
                comps = kept;
            }
        }
    }

    Ok(comps
        .iter()
        .map(|c| PredPoint {
            point: c.centroid,
            score: c.mean_p,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from(w: usize, h: usize, vals: &[f64]) -> ProbMap {
        ProbMap::new(w, h, vals.to_vec()).unwrap()
    }

    fn blob_map(w: usize, h: usize, blobs: &[(usize, usize)]) -> ProbMap {
        // 2x2 blocks of 1.0 with top-left corners at the given positions
        let mut vals = vec![0.0; w * h];
        for &(bx, by) in blobs {
            for dy in 0..2 {
                for dx in 0..2 {
                    vals[(by + dy) * w + bx + dx] = 1.0;
                }
            }
        }
        ProbMap::new(w, h, vals).unwrap()
    }

    // ── otsu ─────────────────────────────────────────────────────────

    #[test]
    fn otsu_separates_bimodal_map() {
        let mut vals = vec![0.1; 64];
        for v in vals.iter_mut().take(20) {
            *v = 0.9;
        }
        let tau = otsu_threshold(&map_from(8, 8, &vals));
        assert!(tau > 0.1 && tau < 0.9, "threshold {tau}");
    }

    #[test]
    fn otsu_constant_map_falls_back() {
        let tau = otsu_threshold(&map_from(4, 4, &[0.7; 16]));
        assert_eq!(tau, 0.5);
    }

    /// Exhaustive 256-candidate scan recomputing class statistics from raw
    /// values, independently of the histogram bookkeeping.
    fn otsu_scan_oracle(vals: &[f64]) -> f64 {
        let mut best_k = 1usize;
        let mut best_var = f64::NEG_INFINITY;
        for k in 1..=255usize {
            let tau = k as f64 / 256.0;
            let below: Vec<f64> = vals.iter().cloned().filter(|&v| v < tau).collect();
            let above: Vec<f64> = vals.iter().cloned().filter(|&v| v >= tau).collect();
            if below.is_empty() || above.is_empty() {
                continue;
            }
            let n = vals.len() as f64;
            let w0 = below.len() as f64 / n;
            let w1 = above.len() as f64 / n;
            let mu0: f64 = below.iter().sum::<f64>() / below.len() as f64;
            let mu1: f64 = above.iter().sum::<f64>() / above.len() as f64;
            let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
            if var > best_var {
                best_var = var;
                best_k = k;
            }
        }
        best_k as f64 / 256.0
    }

    #[test]
    fn otsu_matches_exhaustive_scan() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let vals: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
            let got = otsu_threshold(&map_from(10, 10, &vals));
            let expect = otsu_scan_oracle(&vals);
            assert_eq!(got, expect);
        }
    }

    // ── connected components ─────────────────────────────────────────

    #[test]
    fn two_disjoint_blocks_make_two_components() {
        let p = blob_map(8, 8, &[(0, 0), (5, 5)]);
        let binary: Vec<bool> = p.values.iter().map(|&v| v >= 0.5).collect();
        let comps = connected_components(&binary, &p);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].centroid, Point::new(0.5, 0.5));
        assert_eq!(comps[1].centroid, Point::new(5.5, 5.5));
        assert_eq!(comps[0].area, 4);
    }

    #[test]
    fn empty_map_has_no_components() {
        let p = map_from(4, 4, &[0.0; 16]);
        let binary = vec![false; 16];
        assert!(connected_components(&binary, &p).is_empty());
    }

    #[test]
    fn diagonal_pixels_merge_under_8_connectivity() {
        let mut vals = vec![0.0; 16];
        vals[0] = 1.0; // (0,0)
        vals[5] = 1.0; // (1,1)
        let p = map_from(4, 4, &vals);
        let binary: Vec<bool> = p.values.iter().map(|&v| v >= 0.5).collect();
        assert_eq!(connected_components(&binary, &p).len(), 1);
    }

    #[test]
    fn weighted_centroid_uses_original_probabilities() {
        let mut vals = vec![0.0; 16];
        vals[0] = 0.9; // (0,0)
        vals[1] = 0.3; // (1,0)
        let p = map_from(4, 4, &vals);
        let binary: Vec<bool> = p.values.iter().map(|&v| v > 0.0).collect();
        let comps = connected_components(&binary, &p);
        assert_eq!(comps.len(), 1);
        let expect_x = 0.3 / 1.2;
        assert!((comps[0].centroid.x - expect_x).abs() < 1e-12);
        assert_eq!(comps[0].centroid.y, 0.0);
    }

    // ── extraction ───────────────────────────────────────────────────

    #[test]
    fn three_blobs_yield_three_centroids() {
        let p = blob_map(16, 16, &[(1, 1), (8, 2), (3, 10)]);
        let params = ExtractionParams {
            threshold_mode: ThresholdMode::Fixed,
            fixed_threshold: 0.5,
            ..Default::default()
        };
        let pts = extract_centroids(&p, &params, None).unwrap();
        assert_eq!(pts.len(), 3);
        let expect = [(1.5, 1.5), (8.5, 2.5), (3.5, 10.5)];
        for (got, &(ex, ey)) in pts.iter().zip(&expect) {
            assert!((got.point.x - ex).abs() <= 0.5);
            assert!((got.point.y - ey).abs() <= 0.5);
            assert_eq!(got.score, 1.0);
        }
    }

    #[test]
    fn all_zero_map_yields_no_points() {
        let p = map_from(8, 8, &[0.0; 64]);
        let pts = extract_centroids(&p, &ExtractionParams::default(), None).unwrap();
        assert!(pts.is_empty());
    }

    #[test]
    fn min_area_filter_drops_single_pixels() {
        let mut vals = vec![0.0; 64];
        vals[9] = 1.0; // lone pixel
        for dy in 0..2 {
            for dx in 0..2 {
                vals[(5 + dy) * 8 + 4 + dx] = 1.0;
            }
        }
        let p = map_from(8, 8, &vals);
        let params = ExtractionParams {
            threshold_mode: ThresholdMode::Fixed,
            min_component_area: 2,
            ..Default::default()
        };
        let pts = extract_centroids(&p, &params, None).unwrap();
        assert_eq!(pts.len(), 1);
    }

    #[test]
    fn reconcile_splits_merged_blob_with_two_means() {
        // one horizontally elongated blob made of two touching 2x2 blocks
        let p = blob_map(16, 8, &[(2, 3), (4, 3)]);
        let params = ExtractionParams {
            threshold_mode: ThresholdMode::Fixed,
            reconcile_with_count: true,
            ..Default::default()
        };
        let merged = extract_centroids(&p, &params, None).unwrap();
        assert_eq!(merged.len(), 1);
        let merged_c = merged[0].point;

        let pts = extract_centroids(&p, &params, Some(2.0)).unwrap();
        assert_eq!(pts.len(), 2);
        let mean = Point::new(
            (pts[0].point.x + pts[1].point.x) / 2.0,
            (pts[0].point.y + pts[1].point.y) / 2.0,
        );
        assert!(mean.dist(&merged_c) <= 1.0, "split mean {mean:?} vs {merged_c:?}");
    }

    #[test]
    fn reconcile_keeps_highest_mass_components() {
        let mut vals = vec![0.0; 16 * 16];
        // strong blob
        for dy in 0..2 {
            for dx in 0..2 {
                vals[(2 + dy) * 16 + 2 + dx] = 0.9;
            }
        }
        // weak blob
        for dy in 0..2 {
            for dx in 0..2 {
                vals[(10 + dy) * 16 + 10 + dx] = 0.55;
            }
        }
        let p = map_from(16, 16, &vals);
        let params = ExtractionParams {
            threshold_mode: ThresholdMode::Fixed,
            reconcile_with_count: true,
            ..Default::default()
        };
        let pts = extract_centroids(&p, &params, Some(1.0)).unwrap();
        assert_eq!(pts.len(), 1);
        assert!((pts[0].point.x - 2.5).abs() < 1e-9);
    }

    #[test]
    fn raising_threshold_never_increases_area() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
        let p = map_from(10, 10, &vals);
        let mut prev = usize::MAX;
        for k in 1..10 {
            let tau = k as f64 / 10.0;
            let area = p.values.iter().filter(|&&v| v >= tau).count();
            assert!(area <= prev);
            prev = area;
        }
    }

    #[test]
    fn centroids_stay_inside_component_bounds() {
        let p = blob_map(12, 12, &[(3, 4)]);
        let pts = extract_centroids(&p, &ExtractionParams::default(), None).unwrap();
        assert_eq!(pts.len(), 1);
        let pt = pts[0].point;
        assert!(pt.x >= 3.0 && pt.x <= 4.0);
        assert!(pt.y >= 4.0 && pt.y <= 5.0);
        assert!(pt.x >= 0.0 && pt.x < 12.0 && pt.y >= 0.0 && pt.y < 12.0);
    }
}
