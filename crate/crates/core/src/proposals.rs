//! Region machinery for the two-stage detection path: IoU, train-time
//! proposal synthesis with overlap-window labeling, dense inference-time
//! proposals, patch warping, and non-maximum suppression.

use image::RgbImage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::BBox;
use crate::tensor::Tensor;

/// Intersection area over union area, in [0, 1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let x0 = a.x.max(b.x);
    let y0 = a.y.max(b.y);
    let x1 = (a.x + a.w).min(b.x + b.w);
    let y1 = (a.y + a.h).min(b.y + b.h);
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    let inter = (x1 - x0) * (y1 - y0);
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposalLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug)]
pub struct LabeledProposal {
    pub bbox: BBox,
    pub label: ProposalLabel,
    pub matched_gt: Option<usize>,
    pub iou: f64,
}

/// Overlap windows: positive for IoU in [0.5, 1], negative for [0.1, 0.2],
/// ignore otherwise (both windows closed at both ends).
pub fn label_from_iou(v: f64) -> ProposalLabel {
    if (0.5..=1.0).contains(&v) {
        ProposalLabel::Positive
    } else if (0.1..=0.2).contains(&v) {
        ProposalLabel::Negative
    } else {
        ProposalLabel::Ignore
    }
}

/// Label a box against the best-matching ground-truth box.
pub fn label_against(bbox: BBox, gt: &[BBox]) -> LabeledProposal {
    let mut best = 0.0;
    let mut best_idx = None;
    for (i, g) in gt.iter().enumerate() {
        let v = iou(&bbox, g);
        if v > best {
            best = v;
            best_idx = Some(i);
        }
    }
    let label = label_from_iou(best);
    LabeledProposal {
        bbox,
        label,
        matched_gt: if label == ProposalLabel::Positive {
            best_idx
        } else {
            None
        },
        iou: best,
    }
}

fn random_box(rng: &mut ChaCha8Rng, image_size: usize) -> BBox {
    let s = image_size as f64;
    let w = rng.random_range(2.0..(s / 2.0));
    let h = rng.random_range(2.0..(s / 2.0));
    let x = rng.random_range(-0.5..(s - 0.5 - w));
    let y = rng.random_range(-0.5..(s - 0.5 - h));
    BBox::new(x, y, w, h)
}

/// Exactly `n` labeled proposals per image: jittered copies of ground-truth
/// boxes (scale in [0.7, 1.3], translation up to half a box) plus uniform
/// random boxes. Proposals falling in neither overlap window are retained
/// with the `Ignore` label.
pub fn generate_train_proposals(
    gt: &[BBox],
    image_size: usize,
    n: usize,
    positive_fraction_target: f64,
    seed: u64,
) -> Result<Vec<LabeledProposal>> {
    if n < 1 {
        return Err(Error::invalid("proposal count must be >= 1"));
    }
    if !(0.0..=1.0).contains(&positive_fraction_target) {
        return Err(Error::invalid("positive fraction target must be in [0,1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Roughly 40% of jitters land in the positive window, so oversample.
    let n_jitter = if gt.is_empty() {
        0
    } else {
        (((n as f64) * positive_fraction_target * 2.5).ceil() as usize).min(n)
    };

    let mut out = Vec::with_capacity(n);
    for _ in 0..n_jitter {
        let g = gt[rng.random_range(0..gt.len())];
        let scale = rng.random_range(0.7..1.3);
        let dx = rng.random_range(-g.w / 2.0..g.w / 2.0);
        let dy = rng.random_range(-g.h / 2.0..g.h / 2.0);
        let c = g.center();
        let (w, h) = (g.w * scale, g.h * scale);
        let jittered = BBox::new(c.x + dx - w / 2.0, c.y + dy - h / 2.0, w, h)
            .clipped_to(image_size, image_size);
        let bbox = if jittered.w > 0.0 && jittered.h > 0.0 {
            jittered
        } else {
            random_box(&mut rng, image_size)
        };
        out.push(label_against(bbox, gt));
    }
    while out.len() < n {
        out.push(label_against(random_box(&mut rng, image_size), gt));
    }
    Ok(out)
}

/// Dense grid of square boxes per scale, clipped to the image bounds, in
/// deterministic (scale-major, row-major) order.
pub fn sliding_proposals(image_size: usize, scales: &[f64], stride: usize) -> Result<Vec<BBox>> {
    if stride < 1 {
        return Err(Error::invalid("sliding stride must be >= 1"));
    }
    let s = image_size as f64;
    let mut out = Vec::new();
    for &b in scales {
        if b <= 0.0 {
            return Err(Error::invalid("sliding scale must be positive"));
        }
        let mut y = -0.5;
        while y + b <= s - 0.5 + 1e-9 {
            let mut x = -0.5;
            while x + b <= s - 0.5 + 1e-9 {
                out.push(BBox::new(x, y, b, b).clipped_to(image_size, image_size));
                x += stride as f64;
            }
            y += stride as f64;
        }
    }
    Ok(out)
}

fn bilinear(image: &RgbImage, ch: usize, sx: f64, sy: f64) -> f64 {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let x0 = sx.floor() as i64;
    let y0 = sy.floor() as i64;
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let sample = |x: i64, y: i64| -> f64 {
        let xc = x.clamp(0, w - 1) as u32;
        let yc = y.clamp(0, h - 1) as u32;
        image.get_pixel(xc, yc).0[ch] as f64 / 255.0
    };
    let v00 = sample(x0, y0);
    let v01 = sample(x0 + 1, y0);
    let v10 = sample(x0, y0 + 1);
    let v11 = sample(x0 + 1, y0 + 1);
    (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy
}

/// Bilinear warp of the box contents to a `patch_size` x `patch_size` RGB
/// tensor [3,S,S] with values in [0, 1]. Samples outside the image clamp to
/// the border.
pub fn extract_patch(image: &RgbImage, bbox: &BBox, patch_size: usize) -> Result<Tensor<f64>> {
    if bbox.w <= 0.0 || bbox.h <= 0.0 {
        return Err(Error::invalid("cannot extract a zero-area box"));
    }
    let clipped = bbox.clipped_to(image.width() as usize, image.height() as usize);
    if clipped.w <= 0.0 || clipped.h <= 0.0 {
        return Err(Error::invalid("box does not overlap the image"));
    }
    let s = patch_size;
    let mut data = vec![0.0f64; 3 * s * s];
    for ch in 0..3 {
        for pi in 0..s {
            let sy = bbox.y + (pi as f64 + 0.5) * bbox.h / s as f64;
            for pj in 0..s {
                let sx = bbox.x + (pj as f64 + 0.5) * bbox.w / s as f64;
                data[(ch * s + pi) * s + pj] = bilinear(image, ch, sx, sy);
            }
        }
    }
    Tensor::new(vec![3, s, s], data)
}

/// Greedy descending-score suppression: drop any box whose IoU with an
/// already kept box exceeds the threshold. Score ties break toward the lower
/// index. Returns kept indices in keep order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::invalid(format!(
            "nms got {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| iou(&boxes[i], &boxes[k]) <= iou_threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        let far = BBox::new(20.0, 20.0, 5.0, 5.0);
        assert_eq!(iou(&a, &far), 0.0);
        let b = BBox::new(5.0, 0.0, 10.0, 10.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = random_box(&mut rng, 64);
            let b = random_box(&mut rng, 64);
            let ab = iou(&a, &b);
            assert_eq!(ab, iou(&b, &a));
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn labeling_windows_are_exhaustive_and_exclusive() {
        assert_eq!(label_from_iou(1.0), ProposalLabel::Positive);
        assert_eq!(label_from_iou(0.5), ProposalLabel::Positive);
        assert_eq!(label_from_iou(0.2), ProposalLabel::Negative);
        assert_eq!(label_from_iou(0.1), ProposalLabel::Negative);
        assert_eq!(label_from_iou(0.3), ProposalLabel::Ignore);
        assert_eq!(label_from_iou(0.05), ProposalLabel::Ignore);
        assert_eq!(label_from_iou(0.0), ProposalLabel::Ignore);
        // every value in [0,1] gets exactly one label
        for i in 0..=1000 {
            let _ = label_from_iou(i as f64 / 1000.0);
        }
    }

    #[test]
    fn unjittered_gt_box_is_positive() {
        let gt = vec![BBox::new(10.0, 10.0, 8.0, 4.0)];
        let p = label_against(gt[0], &gt);
        assert_eq!(p.label, ProposalLabel::Positive);
        assert_eq!(p.iou, 1.0);
        assert_eq!(p.matched_gt, Some(0));
    }

    #[test]
    fn generates_exactly_n_deterministically() {
        let gt = vec![
            BBox::new(10.0, 10.0, 8.0, 4.0),
            BBox::new(40.0, 30.0, 6.0, 6.0),
        ];
        let a = generate_train_proposals(&gt, 64, 1000, 0.25, 9).unwrap();
        let b = generate_train_proposals(&gt, 64, 1000, 0.25, 9).unwrap();
        assert_eq!(a.len(), 1000);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.bbox, y.bbox);
            assert_eq!(x.label, y.label);
        }
        let positives = a.iter().filter(|p| p.label == ProposalLabel::Positive).count();
        let negatives = a.iter().filter(|p| p.label == ProposalLabel::Negative).count();
        assert!(positives > 0, "no positives among jittered proposals");
        assert!(negatives > 0, "no negatives among proposals");
    }

    #[test]
    fn empty_gt_yields_no_positives() {
        let props = generate_train_proposals(&[], 64, 200, 0.25, 3).unwrap();
        assert_eq!(props.len(), 200);
        assert!(props.iter().all(|p| p.label != ProposalLabel::Positive));
    }

    #[test]
    fn proposals_stay_inside_bounds() {
        let gt = vec![BBox::new(0.0, 0.0, 8.0, 4.0)]; // near the corner
        for p in generate_train_proposals(&gt, 64, 500, 0.3, 1).unwrap() {
            assert!(p.bbox.x >= -0.5 && p.bbox.y >= -0.5);
            assert!(p.bbox.x + p.bbox.w <= 63.5 + 1e-9);
            assert!(p.bbox.y + p.bbox.h <= 63.5 + 1e-9);
            assert!(p.bbox.w > 0.0 && p.bbox.h > 0.0);
        }
    }

    #[test]
    fn sliding_grid_counts() {
        assert_eq!(sliding_proposals(64, &[16.0], 16).unwrap().len(), 16);
        // stride 1: (S - b + 1)^2 per scale
        assert_eq!(sliding_proposals(20, &[6.0], 1).unwrap().len(), 15 * 15);
        assert_eq!(
            sliding_proposals(20, &[6.0, 8.0], 1).unwrap().len(),
            15 * 15 + 13 * 13
        );
    }

    #[test]
    fn sliding_boxes_are_clipped_in_bounds() {
        for b in sliding_proposals(32, &[7.0, 12.0], 5).unwrap() {
            assert!(b.x >= -0.5 && b.y >= -0.5);
            assert!(b.x + b.w <= 31.5 + 1e-9);
            assert!(b.y + b.h <= 31.5 + 1e-9);
        }
    }

    fn ramp_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, _y| image::Rgb([(x * 3) as u8, 0, 0]))
    }

    #[test]
    fn whole_image_box_is_identity_warp() {
        let img = ramp_image(16, 16);
        let patch = extract_patch(&img, &BBox::image_bounds(16, 16), 16).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let expect = (x * 3) as f64 / 255.0;
                let got = patch.data()[y * 16 + x];
                assert!((got - expect).abs() < 1e-6, "({x},{y}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn constant_image_warps_to_constant_patch() {
        let img = RgbImage::from_pixel(10, 10, image::Rgb([100, 150, 200]));
        let patch = extract_patch(&img, &BBox::new(1.3, 2.7, 5.1, 4.2), 8).unwrap();
        let d = patch.data();
        for ch in 0..3 {
            let expect = [100.0, 150.0, 200.0][ch] / 255.0;
            for k in 0..64 {
                assert!((d[ch * 64 + k] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_of_ramp_matches_analytic_bilinear() {
        let img = ramp_image(32, 32);
        let bbox = BBox::new(3.0, 5.0, 10.0, 6.0);
        let s = 8;
        let patch = extract_patch(&img, &bbox, s).unwrap();
        for pi in 0..s {
            for pj in 0..s {
                let sx = bbox.x + (pj as f64 + 0.5) * bbox.w / s as f64;
                // interior of the ramp: value is linear in x
                let expect = sx * 3.0 / 255.0;
                let got = patch.data()[pi * s + pj];
                assert!((got - expect).abs() < 1e-9, "({pi},{pj}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn zero_area_box_is_an_error() {
        let img = ramp_image(8, 8);
        assert!(extract_patch(&img, &BBox::new(1.0, 1.0, 0.0, 3.0), 4).is_err());
        assert!(extract_patch(&img, &BBox::new(100.0, 100.0, 3.0, 3.0), 4).is_err());
    }

    #[test]
    fn nms_keeps_single_box() {
        let boxes = vec![BBox::new(0.0, 0.0, 4.0, 4.0)];
        assert_eq!(nms(&boxes, &[0.7], 0.3).unwrap(), vec![0]);
    }

    #[test]
    fn nms_suppresses_duplicate_by_score() {
        let b = BBox::new(0.0, 0.0, 4.0, 4.0);
        let kept = nms(&[b, b], &[0.9, 0.8], 0.5).unwrap();
        assert_eq!(kept, vec![0]);
        let kept = nms(&[b, b], &[0.8, 0.9], 0.5).unwrap();
        assert_eq!(kept, vec![1]);
    }

    /// O(n^2) reference with the same tie rule, written independently.
    fn nms_reference(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
        let mut alive = vec![true; boxes.len()];
        let mut kept = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..boxes.len() {
                if alive[i] {
                    match best {
                        None => best = Some(i),
                        Some(b) if scores[i] > scores[b] => best = Some(i),
                        _ => {}
                    }
                }
            }
            let Some(b) = best else { break };
            alive[b] = false;
            kept.push(b);
            for i in 0..boxes.len() {
                if alive[i] && iou(&boxes[i], &boxes[b]) > thr {
                    alive[i] = false;
                }
            }
        }
        kept
    }

    #[test]
    fn nms_matches_brute_force_on_random_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let boxes: Vec<BBox> = (0..50).map(|_| random_box(&mut rng, 64)).collect();
            let scores: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
            let got = nms(&boxes, &scores, 0.3).unwrap();
            let expect = nms_reference(&boxes, &scores, 0.3);
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn nms_output_is_an_antichain() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let boxes: Vec<BBox> = (0..80).map(|_| random_box(&mut rng, 48)).collect();
        let scores: Vec<f64> = (0..80).map(|_| rng.random_range(0.0..1.0)).collect();
        let kept = nms(&boxes, &scores, 0.25).unwrap();
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                assert!(iou(&boxes[a], &boxes[b]) <= 0.25);
            }
        }
    }
}
