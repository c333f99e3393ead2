//! Evaluation suite: distance-gated optimal point matching, precision /
//! recall / F1, count-error statistics, localization RMSE, and a
//! wall-clock-per-image harness.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::geom::Point;

/// Cost stand-in for forbidden pairs and padding. Distances are assumed
/// far below this (the image diagonal is a few hundred pixels at most).
const FORBIDDEN: f64 = 1e6;

/// One matched (prediction, ground truth) pair and its pixel distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    pub dist: f64,
}

#[derive(Clone, Debug, Default)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub pairs: Vec<MatchedPair>,
}

impl MatchResult {
    pub fn accumulate(&mut self, other: &MatchResult) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        // pairs keep only distances once aggregated across images
        self.pairs.extend(other.pairs.iter().map(|p| MatchedPair {
            pred: usize::MAX,
            gt: usize::MAX,
            dist: p.dist,
        }));
    }
}

/// Minimum-cost perfect assignment on a square matrix (shortest augmenting
/// paths with potentials, O(n^3)). Returns col assigned to each row.
fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    const NONE: usize = usize::MAX;
    let virt = n; // virtual start column
    let mut u = vec![0.0f64; n + 1]; // row potentials (+ scratch for virtual)
    let mut v = vec![0.0f64; n + 1];
    let mut col_row = vec![NONE; n + 1]; // row assigned to each column

    for row in 0..n {
        col_row[virt] = row;
        let mut j0 = virt;
        let mut minv = vec![f64::INFINITY; n];
        let mut way = vec![virt; n];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0][j] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    if col_row[j] != NONE {
                        u[col_row[j]] += delta;
                    }
                    v[j] -= delta;
                } else if j < n {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == NONE {
                break;
            }
        }
        // augment along the stored path
        while j0 != virt {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
        }
    }

    let mut row_col = vec![NONE; n];
    for (j, &r) in col_row.iter().enumerate().take(n) {
        if r != NONE {
            row_col[r] = j;
        }
    }
    row_col
}

/// Optimal one-to-one matching between predictions and ground truth,
/// restricted to pairs within `radius` pixels: among maximum-cardinality
/// matchings the total matched distance is minimal. Unmatched predictions
/// count as false positives, unmatched ground truth as false negatives.
pub fn match_points(pred: &[Point], gt: &[Point], radius: f64) -> Result<MatchResult> {
    if !(radius > 0.0) {
        return Err(Error::invalid("matching radius must be positive"));
    }
    let (np, ng) = (pred.len(), gt.len());
    if np == 0 || ng == 0 {
        return Ok(MatchResult {
            tp: 0,
            fp: np,
            fn_: ng,
            pairs: Vec::new(),
        });
    }
    let n = np.max(ng);
    let mut cost = vec![vec![FORBIDDEN; n]; n];
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let d = p.dist(g);
            if d <= radius {
                cost[i][j] = d;
            }
        }
    }
    let assignment = min_cost_assignment(&cost);
    let mut pairs = Vec::new();
    for (i, &j) in assignment.iter().enumerate().take(np) {
        if j < ng && cost[i][j] < FORBIDDEN {
            pairs.push(MatchedPair {
                pred: i,
                gt: j,
                dist: cost[i][j],
            });
        }
    }
    let tp = pairs.len();
    Ok(MatchResult {
        tp,
        fp: np - tp,
        fn_: ng - tp,
        pairs,
    })
}

/// Precision, recall, and their harmonic mean. `degenerate` flags empty
/// denominators (reported as zero).
#[derive(Clone, Copy, Debug)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

/// Harmonic mean of precision and recall; zero when either is zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn precision_recall_f1(m: &MatchResult) -> Prf {
    let pred_total = m.tp + m.fp;
    let gt_total = m.tp + m.fn_;
    let degenerate = pred_total == 0 || gt_total == 0;
    let precision = if pred_total == 0 {
        0.0
    } else {
        m.tp as f64 / pred_total as f64
    };
    let recall = if gt_total == 0 {
        0.0
    } else {
        m.tp as f64 / gt_total as f64
    };
    Prf {
        precision,
        recall,
        f1: f1_score(precision, recall),
        degenerate,
    }
}

/// Signed and unsigned count-error statistics over per-image counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CountStats {
    pub me: f64,
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub mape: f64,
}

/// Errors are `predicted - true` per image; MAPE guards zero true counts by
/// dividing by max(true, 1).
pub fn count_errors(pred_counts: &[usize], true_counts: &[usize]) -> Result<CountStats> {
    if pred_counts.len() != true_counts.len() {
        return Err(Error::invalid(format!(
            "count_errors got {} predictions for {} images",
            pred_counts.len(),
            true_counts.len()
        )));
    }
    if pred_counts.is_empty() {
        return Err(Error::invalid("count_errors needs at least one image"));
    }
    let n = pred_counts.len() as f64;
    let (mut me, mut mse, mut mae, mut mape) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &t) in pred_counts.iter().zip(true_counts) {
        let e = p as f64 - t as f64;
        me += e;
        mse += e * e;
        mae += e.abs();
        mape += e.abs() / (t.max(1) as f64);
    }
    Ok(CountStats {
        me: me / n,
        mse: mse / n,
        rmse: (mse / n).sqrt(),
        mae: mae / n,
        mape: mape / n * 100.0,
    })
}

/// Root mean squared matched distance; `(0, false)` for an empty set.
pub fn localization_rmse(pairs: &[MatchedPair]) -> (f64, bool) {
    if pairs.is_empty() {
        return (0.0, false);
    }
    let ms: f64 = pairs.iter().map(|p| p.dist * p.dist).sum::<f64>() / pairs.len() as f64;
    (ms.sqrt(), true)
}

/// Median over `reps` of (wall time to infer every image / image count).
/// `warmup` full passes run first and are excluded. `infer` is called with
/// the image index; measurement is single-threaded by construction.
pub fn time_per_image<F: FnMut(usize)>(
    mut infer: F,
    image_count: usize,
    warmup: usize,
    reps: usize,
) -> Result<f64> {
    if image_count == 0 {
        return Err(Error::invalid("time_per_image needs a nonempty dataset"));
    }
    if reps < 1 {
        return Err(Error::invalid("time_per_image needs reps >= 1"));
    }
    for _ in 0..warmup {
        for i in 0..image_count {
            infer(i);
        }
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for i in 0..image_count {
            infer(i);
        }
        samples.push(start.elapsed().as_secs_f64() / image_count as f64);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = samples.len() / 2;
    Ok(if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        (samples[mid - 1] + samples[mid]) / 2.0
    })
}

/// One evaluated (model, split) row.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub model: String,
    pub split: String,
    pub prf: Prf,
    pub counts: CountStats,
    pub loc_rmse: f64,
    pub loc_rmse_defined: bool,
    pub tpi_seconds: Option<f64>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "model,split,precision,recall,f1,count_me,count_mse,count_rmse,count_mae,count_mape,loc_rmse,tpi_seconds";

    pub fn csv_row(&self) -> String {
        let tpi = match self.tpi_seconds {
            Some(t) => format!("{t:.6}"),
            None => String::new(),
        };
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.model,
            self.split,
            self.prf.precision,
            self.prf.recall,
            self.prf.f1,
            self.counts.me,
            self.counts.mse,
            self.counts.rmse,
            self.counts.mae,
            self.counts.mape,
            self.loc_rmse,
            tpi
        )
    }
}
