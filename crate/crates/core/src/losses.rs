//! Training objectives: the weighted Hausdorff distance with count
//! regression, smooth L1, the SoftPlus count estimate, and cross entropy for
//! the patch classifiers.

use crate::diff::Var;
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameters of the weighted Hausdorff distance over an H x W pixel grid.
#[derive(Clone, Copy, Debug)]
pub struct WhdParams {
    /// Exponent on p_x in the second term's denominator.
    pub alpha: f64,
    /// Small positive correction keeping the loss finite when no object is
    /// estimated.
    pub epsilon: f64,
    /// Upper bound on point distances; defaults to the image diagonal.
    pub d_max: f64,
    pub height: usize,
    pub width: usize,
}

impl WhdParams {
    /// Defaults: alpha 4, epsilon 1e-6, d_max = image diagonal.
    pub fn new(height: usize, width: usize) -> Self {
        WhdParams {
            alpha: 4.0,
            epsilon: 1e-6,
            d_max: Self::image_diagonal(height, width),
            height,
            width,
        }
    }

    pub fn image_diagonal(height: usize, width: usize) -> f64 {
        (((height - 1) * (height - 1) + (width - 1) * (width - 1)) as f64).sqrt()
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_d_max(mut self, d_max: f64) -> Self {
        self.d_max = d_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("whd epsilon must be positive"));
        }
        if !(self.d_max > 0.0) {
            return Err(Error::invalid("whd d_max must be positive"));
        }
        if !(self.alpha >= 1.0) {
            return Err(Error::invalid("whd alpha must be >= 1"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("whd grid dims must be positive"));
        }
        Ok(())
    }
}

/// True count, raw regression signal, and the SoftPlus-rectified estimate.
#[derive(Clone, Copy, Debug)]
pub struct CountPair {
    pub true_count: f64,
    pub signal: f64,
    pub estimate: f64,
}

impl CountPair {
    pub fn from_signal(true_count: f64, signal: f64) -> Self {
        CountPair {
            true_count,
            signal,
            estimate: softplus_count(signal),
        }
    }

    /// Nearest integer to the estimate, ties to even.
    pub fn rounded(&self) -> i64 {
        self.estimate.round_ties_even() as i64
    }
}

/// Soft cardinality of a probability map: the sum of all values.
pub fn soft_count(p: &[f64]) -> Result<f64> {
    for &v in p {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!(
                "probability map value {v} outside [0,1]"
            )));
        }
    }
    Ok(p.iter().sum())
}

/// 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// log(1 + e^s), stable for large |s|.
pub fn softplus_count(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// The three differentiable terms of the weighted Hausdorff distance.
///
/// * term 1: `1/(soft_count(p)+eps) . sum_x p_x . min_y d(x,y)` — with the
///   per-pixel minimum replaced by `d_max` when `targets` is empty.
/// * term 2: `1/|Y| . sum_y min_x (d(x,y)+eps) / (p_x^alpha + eps/d_max)`,
///   zero when `targets` is empty.
/// * term 3: `smooth_l1(C - softplus(s))` with `C = |Y|`.
///
/// `p` may have any shape with exactly `height * width` elements, laid out in
/// row-major order over the grid; grid point (row r, col c) sits at pixel
/// center (x, y) = (c, r). `s` is the scalar count-regression signal and must
/// live on the same tape as `p`.
pub fn whd_terms<E: Scalar>(
    p: &Var<E>,
    targets: &[Point],
    params: &WhdParams,
    s: &Var<E>,
) -> Result<(Var<E>, Var<E>, Var<E>)> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let n = h * w;
    if p.numel() != n {
        return Err(Error::shape(format!(
            "probability map has {} elements, grid is {h}x{w}",
            p.numel()
        )));
    }
    if s.numel() != 1 {
        return Err(Error::shape("count signal must be a scalar"));
    }
    let pval = p.value();
    for &v in pval.data() {
        let v = v.to_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!(
                "probability map value {v} outside [0,1]"
            )));
        }
    }

    let tape = p.tape().clone();
    let pf = p.reshape(&[n])?;
    let eps = params.epsilon;

    // Term 1.
    let mut dmin = vec![0.0f64; n];
    for r in 0..h {
        for c in 0..w {
            let here = Point::new(c as f64, r as f64);
            dmin[r * w + c] = if targets.is_empty() {
                params.d_max
            } else {
                targets
                    .iter()
                    .map(|t| t.dist(&here))
                    .fold(f64::INFINITY, f64::min)
            };
        }
    }
    let dmin_t = tape.constant(Tensor::from_f64_slice(&[n], &dmin)?);
    let weighted = pf.mul(&dmin_t)?.sum_all()?;
    let normalizer = pf.sum_all()?.add_scalar(E::from_f64(eps));
    let term1 = weighted.div(&normalizer)?;

    // Term 2.
    let term2 = if targets.is_empty() {
        tape.scalar_const(E::zero())
    } else {
        let denom = pf
            .pow_scalar(params.alpha)
            .add_scalar(E::from_f64(eps / params.d_max));
        let mut acc: Option<Var<E>> = None;
        for t in targets {
            let mut dist = vec![0.0f64; n];
            for r in 0..h {
                for c in 0..w {
                    dist[r * w + c] = t.dist(&Point::new(c as f64, r as f64)) + eps;
                }
            }
            let dist_t = tape.constant(Tensor::from_f64_slice(&[n], &dist)?);
            let m = dist_t.div(&denom)?.min_all()?;
            acc = Some(match acc {
                Some(a) => a.add(&m)?,
                None => m,
            });
        }
        acc.unwrap()
            .mul_scalar(E::from_f64(1.0 / targets.len() as f64))
    };

    // Term 3.
    let true_count = targets.len() as f64;
    let s_flat = s.reshape(&[])?;
    let residual = s_flat
        .softplus()
        .mul_scalar(E::from_f64(-1.0))
        .add_scalar(E::from_f64(true_count));
    let term3 = residual.smooth_l1();

    Ok((term1, term2, term3))
}

/// Weighted Hausdorff distance plus count regression: the sum of the three
/// terms of [`whd_terms`].
pub fn whd_loss<E: Scalar>(
    p: &Var<E>,
    targets: &[Point],
    params: &WhdParams,
    s: &Var<E>,
) -> Result<Var<E>> {
    let (t1, t2, t3) = whd_terms(p, targets, params, s)?;
    t1.add(&t2)?.add(&t3)
}

/// Mean over the batch of -log softmax(logits)[label], in the log domain.
pub fn cross_entropy<E: Scalar>(logits: &Var<E>, labels: &[usize]) -> Result<Var<E>> {
    logits.cross_entropy_logits(labels)
}
