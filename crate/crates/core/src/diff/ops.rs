//! Forward implementations of the tape primitives, as methods on [`Var`].

use super::kernels;
use super::{Op, ReduceKind, UnaryKind, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Running batch-norm statistics, one entry per channel. Owned by the model;
/// the tape only reads (eval) or updates (train) them during the forward pass.
#[derive(Clone, Debug)]
pub struct BnRunning<E: Scalar> {
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
}

impl<E: Scalar> BnRunning<E> {
    pub fn new(channels: usize) -> Self {
        BnRunning {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], E::one()),
        }
    }
}

impl<E: Scalar> Var<E> {
    fn binary_pre(&self, other: &Var<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok((a, b))
    }

    pub fn add(&self, other: &Var<E>) -> Result<Var<E>> {
        let (a, b) = self.binary_pre(other)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape().push(out, Op::Add(self.id(), other.id()), rg))
    }

    pub fn sub(&self, other: &Var<E>) -> Result<Var<E>> {
        let (a, b) = self.binary_pre(other)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape().push(out, Op::Sub(self.id(), other.id()), rg))
    }

    pub fn mul(&self, other: &Var<E>) -> Result<Var<E>> {
        let (a, b) = self.binary_pre(other)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape().push(out, Op::Mul(self.id(), other.id()), rg))
    }

    pub fn div(&self, other: &Var<E>) -> Result<Var<E>> {
        let (a, b) = self.binary_pre(other)?;
        if b.data().iter().any(|v| *v == E::zero()) {
            return Err(Error::numeric("division by zero in elementwise div"));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x / y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape().push(out, Op::Div(self.id(), other.id()), rg))
    }

    pub fn add_scalar(&self, c: E) -> Var<E> {
        let out = self.value().map(|v| v + c);
        self.tape().push(out, Op::AddScalar(self.id()), self.requires_grad())
    }

    pub fn sub_scalar(&self, c: E) -> Var<E> {
        let out = self.value().map(|v| v - c);
        self.tape().push(out, Op::SubScalar(self.id()), self.requires_grad())
    }

    pub fn mul_scalar(&self, c: E) -> Var<E> {
        let out = self.value().map(|v| v * c);
        self.tape()
            .push(out, Op::MulScalar(self.id(), c), self.requires_grad())
    }

    pub fn div_scalar(&self, c: E) -> Result<Var<E>> {
        if c == E::zero() {
            return Err(Error::numeric("division by scalar zero"));
        }
        let out = self.value().map(|v| v / c);
        Ok(self
            .tape()
            .push(out, Op::DivScalar(self.id(), c), self.requires_grad()))
    }

    /// Elementwise x^k for a fixed real exponent.
    pub fn pow_scalar(&self, exponent: f64) -> Var<E> {
        let k = E::from_f64(exponent);
        let out = self.value().map(|v| v.powf(k));
        self.tape().push(
            out,
            Op::PowScalar {
                x: self.id(),
                exponent,
            },
            self.requires_grad(),
        )
    }

    fn unary(&self, kind: UnaryKind) -> Var<E> {
        let out = match kind {
            UnaryKind::Relu => self.value().map(|v| if v > E::zero() { v } else { E::zero() }),
            UnaryKind::Sigmoid => self.value().map(kernels::sigmoid),
            UnaryKind::Softplus => self.value().map(kernels::softplus),
            UnaryKind::SmoothL1 => self.value().map(kernels::smooth_l1),
        };
        self.tape().push(
            out,
            Op::Unary {
                x: self.id(),
                kind,
            },
            self.requires_grad(),
        )
    }

    pub fn relu(&self) -> Var<E> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(&self) -> Var<E> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn softplus(&self) -> Var<E> {
        self.unary(UnaryKind::Softplus)
    }

    /// Elementwise smooth L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
    pub fn smooth_l1(&self) -> Var<E> {
        self.unary(UnaryKind::SmoothL1)
    }

    /// x [N,Fin] . w [Fin,Fout] + b [Fout] -> [N,Fout].
    pub fn linear(&self, w: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        self.same_tape(w)?;
        self.same_tape(b)?;
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let (xs, ws, bs) = (xv.shape(), wv.shape(), bv.shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::shape(format!(
                "linear expects x [N,Fin], w [Fin,Fout], b [Fout]; got {:?}, {:?}, {:?}",
                xs, ws, bs
            )));
        }
        if xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::shape(format!(
                "linear dimension mismatch: x {:?} . w {:?} + b {:?}",
                xs, ws, bs
            )));
        }
        let (n, f_in, f_out) = (xs[0], xs[1], ws[1]);
        let out = kernels::linear_forward(xv.data(), wv.data(), bv.data(), n, f_in, f_out);
        let rg = self.requires_grad() || w.requires_grad() || b.requires_grad();
        Ok(self.tape().push(
            Tensor::new(vec![n, f_out], out)?,
            Op::Linear {
                x: self.id(),
                w: w.id(),
                b: b.id(),
            },
            rg,
        ))
    }

    /// Add a per-channel bias, broadcast over the batch and spatial dims.
    pub fn add_bias(&self, bias: &Var<E>) -> Result<Var<E>> {
        self.same_tape(bias)?;
        let x = self.value();
        let b = bias.value();
        let xs = x.shape();
        if xs.len() < 2 || b.rank() != 1 || b.shape()[0] != xs[1] {
            return Err(Error::shape(format!(
                "add_bias expects x of rank >= 2 and bias [C={}], got {:?} and {:?}",
                xs.get(1).copied().unwrap_or(0),
                xs,
                b.shape()
            )));
        }
        let channels = xs[1];
        let spatial: usize = xs[2..].iter().product();
        let mut out = x.data().to_vec();
        let bd = b.data();
        for n in 0..xs[0] {
            for c in 0..channels {
                let base = (n * channels + c) * spatial;
                for k in 0..spatial {
                    out[base + k] += bd[c];
                }
            }
        }
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.tape().push(
            Tensor::new(xs.to_vec(), out)?,
            Op::AddBias {
                x: self.id(),
                b: bias.id(),
            },
            rg,
        ))
    }

    /// 2-d cross-correlation with zero padding (no kernel flip).
    pub fn conv2d(&self, kernel: &Var<E>, stride: usize, padding: usize) -> Result<Var<E>> {
        self.same_tape(kernel)?;
        let out = kernels::conv2d_forward(&self.value(), &kernel.value(), stride, padding)?;
        let rg = self.requires_grad() || kernel.requires_grad();
        Ok(self.tape().push(
            out,
            Op::Conv2d {
                x: self.id(),
                w: kernel.id(),
                stride,
                padding,
            },
            rg,
        ))
    }

    /// 2x2 max pool with stride 2; odd edges behave as -inf padding.
    pub fn maxpool2(&self) -> Result<Var<E>> {
        let (out, argmax) = kernels::maxpool2_forward(&self.value())?;
        Ok(self.tape().push(
            out,
            Op::MaxPool2 {
                x: self.id(),
                argmax,
            },
            self.requires_grad(),
        ))
    }

    /// Replicate each pixel factor x factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<E>> {
        let out = kernels::upsample_nearest_forward(&self.value(), factor)?;
        Ok(self.tape().push(
            out,
            Op::UpsampleNearest {
                x: self.id(),
                factor,
            },
            self.requires_grad(),
        ))
    }

    /// Per-channel batch normalization; see [`kernels::batchnorm_forward`].
    pub fn batchnorm2d(
        &self,
        gamma: &Var<E>,
        beta: &Var<E>,
        running: &mut BnRunning<E>,
        train: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Var<E>> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        if eps <= 0.0 {
            return Err(Error::invalid("batchnorm eps must be positive"));
        }
        let (out, ctx) = kernels::batchnorm_forward(
            &self.value(),
            gamma.value().data(),
            beta.value().data(),
            running.mean.data_mut(),
            running.var.data_mut(),
            train,
            momentum,
            eps,
        )?;
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.tape().push(
            out,
            Op::BatchNorm {
                x: self.id(),
                gamma: gamma.id(),
                beta: beta.id(),
                ctx,
            },
            rg,
        ))
    }

    /// Concatenate along axis 1 (channels); all other dims must agree.
    pub fn concat_channels(&self, other: &Var<E>) -> Result<Var<E>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (asps, bsps) = (a.shape(), b.shape());
        if asps.len() != bsps.len() || asps.len() < 2 {
            return Err(Error::shape(format!(
                "concat_channels expects same-rank inputs of rank >= 2, got {:?} and {:?}",
                asps, bsps
            )));
        }
        if asps[0] != bsps[0] || asps[2..] != bsps[2..] {
            return Err(Error::shape(format!(
                "concat_channels non-channel dims must match: {:?} vs {:?}",
                asps, bsps
            )));
        }
        let batch = asps[0];
        let spatial: usize = asps[2..].iter().product();
        let (ca, cb) = (asps[1], bsps[1]);
        let mut shape = asps.to_vec();
        shape[1] = ca + cb;
        let mut out = vec![E::zero(); batch * (ca + cb) * spatial];
        let (ad, bd) = (a.data(), b.data());
        for n in 0..batch {
            let dst = n * (ca + cb) * spatial;
            out[dst..dst + ca * spatial]
                .copy_from_slice(&ad[n * ca * spatial..(n + 1) * ca * spatial]);
            out[dst + ca * spatial..dst + (ca + cb) * spatial]
                .copy_from_slice(&bd[n * cb * spatial..(n + 1) * cb * spatial]);
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape().push(
            Tensor::new(shape, out)?,
            Op::ConcatC {
                a: self.id(),
                b: other.id(),
            },
            rg,
        ))
    }

    /// Reduce over a set of axes. `Min` routes its gradient to the argmin
    /// (lowest linear index on ties).
    pub fn reduce(&self, kind: ReduceKind, axes: &[usize]) -> Result<Var<E>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::invalid(format!(
                "reduce axes {:?} out of range for shape {:?}",
                axes, shape
            )));
        }
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        if count == 0 || v.numel() == 0 {
            return Err(Error::invalid("reduce over an empty set of elements"));
        }
        let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
        let out_shape: Vec<usize> = kept.iter().map(|&d| shape[d]).collect();
        let out_numel: usize = out_shape.iter().product();
        let in_strides = crate::tensor::strides(&shape);
        let out_strides = crate::tensor::strides(&out_shape);

        let xd = v.data();
        let mut argmin = if kind == ReduceKind::Min {
            Some(vec![usize::MAX; out_numel])
        } else {
            None
        };
        let mut acc = vec![0.0f64; out_numel];
        let mut mins = vec![E::infinity(); out_numel];
        for (lin, &val) in xd.iter().enumerate() {
            let mut out_idx = 0usize;
            for (pos, &d) in kept.iter().enumerate() {
                out_idx += ((lin / in_strides[d]) % shape[d]) * out_strides[pos];
            }
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => acc[out_idx] += val.to_f64(),
                ReduceKind::Min => {
                    if val < mins[out_idx] {
                        mins[out_idx] = val;
                        argmin.as_mut().unwrap()[out_idx] = lin;
                    }
                }
            }
        }
        let data: Vec<E> = match kind {
            ReduceKind::Sum => acc.iter().map(|&v| E::from_f64(v)).collect(),
            ReduceKind::Mean => acc.iter().map(|&v| E::from_f64(v / count as f64)).collect(),
            ReduceKind::Min => mins,
        };
        Ok(self.tape().push(
            Tensor::new(out_shape, data)?,
            Op::Reduce {
                x: self.id(),
                kind,
                axes,
                argmin,
            },
            self.requires_grad(),
        ))
    }

    pub fn sum_all(&self) -> Result<Var<E>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Sum, &axes)
    }

    pub fn mean_all(&self) -> Result<Var<E>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Mean, &axes)
    }

    pub fn min_all(&self) -> Result<Var<E>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Min, &axes)
    }

    /// Row-wise softmax of [N,K] logits, max-subtracted for stability.
    pub fn softmax_logits(&self) -> Result<Var<E>> {
        let v = self.value();
        let s = v.shape();
        if s.len() != 2 || s[1] < 2 {
            return Err(Error::shape(format!(
                "softmax_logits expects [N,K] with K >= 2, got {:?}",
                s
            )));
        }
        let (n, k) = (s[0], s[1]);
        let xd = v.data();
        let mut out = vec![E::zero(); n * k];
        for r in 0..n {
            kernels::softmax_row(&xd[r * k..(r + 1) * k], &mut out[r * k..(r + 1) * k]);
        }
        Ok(self.tape().push(
            Tensor::new(vec![n, k], out)?,
            Op::Softmax { x: self.id() },
            self.requires_grad(),
        ))
    }

    /// Mean over the batch of -log softmax(logits)[label], in the log domain.
    pub fn cross_entropy_logits(&self, labels: &[usize]) -> Result<Var<E>> {
        let v = self.value();
        let s = v.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!(
                "cross_entropy expects [N,K] logits, got {:?}",
                s
            )));
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy got {} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!(
                "cross_entropy label {bad} out of range for {k} classes"
            )));
        }
        let xd = v.data();
        let mut total = 0.0f64;
        for r in 0..n {
            let row = &xd[r * k..(r + 1) * k];
            let lse = kernels::logsumexp_row(row);
            total += (lse - row[labels[r]]).to_f64();
        }
        let loss = Tensor::scalar(E::from_f64(total / n as f64));
        Ok(self.tape().push(
            loss,
            Op::CrossEntropy {
                x: self.id(),
                labels: labels.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Select entry `index` along axis 0, dropping that axis.
    pub fn slice0(&self, index: usize) -> Result<Var<E>> {
        let v = self.value();
        let s = v.shape();
        if s.is_empty() || index >= s[0] {
            return Err(Error::shape(format!(
                "slice0 index {index} out of range for shape {:?}",
                s
            )));
        }
        let block: usize = s[1..].iter().product();
        let data = v.data()[index * block..(index + 1) * block].to_vec();
        Ok(self.tape().push(
            Tensor::new(s[1..].to_vec(), data)?,
            Op::Slice0 {
                x: self.id(),
                index,
            },
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<E>> {
        let out = self.value().reshaped(shape.to_vec())?;
        Ok(self
            .tape()
            .push(out, Op::Reshape { x: self.id() }, self.requires_grad()))
    }
}
