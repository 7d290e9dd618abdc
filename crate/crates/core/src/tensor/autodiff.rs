//! Recorded operations and the reverse pass.
//!
//! Every differentiable op attaches an [`Op`] to its output tensor. The op
//! holds handles to the input tensors plus whatever forward-pass state its
//! backward rule needs. [`backward`] collects the recorded subgraph below a
//! scalar loss, orders it by creation id (creation order is a topological
//! order), and visits each node exactly once in reverse, accumulating
//! gradients additively into every tensor that tracks them.

use std::cell::Cell;
use std::collections::HashSet;
use std::sync::Arc;

use super::{ops, Scalar, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether ops currently record graph nodes on this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` with graph recording disabled (evaluation-mode forward passes).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let _restore = Restore(prev);
    f()
}

/// Contiguous channel ranges, `(start, end)` with exclusive end. Shared by the
/// field-aware ops (batch norm groups, field bias, field dropout, group pooling).
pub type ChannelRanges = Arc<Vec<(usize, usize)>>;

/// Expands learnable coefficients into a full convolution kernel.
///
/// Implemented by the equivariant-basis machinery; the tensor engine only
/// needs the linear map and its transpose.
pub trait KernelExpander<T: Scalar>: Send + Sync {
    fn coeff_count(&self) -> usize;
    /// `[out_channels, in_channels, k, k]` of the expanded kernel.
    fn kernel_dims(&self) -> [usize; 4];
    fn expand(&self, coeffs: &[T], out: &mut [T]);
    /// Accumulates `basis^T * d_kernel` into `d_coeffs`.
    fn coeff_grad(&self, d_kernel: &[T], d_coeffs: &mut [T]);
}

/// A recorded operation: input handles plus saved state for the backward rule.
pub enum Op<T: Scalar> {
    Add {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Mul {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Scale {
        a: Tensor<T>,
        factor: T,
    },
    SumAll {
        a: Tensor<T>,
    },
    Relu {
        a: Tensor<T>,
    },
    Sigmoid {
        a: Tensor<T>,
        out: Vec<T>,
    },
    Conv2d {
        input: Tensor<T>,
        kernel: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        padding: usize,
    },
    MaxPool2 {
        input: Tensor<T>,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: Tensor<T>,
    },
    MatmulBias {
        x: Tensor<T>,
        w: Tensor<T>,
        b: Tensor<T>,
    },
    BatchNorm {
        input: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        ranges: ChannelRanges,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        input: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        ranges: ChannelRanges,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Tensor<T>,
        labels: Arc<Vec<usize>>,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: Tensor<T>,
        targets: Tensor<T>,
    },
    ConcatChannels {
        inputs: Vec<Tensor<T>>,
    },
    GroupMeanChannels {
        input: Tensor<T>,
        ranges: ChannelRanges,
    },
    SpatialMean {
        input: Tensor<T>,
    },
    Reshape {
        input: Tensor<T>,
    },
    DropoutFields {
        input: Tensor<T>,
        ranges: ChannelRanges,
        /// Compact multiplier mask, one value per (batch, field, y, x).
        mask: Arc<Vec<T>>,
    },
    BiasFields {
        input: Tensor<T>,
        bias: Tensor<T>,
        ranges: ChannelRanges,
    },
    ExpandKernel {
        coeffs: Tensor<T>,
        expander: Arc<dyn KernelExpander<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn for_each_input(&self, mut f: impl FnMut(&Tensor<T>)) {
        match self {
            Op::Add { a, b } | Op::Mul { a, b } => {
                f(a);
                f(b);
            }
            Op::Scale { a, .. }
            | Op::SumAll { a }
            | Op::Relu { a }
            | Op::Sigmoid { a, .. } => f(a),
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => {
                f(input);
                f(kernel);
                if let Some(b) = bias {
                    f(b);
                }
            }
            Op::MaxPool2 { input, .. }
            | Op::Upsample2 { input }
            | Op::GroupMeanChannels { input, .. }
            | Op::SpatialMean { input }
            | Op::Reshape { input }
            | Op::DropoutFields { input, .. } => f(input),
            Op::MatmulBias { x, w, b } => {
                f(x);
                f(w);
                f(b);
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            }
            | Op::BatchNormEval {
                input, gamma, beta, ..
            } => {
                f(input);
                f(gamma);
                f(beta);
            }
            Op::SoftmaxCrossEntropy { logits, .. } => f(logits),
            Op::BceWithLogits { logits, targets } => {
                f(logits);
                f(targets);
            }
            Op::ConcatChannels { inputs } => {
                for t in inputs {
                    f(t);
                }
            }
            Op::BiasFields { input, bias, .. } => {
                f(input);
                f(bias);
            }
            Op::ExpandKernel { coeffs, .. } => f(coeffs),
        }
    }

    /// Applies this op's backward rule given the output gradient.
    fn backward(&self, grad: &[T], out_shape: &[usize]) {
        match self {
            Op::Add { a, b } => {
                a.accumulate_grad(grad);
                b.accumulate_grad(grad);
            }
            Op::Mul { a, b } => {
                if a.needs_grad() {
                    let bd = b.data();
                    let da: Vec<T> = grad.iter().zip(bd.iter()).map(|(&g, &bv)| g * bv).collect();
                    a.accumulate_grad(&da);
                }
                if b.needs_grad() {
                    let ad = a.data();
                    let db: Vec<T> = grad.iter().zip(ad.iter()).map(|(&g, &av)| g * av).collect();
                    b.accumulate_grad(&db);
                }
            }
            Op::Scale { a, factor } => {
                let da: Vec<T> = grad.iter().map(|&g| g * *factor).collect();
                a.accumulate_grad(&da);
            }
            Op::SumAll { a } => {
                let g0 = grad[0];
                a.accumulate_grad(&vec![g0; a.numel()]);
            }
            Op::Relu { a } => {
                let ad = a.data();
                let da: Vec<T> = grad
                    .iter()
                    .zip(ad.iter())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                drop(ad);
                a.accumulate_grad(&da);
            }
            Op::Sigmoid { a, out } => {
                let da: Vec<T> = grad
                    .iter()
                    .zip(out.iter())
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                a.accumulate_grad(&da);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => ops::conv2d_backward(input, kernel, bias.as_ref(), *stride, *padding, grad),
            Op::MaxPool2 { input, argmax } => {
                let mut din = vec![T::zero(); input.numel()];
                for (&g, &idx) in grad.iter().zip(argmax.iter()) {
                    din[idx as usize] += g;
                }
                input.accumulate_grad(&din);
            }
            Op::Upsample2 { input } => {
                let ishape = input.shape();
                let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut din = vec![T::zero(); input.numel()];
                for bi in 0..b * c {
                    let obase = bi * oh * ow;
                    let ibase = bi * h * w;
                    for r in 0..h {
                        for col in 0..w {
                            let mut acc = T::zero();
                            for dr in 0..2 {
                                for dc in 0..2 {
                                    acc += grad[obase + (2 * r + dr) * ow + 2 * col + dc];
                                }
                            }
                            din[ibase + r * w + col] += acc;
                        }
                    }
                }
                input.accumulate_grad(&din);
            }
            Op::MatmulBias { x, w, b } => {
                let (batch, n) = (x.shape()[0], x.shape()[1]);
                let m = w.shape()[0];
                if x.needs_grad() {
                    let wd = w.data();
                    let mut dx = vec![T::zero(); batch * n];
                    for bi in 0..batch {
                        for mi in 0..m {
                            let g = grad[bi * m + mi];
                            let wrow = &wd[mi * n..(mi + 1) * n];
                            let drow = &mut dx[bi * n..(bi + 1) * n];
                            for (d, &wv) in drow.iter_mut().zip(wrow) {
                                *d += g * wv;
                            }
                        }
                    }
                    drop(wd);
                    x.accumulate_grad(&dx);
                }
                if w.needs_grad() {
                    let xd = x.data();
                    let mut dw = vec![T::zero(); m * n];
                    for bi in 0..batch {
                        let xrow = &xd[bi * n..(bi + 1) * n];
                        for mi in 0..m {
                            let g = grad[bi * m + mi];
                            let drow = &mut dw[mi * n..(mi + 1) * n];
                            for (d, &xv) in drow.iter_mut().zip(xrow) {
                                *d += g * xv;
                            }
                        }
                    }
                    drop(xd);
                    w.accumulate_grad(&dw);
                }
                if b.needs_grad() {
                    let mut db = vec![T::zero(); m];
                    for bi in 0..batch {
                        for mi in 0..m {
                            db[mi] += grad[bi * m + mi];
                        }
                    }
                    b.accumulate_grad(&db);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                ranges,
                mean,
                inv_std,
            } => ops::batchnorm_backward_train(input, gamma, beta, ranges, mean, inv_std, grad),
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                ranges,
                mean,
                inv_std,
            } => ops::batchnorm_backward_eval(input, gamma, beta, ranges, mean, inv_std, grad),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (b, k) = (logits.shape()[0], logits.shape()[1]);
                let g = grad[0];
                let inv_b = T::one() / T::from_usize(b).unwrap();
                let mut dl = vec![T::zero(); b * k];
                for bi in 0..b {
                    for ki in 0..k {
                        let indicator = if labels[bi] == ki { T::one() } else { T::zero() };
                        dl[bi * k + ki] = g * (probs[bi * k + ki] - indicator) * inv_b;
                    }
                }
                logits.accumulate_grad(&dl);
            }
            Op::BceWithLogits { logits, targets } => {
                let g = grad[0];
                let n = logits.numel();
                let inv_n = T::one() / T::from_usize(n).unwrap();
                let ld = logits.data();
                let td = targets.data();
                let dl: Vec<T> = ld
                    .iter()
                    .zip(td.iter())
                    .map(|(&z, &t)| {
                        let s = T::one() / (T::one() + (-z).exp());
                        g * (s - t) * inv_n
                    })
                    .collect();
                drop(ld);
                drop(td);
                logits.accumulate_grad(&dl);
            }
            Op::ConcatChannels { inputs } => {
                let b = out_shape[0];
                let c_total = out_shape[1];
                let hw = out_shape[2] * out_shape[3];
                let mut offset = 0usize;
                for t in inputs {
                    let ci = t.shape()[1];
                    if t.needs_grad() {
                        let mut dt = vec![T::zero(); t.numel()];
                        for bi in 0..b {
                            let src = &grad[(bi * c_total + offset) * hw..(bi * c_total + offset + ci) * hw];
                            let dst = &mut dt[bi * ci * hw..(bi + 1) * ci * hw];
                            dst.copy_from_slice(src);
                        }
                        t.accumulate_grad(&dt);
                    }
                    offset += ci;
                }
            }
            Op::GroupMeanChannels { input, ranges } => {
                let ishape = input.shape();
                let (b, c, hw) = (ishape[0], ishape[1], ishape[2] * ishape[3]);
                let ng = ranges.len();
                let mut din = vec![T::zero(); input.numel()];
                for bi in 0..b {
                    for (gi, &(c0, c1)) in ranges.iter().enumerate() {
                        let inv = T::one() / T::from_usize(c1 - c0).unwrap();
                        let gsl = &grad[(bi * ng + gi) * hw..(bi * ng + gi + 1) * hw];
                        for ch in c0..c1 {
                            let dsl = &mut din[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                            for (d, &g) in dsl.iter_mut().zip(gsl) {
                                *d += g * inv;
                            }
                        }
                    }
                }
                input.accumulate_grad(&din);
            }
            Op::SpatialMean { input } => {
                let ishape = input.shape();
                let (bc, hw) = (ishape[0] * ishape[1], ishape[2] * ishape[3]);
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut din = vec![T::zero(); input.numel()];
                for i in 0..bc {
                    let g = grad[i] * inv;
                    for d in din[i * hw..(i + 1) * hw].iter_mut() {
                        *d += g;
                    }
                }
                input.accumulate_grad(&din);
            }
            Op::Reshape { input } => {
                input.accumulate_grad(grad);
            }
            Op::DropoutFields {
                input,
                ranges,
                mask,
            } => {
                let ishape = input.shape();
                let (b, c, hw) = (ishape[0], ishape[1], ishape[2] * ishape[3]);
                let nf = ranges.len();
                let mut din = vec![T::zero(); input.numel()];
                for bi in 0..b {
                    for (fi, &(c0, c1)) in ranges.iter().enumerate() {
                        let msl = &mask[(bi * nf + fi) * hw..(bi * nf + fi + 1) * hw];
                        for ch in c0..c1 {
                            let base = (bi * c + ch) * hw;
                            let gsl = &grad[base..base + hw];
                            let dsl = &mut din[base..base + hw];
                            for ((d, &g), &m) in dsl.iter_mut().zip(gsl).zip(msl) {
                                *d += g * m;
                            }
                        }
                    }
                }
                input.accumulate_grad(&din);
            }
            Op::BiasFields {
                input,
                bias,
                ranges,
            } => {
                input.accumulate_grad(grad);
                if bias.needs_grad() {
                    let ishape = input.shape();
                    let (b, c, hw) = (ishape[0], ishape[1], ishape[2] * ishape[3]);
                    let mut db = vec![T::zero(); ranges.len()];
                    for bi in 0..b {
                        for (fi, &(c0, c1)) in ranges.iter().enumerate() {
                            let mut acc = T::zero();
                            for ch in c0..c1 {
                                let base = (bi * c + ch) * hw;
                                for &g in &grad[base..base + hw] {
                                    acc += g;
                                }
                            }
                            db[fi] += acc;
                        }
                    }
                    bias.accumulate_grad(&db);
                }
            }
            Op::ExpandKernel { coeffs, expander } => {
                let mut dc = vec![T::zero(); expander.coeff_count()];
                expander.coeff_grad(grad, &mut dc);
                coeffs.accumulate_grad(&dc);
            }
        }
    }
}

/// Runs the reverse pass from a scalar loss.
///
/// Every gradient-tracking leaf reachable from `loss` receives (accumulates)
/// its gradient. Visiting order is reverse creation order, so each recorded
/// node is processed exactly once after all of its consumers.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    loss.seed_unit_grad();

    let mut visited: HashSet<u64> = HashSet::new();
    let mut nodes: Vec<Tensor<T>> = Vec::new();
    let mut stack: Vec<Tensor<T>> = vec![loss.clone()];
    while let Some(t) = stack.pop() {
        if !visited.insert(t.id()) {
            continue;
        }
        if let Some(op) = t.op() {
            op.for_each_input(|p| {
                if p.needs_grad() && !visited.contains(&p.id()) {
                    stack.push(p.clone());
                }
            });
            nodes.push(t);
        }
    }
    nodes.sort_by(|a, b| b.id().cmp(&a.id()));

    for node in &nodes {
        let grad = node
            .grad()
            .expect("recorded node receives a gradient before being visited");
        node.op()
            .expect("collected nodes carry ops")
            .backward(&grad, node.shape());
    }
    Ok(())
}
