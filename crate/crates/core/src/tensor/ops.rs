//! Forward operations. Each op validates shapes, computes its result, and —
//! when gradients are enabled and some input tracks them — records an
//! [`Op`](super::autodiff::Op) on the output.
//!
//! All loops run in a fixed sequential order, so results and gradients are
//! bit-deterministic across runs.

use std::sync::Arc;

use super::autodiff::{grad_enabled, ChannelRanges, KernelExpander, Op};
use super::{lit, Scalar, Tensor};
use crate::error::{Error, Result};

pub use super::autodiff::{backward, no_grad};

fn shape4<T: Scalar>(t: &Tensor<T>, context: &'static str) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(
            context,
            format!("expected a 4-d tensor, got shape {:?}", s),
        ));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    let shape = a.shape().to_vec();
    if grad_enabled() && (a.needs_grad() || b.needs_grad()) {
        Ok(Tensor::from_op(shape, data, Op::Add { a: a.clone(), b: b.clone() }))
    } else {
        Ok(Tensor::from_vec(&shape, data).expect("shape checked"))
    }
}

/// Elementwise product of two same-shape tensors.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "mul",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    let shape = a.shape().to_vec();
    if grad_enabled() && (a.needs_grad() || b.needs_grad()) {
        Ok(Tensor::from_op(shape, data, Op::Mul { a: a.clone(), b: b.clone() }))
    } else {
        Ok(Tensor::from_vec(&shape, data).expect("shape checked"))
    }
}

/// Multiplies every element by a constant.
pub fn scale<T: Scalar>(a: &Tensor<T>, factor: T) -> Tensor<T> {
    let data: Vec<T> = a.data().iter().map(|&x| x * factor).collect();
    let shape = a.shape().to_vec();
    if grad_enabled() && a.needs_grad() {
        Tensor::from_op(shape, data, Op::Scale { a: a.clone(), factor })
    } else {
        Tensor::from_vec(&shape, data).expect("same shape")
    }
}

/// Sum of all elements, as a `[1]` tensor.
pub fn sum_all<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::zero();
    for &x in a.data().iter() {
        acc += x;
    }
    if grad_enabled() && a.needs_grad() {
        Tensor::from_op(vec![1], vec![acc], Op::SumAll { a: a.clone() })
    } else {
        Tensor::scalar(acc)
    }
}

/// Elementwise `max(0, x)`; the subgradient at 0 is 0.
pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = a
        .data()
        .iter()
        .map(|&x| if x > T::zero() { x } else { T::zero() })
        .collect();
    let shape = a.shape().to_vec();
    if grad_enabled() && a.needs_grad() {
        Tensor::from_op(shape, data, Op::Relu { a: a.clone() })
    } else {
        Tensor::from_vec(&shape, data).expect("same shape")
    }
}

/// Elementwise logistic function.
pub fn sigmoid<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = a
        .data()
        .iter()
        .map(|&x| T::one() / (T::one() + (-x).exp()))
        .collect();
    let shape = a.shape().to_vec();
    if grad_enabled() && a.needs_grad() {
        let out = data.clone();
        Tensor::from_op(shape, data, Op::Sigmoid { a: a.clone(), out })
    } else {
        Tensor::from_vec(&shape, data).expect("same shape")
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Lowers one image `[Cin, H, W]` into a patch matrix `[Cin*kh*kw, Ho*Wo]`,
/// zero-filling positions that fall in the padding. Row order is
/// channel-major then kernel-row then kernel-column, matching the flat kernel
/// layout so that convolution reduces to a matrix product.
pub(crate) fn im2col<T: Scalar>(
    img: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let nj = ho * wo;
    debug_assert_eq!(cols.len(), cin * kh * kw * nj);
    let mut p = 0usize;
    for c in 0..cin {
        let ch = &img[c * h * w..(c + 1) * h * w];
        for dkh in 0..kh {
            for dkw in 0..kw {
                let row = &mut cols[p * nj..(p + 1) * nj];
                let mut j = 0usize;
                for oh in 0..ho {
                    let ih = (oh * stride + dkh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        for _ in 0..wo {
                            row[j] = T::zero();
                            j += 1;
                        }
                        continue;
                    }
                    let irow = &ch[ih as usize * w..(ih as usize + 1) * w];
                    for ow in 0..wo {
                        let iw = (ow * stride + dkw) as isize - pad as isize;
                        row[j] = if iw < 0 || iw >= w as isize {
                            T::zero()
                        } else {
                            irow[iw as usize]
                        };
                        j += 1;
                    }
                }
                p += 1;
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto one image gradient.
fn col2im_add<T: Scalar>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    img: &mut [T],
) {
    let nj = ho * wo;
    let mut p = 0usize;
    for c in 0..cin {
        let ch = &mut img[c * h * w..(c + 1) * h * w];
        for dkh in 0..kh {
            for dkw in 0..kw {
                let row = &cols[p * nj..(p + 1) * nj];
                let mut j = 0usize;
                for oh in 0..ho {
                    let ih = (oh * stride + dkh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        j += wo;
                        continue;
                    }
                    let base = ih as usize * w;
                    for ow in 0..wo {
                        let iw = (ow * stride + dkw) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            ch[base + iw as usize] += row[j];
                        }
                        j += 1;
                    }
                }
                p += 1;
            }
        }
    }
}

struct ConvGeom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    let [b, cin, h, w] = shape4(input, "conv2d input")?;
    let [cout, kcin, kh, kw] = shape4(kernel, "conv2d kernel")?;
    if kcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {} input channels, input has {}", kcin, cin),
        ));
    }
    if let Some(bt) = bias {
        if bt.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{}]", bt.shape(), cout),
            ));
        }
    }
    if stride == 0 {
        return Err(Error::arg("conv2d", "stride must be positive"));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::geometry(
            "conv2d",
            format!(
                "kernel {}x{} exceeds padded input {}x{} (padding {})",
                kh,
                kw,
                h + 2 * padding,
                w + 2 * padding,
                padding
            ),
        ));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    Ok(ConvGeom {
        b,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho,
        wo,
    })
}

/// 2-d cross-correlation with zero padding: `[B,Cin,H,W] * [Cout,Cin,k,k] ->
/// [B,Cout,H',W']` with `H' = (H + 2*padding - k)/stride + 1`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, kernel, bias, stride, padding)?;
    let ckk = g.cin * g.kh * g.kw;
    let nj = g.ho * g.wo;
    let mut out = vec![T::zero(); g.b * g.cout * nj];
    let mut cols = vec![T::zero(); ckk * nj];
    {
        let id = input.data();
        let kd = kernel.data();
        let bd = bias.map(|b| b.data());
        for bi in 0..g.b {
            let img = &id[bi * g.cin * g.h * g.w..(bi + 1) * g.cin * g.h * g.w];
            im2col(img, g.cin, g.h, g.w, g.kh, g.kw, stride, padding, g.ho, g.wo, &mut cols);
            let out_b = &mut out[bi * g.cout * nj..(bi + 1) * g.cout * nj];
            for co in 0..g.cout {
                let orow = &mut out_b[co * nj..(co + 1) * nj];
                let krow = &kd[co * ckk..(co + 1) * ckk];
                for (p, &kv) in krow.iter().enumerate() {
                    let crow = &cols[p * nj..(p + 1) * nj];
                    for (o, &cv) in orow.iter_mut().zip(crow) {
                        *o += kv * cv;
                    }
                }
                if let Some(ref bd) = bd {
                    let bv = bd[co];
                    for o in orow.iter_mut() {
                        *o += bv;
                    }
                }
            }
        }
    }
    let shape = vec![g.b, g.cout, g.ho, g.wo];
    let record = grad_enabled()
        && (input.needs_grad()
            || kernel.needs_grad()
            || bias.map_or(false, |b| b.needs_grad()));
    if record {
        Ok(Tensor::from_op(
            shape,
            out,
            Op::Conv2d {
                input: input.clone(),
                kernel: kernel.clone(),
                bias: bias.cloned(),
                stride,
                padding,
            },
        ))
    } else {
        Ok(Tensor::from_vec(&shape, out).expect("shape computed"))
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    grad: &[T],
) {
    let g = conv_geometry(input, kernel, bias, stride, padding).expect("validated at forward");
    let ckk = g.cin * g.kh * g.kw;
    let nj = g.ho * g.wo;
    let need_in = input.needs_grad();
    let need_k = kernel.needs_grad();
    let need_b = bias.map_or(false, |b| b.needs_grad());

    if need_b {
        let mut db = vec![T::zero(); g.cout];
        for bi in 0..g.b {
            for co in 0..g.cout {
                let grow = &grad[(bi * g.cout + co) * nj..(bi * g.cout + co + 1) * nj];
                let mut acc = T::zero();
                for &gv in grow {
                    acc += gv;
                }
                db[co] += acc;
            }
        }
        bias.expect("need_b implies bias").accumulate_grad(&db);
    }

    if !(need_in || need_k) {
        return;
    }
    let mut cols = vec![T::zero(); ckk * nj];
    let mut dcols = vec![T::zero(); ckk * nj];
    let mut dkernel = if need_k { vec![T::zero(); g.cout * ckk] } else { Vec::new() };
    let mut dinput = if need_in { vec![T::zero(); input.numel()] } else { Vec::new() };
    {
        let id = input.data();
        let kd = kernel.data();
        for bi in 0..g.b {
            let gr_b = &grad[bi * g.cout * nj..(bi + 1) * g.cout * nj];
            if need_k {
                let img = &id[bi * g.cin * g.h * g.w..(bi + 1) * g.cin * g.h * g.w];
                im2col(img, g.cin, g.h, g.w, g.kh, g.kw, stride, padding, g.ho, g.wo, &mut cols);
                for co in 0..g.cout {
                    let grow = &gr_b[co * nj..(co + 1) * nj];
                    let dkrow = &mut dkernel[co * ckk..(co + 1) * ckk];
                    for (p, dk) in dkrow.iter_mut().enumerate() {
                        let crow = &cols[p * nj..(p + 1) * nj];
                        let mut acc = T::zero();
                        for (&gv, &cv) in grow.iter().zip(crow) {
                            acc += gv * cv;
                        }
                        *dk += acc;
                    }
                }
            }
            if need_in {
                for v in dcols.iter_mut() {
                    *v = T::zero();
                }
                for co in 0..g.cout {
                    let grow = &gr_b[co * nj..(co + 1) * nj];
                    let krow = &kd[co * ckk..(co + 1) * ckk];
                    for (p, &kv) in krow.iter().enumerate() {
                        let drow = &mut dcols[p * nj..(p + 1) * nj];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += kv * gv;
                        }
                    }
                }
                let dimg = &mut dinput[bi * g.cin * g.h * g.w..(bi + 1) * g.cin * g.h * g.w];
                col2im_add(
                    &dcols, g.cin, g.h, g.w, g.kh, g.kw, stride, padding, g.ho, g.wo, dimg,
                );
            }
        }
    }
    if need_k {
        kernel.accumulate_grad(&dkernel);
    }
    if need_in {
        input.accumulate_grad(&dinput);
    }
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

/// 2x2 max pooling with stride 2. Ties route the gradient to the first
/// maximum in row-major window order.
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = shape4(input, "maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::geometry(
            "maxpool2",
            format!("spatial size {}x{} must be even", h, w),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); b * c * ho * wo];
    let mut argmax = vec![0u32; out.len()];
    {
        let id = input.data();
        debug_assert!(id.len() <= u32::MAX as usize);
        let mut o = 0usize;
        for bc in 0..b * c {
            let base = bc * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best_idx = base + (2 * oh) * w + 2 * ow;
                    let mut best = id[best_idx];
                    for dr in 0..2usize {
                        for dc in 0..2usize {
                            let idx = base + (2 * oh + dr) * w + 2 * ow + dc;
                            if id[idx] > best {
                                best = id[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[o] = best;
                    argmax[o] = best_idx as u32;
                    o += 1;
                }
            }
        }
    }
    let shape = vec![b, c, ho, wo];
    if grad_enabled() && input.needs_grad() {
        Ok(Tensor::from_op(
            shape,
            out,
            Op::MaxPool2 {
                input: input.clone(),
                argmax,
            },
        ))
    } else {
        Ok(Tensor::from_vec(&shape, out).expect("shape computed"))
    }
}

/// Nearest-neighbor 2x upsampling: each pixel becomes a 2x2 block.
pub fn upsample_nearest2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = shape4(input, "upsample_nearest2")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * c * oh * ow];
    {
        let id = input.data();
        for bc in 0..b * c {
            let ibase = bc * h * w;
            let obase = bc * oh * ow;
            for r in 0..h {
                for col in 0..w {
                    let v = id[ibase + r * w + col];
                    let o = obase + (2 * r) * ow + 2 * col;
                    out[o] = v;
                    out[o + 1] = v;
                    out[o + ow] = v;
                    out[o + ow + 1] = v;
                }
            }
        }
    }
    let shape = vec![b, c, oh, ow];
    if grad_enabled() && input.needs_grad() {
        Ok(Tensor::from_op(
            shape,
            out,
            Op::Upsample2 {
                input: input.clone(),
            },
        ))
    } else {
        Ok(Tensor::from_vec(&shape, out).expect("shape computed"))
    }
}

// ---------------------------------------------------------------------------
// Affine
// ---------------------------------------------------------------------------

/// `x [B,N] * w[M,N]^T + b[M] -> [B,M]`.
pub fn matmul_bias<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 2 || ws.len() != 2 {
        return Err(Error::shape(
            "matmul_bias",
            format!("expected 2-d operands, got {:?} and {:?}", xs, ws),
        ));
    }
    let (batch, n) = (xs[0], xs[1]);
    let (m, wn) = (ws[0], ws[1]);
    if wn != n {
        return Err(Error::shape(
            "matmul_bias",
            format!("inner dimensions disagree: input has {}, weight expects {}", n, wn),
        ));
    }
    if b.shape() != [m] {
        return Err(Error::shape(
            "matmul_bias",
            format!("bias shape {:?}, expected [{}]", b.shape(), m),
        ));
    }
    let mut out = vec![T::zero(); batch * m];
    {
        let xd = x.data();
        let wd = w.data();
        let bd = b.data();
        for bi in 0..batch {
            let xrow = &xd[bi * n..(bi + 1) * n];
            let orow = &mut out[bi * m..(bi + 1) * m];
            for mi in 0..m {
                let wrow = &wd[mi * n..(mi + 1) * n];
                let mut acc = T::zero();
                for (&xv, &wv) in xrow.iter().zip(wrow) {
                    acc += xv * wv;
                }
                orow[mi] = acc + bd[mi];
            }
        }
    }
    let shape = vec![batch, m];
    if grad_enabled() && (x.needs_grad() || w.needs_grad() || b.needs_grad()) {
        Ok(Tensor::from_op(
            shape,
            out,
            Op::MatmulBias {
                x: x.clone(),
                w: w.clone(),
                b: b.clone(),
            },
        ))
    } else {
        Ok(Tensor::from_vec(&shape, out).expect("shape computed"))
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Forward mode selector for batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Exponential-moving-average statistics. Plain buffers, never differentiated.
#[derive(Debug, Clone)]
pub struct RunningStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    /// Fresh statistics: mean 0, variance 1, one entry per channel group.
    pub fn new(groups: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[groups]),
            var: Tensor::full(&[groups], T::one()),
        }
    }
}

fn validate_ranges(c: usize, ranges: &[(usize, usize)], context: &'static str) -> Result<()> {
    let mut expect = 0usize;
    for &(c0, c1) in ranges {
        if c0 != expect || c1 <= c0 {
            return Err(Error::arg(
                context,
                format!("channel ranges must tile [0,{}) contiguously, got {:?}", c, ranges),
            ));
        }
        expect = c1;
    }
    if expect != c {
        return Err(Error::arg(
            context,
            format!("channel ranges cover [0,{}), tensor has {} channels", expect, c),
        ));
    }
    Ok(())
}

/// Batch normalization over channel groups. Statistics and the affine
/// parameters are shared across all channels of one group; with singleton
/// groups this is ordinary per-channel batch norm.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_groups<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
    ranges: &ChannelRanges,
    phase: Phase,
    momentum: f64,
    eps: f64,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = shape4(input, "batchnorm")?;
    validate_ranges(c, ranges, "batchnorm")?;
    let ng = ranges.len();
    for (t, name) in [(gamma, "gamma"), (beta, "beta"), (&running.mean, "running mean"), (&running.var, "running var")] {
        if t.shape() != [ng] {
            return Err(Error::shape(
                "batchnorm",
                format!("{} shape {:?}, expected [{}]", name, t.shape(), ng),
            ));
        }
    }
    let hw = h * w;
    let eps_t = lit::<T>(eps);

    let (mean, var): (Vec<T>, Vec<T>) = match phase {
        Phase::Train => {
            let id = input.data();
            let mut mean = vec![T::zero(); ng];
            let mut var = vec![T::zero(); ng];
            for (gi, &(c0, c1)) in ranges.iter().enumerate() {
                let m_count = b * (c1 - c0) * hw;
                if m_count < 2 {
                    return Err(Error::arg(
                        "batchnorm",
                        format!(
                            "train mode needs at least 2 elements per group, group {} has {}",
                            gi, m_count
                        ),
                    ));
                }
                let inv_m = T::one() / T::from_usize(m_count).unwrap();
                let mut sum = T::zero();
                for bi in 0..b {
                    for ch in c0..c1 {
                        let base = (bi * c + ch) * hw;
                        for &x in &id[base..base + hw] {
                            sum += x;
                        }
                    }
                }
                let mu = sum * inv_m;
                let mut sq = T::zero();
                for bi in 0..b {
                    for ch in c0..c1 {
                        let base = (bi * c + ch) * hw;
                        for &x in &id[base..base + hw] {
                            let d = x - mu;
                            sq += d * d;
                        }
                    }
                }
                mean[gi] = mu;
                var[gi] = sq * inv_m;
            }
            drop(id);
            // Exponential moving average of the batch statistics.
            let mom = lit::<T>(momentum);
            let keep = T::one() - mom;
            {
                let mut rm = running.mean.data_mut();
                let mut rv = running.var.data_mut();
                for gi in 0..ng {
                    rm[gi] = keep * rm[gi] + mom * mean[gi];
                    rv[gi] = keep * rv[gi] + mom * var[gi];
                }
            }
            (mean, var)
        }
        Phase::Eval => (running.mean.data().clone(), running.var.data().clone()),
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mut out = vec![T::zero(); input.numel()];
    {
        let id = input.data();
        let gd = gamma.data();
        let bd = beta.data();
        for bi in 0..b {
            for (gi, &(c0, c1)) in ranges.iter().enumerate() {
                let (mu, istd, ga, be) = (mean[gi], inv_std[gi], gd[gi], bd[gi]);
                for ch in c0..c1 {
                    let base = (bi * c + ch) * hw;
                    for (o, &x) in out[base..base + hw].iter_mut().zip(&id[base..base + hw]) {
                        *o = ga * (x - mu) * istd + be;
                    }
                }
            }
        }
    }
    let shape = vec![b, c, h, w];
    let record = grad_enabled()
        && (input.needs_grad() || gamma.needs_grad() || beta.needs_grad());
    if record {
        let op = match phase {
            Phase::Train => Op::BatchNorm {
                input: input.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                ranges: Arc::clone(ranges),
                mean,
                inv_std,
            },
            Phase::Eval => Op::BatchNormEval {
                input: input.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                ranges: Arc::clone(ranges),
                mean,
                inv_std,
            },
        };
        Ok(Tensor::from_op(shape, out, op))
    } else {
        Ok(Tensor::from_vec(&shape, out).expect("shape computed"))
    }
}

/// Per-channel batch normalization: one statistic/affine pair per channel.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_channel<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
    phase: Phase,
    momentum: f64,
    eps: f64,
) -> Result<Tensor<T>> {
    let [_, c, _, _] = shape4(input, "batchnorm")?;
    let ranges: ChannelRanges = Arc::new((0..c).map(|i| (i, i + 1)).collect());
    batchnorm_groups(input, gamma, beta, running, &ranges, phase, momentum, eps)
}

pub(crate) fn batchnorm_backward_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    ranges: &[(usize, usize)],
    mean: &[T],
    inv_std: &[T],
    grad: &[T],
) {
    let s = input.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let ng = ranges.len();
    let need_in = input.needs_grad();
    let id = input.data();
    let gd = gamma.data();
    let mut dgamma = vec![T::zero(); ng];
    let mut dbeta = vec![T::zero(); ng];
    let mut din = if need_in { vec![T::zero(); input.numel()] } else { Vec::new() };
    for (gi, &(c0, c1)) in ranges.iter().enumerate() {
        let m_count = b * (c1 - c0) * hw;
        let inv_m = T::one() / T::from_usize(m_count).unwrap();
        let (mu, istd) = (mean[gi], inv_std[gi]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for bi in 0..b {
            for ch in c0..c1 {
                let base = (bi * c + ch) * hw;
                for (&dy, &x) in grad[base..base + hw].iter().zip(&id[base..base + hw]) {
                    sum_dy += dy;
                    sum_dy_xhat += dy * (x - mu) * istd;
                }
            }
        }
        dgamma[gi] = sum_dy_xhat;
        dbeta[gi] = sum_dy;
        if need_in {
            let k1 = sum_dy * inv_m;
            let k2 = sum_dy_xhat * inv_m;
            let a = gd[gi] * istd;
            for bi in 0..b {
                for ch in c0..c1 {
                    let base = (bi * c + ch) * hw;
                    for i in base..base + hw {
                        let xhat = (id[i] - mu) * istd;
                        din[i] = a * (grad[i] - k1 - xhat * k2);
                    }
                }
            }
        }
    }
    drop(id);
    drop(gd);
    if need_in {
        input.accumulate_grad(&din);
    }
    gamma.accumulate_grad(&dgamma);
    beta.accumulate_grad(&dbeta);
}

pub(crate) fn batchnorm_backward_eval<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    ranges: &[(usize, usize)],
    mean: &[T],
    inv_std: &[T],
    grad: &[T],
) {
    let s = input.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let ng = ranges.len();
    let need_in = input.needs_grad();
    let id = input.data();
    let gd = gamma.data();
    let mut dgamma = vec![T::zero(); ng];
    let mut dbeta = vec![T::zero(); ng];
    let mut din = if need_in { vec![T::zero(); input.numel()] } else { Vec::new() };
    for (gi, &(c0, c1)) in ranges.iter().enumerate() {
        let (mu, istd) = (mean[gi], inv_std[gi]);
        let a = gd[gi] * istd;
        for bi in 0..b {
            for ch in c0..c1 {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    let dy = grad[i];
                    dbeta[gi] += dy;
                    dgamma[gi] += dy * (id[i] - mu) * istd;
                    if need_in {
                        din[i] = dy * a;
                    }
                }
            }
        }
    }
    drop(id);
    drop(gd);
    if need_in {
        input.accumulate_grad(&din);
    }
    gamma.accumulate_grad(&dgamma);
    beta.accumulate_grad(&dbeta);
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean negative log-softmax of the true class, stabilized by max-subtraction.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("expected [B,K] logits, got {:?}", s),
        ));
    }
    let (b, k) = (s[0], s[1]);
    if labels.len() != b {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for batch of {}", labels.len(), b),
        ));
    }
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::IndexError {
                context: "softmax_cross_entropy",
                detail: format!("label {} at position {} out of range [0,{})", y, i, k),
            });
        }
    }
    let mut probs = vec![T::zero(); b * k];
    let mut loss = T::zero();
    {
        let ld = logits.data();
        for bi in 0..b {
            let row = &ld[bi * k..(bi + 1) * k];
            let mut mx = row[0];
            for &z in row.iter().skip(1) {
                if z > mx {
                    mx = z;
                }
            }
            let mut denom = T::zero();
            for (j, &z) in row.iter().enumerate() {
                let e = (z - mx).exp();
                probs[bi * k + j] = e;
                denom += e;
            }
            let inv = T::one() / denom;
            for j in 0..k {
                probs[bi * k + j] *= inv;
            }
            loss += denom.ln() - (row[labels[bi]] - mx);
        }
    }
    loss /= T::from_usize(b).unwrap();
    if grad_enabled() && logits.needs_grad() {
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits: logits.clone(),
                labels: Arc::new(labels.to_vec()),
                probs,
            },
        ))
    } else {
        Ok(Tensor::scalar(loss))
    }
}

/// Mean binary cross-entropy on logits, in the numerically stable form
/// `max(z,0) - z*t + ln(1 + exp(-|z|))`.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.shape() != targets.shape() {
        return Err(Error::shape(
            "bce_with_logits",
            format!("{:?} vs {:?}", logits.shape(), targets.shape()),
        ));
    }
    let n = logits.numel();
    let mut loss = T::zero();
    {
        let ld = logits.data();
        let td = targets.data();
        for (i, (&z, &t)) in ld.iter().zip(td.iter()).enumerate() {
            if t != T::zero() && t != T::one() {
                return Err(Error::arg(
                    "bce_with_logits",
                    format!("target at flat index {} is {}, must be 0 or 1", i, t),
                ));
            }
            let pos = if z > T::zero() { z } else { T::zero() };
            loss += pos - z * t + (-z.abs()).exp().ln_1p();
        }
    }
    loss /= T::from_usize(n).unwrap();
    if grad_enabled() && logits.needs_grad() {
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            Op::BceWithLogits {
                logits: logits.clone(),
                targets: targets.clone(),
            },
        ))
    } else {
        Ok(Tensor::scalar(loss))
    }
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

/// Concatenates 4-d tensors along the channel dimension.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if inputs.is_empty() {
        return Err(Error::arg("concat_channels", "need at least one input"));
    }
    let [b, _, h, w] = shape4(inputs[0], "concat_channels")?;
    let mut c_total = 0usize;
    for t in inputs {
        let [tb, tc, th, tw] = shape4(t, "concat_channels")?;
        if tb != b || th != h || tw != w {
            return Err(Error::shape(
                "concat_channels",
                format!("incompatible shapes {:?} vs {:?}", inputs[0].shape(), t.shape()),
            ));
        }
        c_total += tc;
    }
    let hw = h * w;
    let mut out = vec![T::zero(); b * c_total * hw];
    let mut offset = 0usize;
    for t in inputs {
        let tc = t.shape()[1];
        let td = t.data();
        for bi in 0..b {
            let src = &td[bi * tc * hw..(bi + 1) * tc * hw];
            let dst = &mut out[(bi * c_total + offset) * hw..(bi * c_total + offset + tc) * hw];
            dst.copy_from_slice(src);
        }
        offset += tc;
    }
    let shape = vec![b, c_total, h, w];
    if grad_enabled() && inputs.iter().any(|t| t.needs_grad()) {
        Ok(Tensor::from_op(
            shape,
            out,
            Op::ConcatChannels {
                inputs: inputs.iter().map(|&t| t.clone()).collect(),
            },
        ))
    } else {
        Ok(Tensor::from_vec(&shape, out).expect("shape computed"))
    }
}

/// Mean over each channel group: `[B,C,H,W] -> [B,G,H,W]`.
pub fn group_mean_channels<T: Scalar>(
    input: &Tensor<T>,
    ranges: &ChannelRanges,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = shape4(input, "group_mean_channels")?;
    validate_ranges(c, ranges, "group_mean_channels")?;
    let ng = ranges.len();
    let hw = h * w;
    let mut out = vec![T::zero(); b * ng * hw];
    {
        let id = input.data();
        for bi in 0..b {
            for (gi, &(c0, c1)) in ranges.iter().enumerate() {
                let inv = T::one() / T::from_usize(c1 - c0).unwrap();
                let dst = &mut out[(bi * ng + gi) * hw..(bi * ng + gi + 1) * hw];
                for ch in c0..c1 {
                    let src = &id[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                    for (d, &x) in dst.iter_mut().zip(src) {
                        *d += x;
                    }
                }
                for d in dst.iter_mut() {
                    *d *= inv;
                }
            }
        }
    }
    let shape = vec![b, ng, h, w];
    if grad_enabled() && input.needs_grad() {
        Ok(Tensor::from_op(
            shape,
            out,
            Op::GroupMeanChannels {
                input: input.clone(),
                ranges: Arc::clone(ranges),
            },
        ))
    } else {
        Ok(Tensor::from_vec(&shape, out).expect("shape computed"))
    }
}

/// Global average over the spatial grid: `[B,C,H,W] -> [B,C]`.
pub fn spatial_mean<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = shape4(input, "spatial_mean")?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let mut out = vec![T::zero(); b * c];
    {
        let id = input.data();
        for i in 0..b * c {
            let mut acc = T::zero();
            for &x in &id[i * hw..(i + 1) * hw] {
                acc += x;
            }
            out[i] = acc * inv;
        }
    }
    let shape = vec![b, c];
    if grad_enabled() && input.needs_grad() {
        Ok(Tensor::from_op(
            shape,
            out,
            Op::SpatialMean {
                input: input.clone(),
            },
        ))
    } else {
        Ok(Tensor::from_vec(&shape, out).expect("shape computed"))
    }
}

/// Reinterprets the buffer with a new shape of equal element count.
pub fn reshape<T: Scalar>(input: &Tensor<T>, new_shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = new_shape.iter().product();
    if n != input.numel() {
        return Err(Error::shape(
            "reshape",
            format!("{:?} ({} elements) -> {:?} ({})", input.shape(), input.numel(), new_shape, n),
        ));
    }
    let data = input.data().clone();
    if grad_enabled() && input.needs_grad() {
        Ok(Tensor::from_op(
            new_shape.to_vec(),
            data,
            Op::Reshape {
                input: input.clone(),
            },
        ))
    } else {
        Ok(Tensor::from_vec(new_shape, data).expect("count checked"))
    }
}

/// Flattens `[B, ...] -> [B, prod(...)]`.
pub fn flatten<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.is_empty() {
        return Err(Error::shape("flatten", "tensor has no dimensions".to_string()));
    }
    let rest: usize = s[1..].iter().product();
    reshape(input, &[s[0], rest])
}

// ---------------------------------------------------------------------------
// Field-structured ops (one scalar / one mask value per field)
// ---------------------------------------------------------------------------

/// Adds one learnable scalar per channel group (field) to every channel of
/// that group.
pub fn bias_fields<T: Scalar>(
    input: &Tensor<T>,
    bias: &Tensor<T>,
    ranges: &ChannelRanges,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = shape4(input, "bias_fields")?;
    validate_ranges(c, ranges, "bias_fields")?;
    if bias.shape() != [ranges.len()] {
        return Err(Error::shape(
            "bias_fields",
            format!("bias shape {:?}, expected [{}]", bias.shape(), ranges.len()),
        ));
    }
    let hw = h * w;
    let mut out = input.data().clone();
    {
        let bd = bias.data();
        for bi in 0..b {
            for (fi, &(c0, c1)) in ranges.iter().enumerate() {
                let bv = bd[fi];
                for ch in c0..c1 {
                    let base = (bi * c + ch) * hw;
                    for o in out[base..base + hw].iter_mut() {
                        *o += bv;
                    }
                }
            }
        }
    }
    let shape = vec![b, c, h, w];
    if grad_enabled() && (input.needs_grad() || bias.needs_grad()) {
        Ok(Tensor::from_op(
            shape,
            out,
            Op::BiasFields {
                input: input.clone(),
                bias: bias.clone(),
                ranges: Arc::clone(ranges),
            },
        ))
    } else {
        Ok(Tensor::from_vec(&shape, out).expect("shape computed"))
    }
}

/// Applies a precomputed compact dropout mask (one multiplier per
/// batch/field/pixel, replicated across the field's channels).
pub fn dropout_fields_with_mask<T: Scalar>(
    input: &Tensor<T>,
    ranges: &ChannelRanges,
    mask: Arc<Vec<T>>,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = shape4(input, "dropout_fields")?;
    validate_ranges(c, ranges, "dropout_fields")?;
    let nf = ranges.len();
    let hw = h * w;
    if mask.len() != b * nf * hw {
        return Err(Error::shape(
            "dropout_fields",
            format!("mask has {} entries, expected {}", mask.len(), b * nf * hw),
        ));
    }
    let mut out = vec![T::zero(); input.numel()];
    {
        let id = input.data();
        for bi in 0..b {
            for (fi, &(c0, c1)) in ranges.iter().enumerate() {
                let msl = &mask[(bi * nf + fi) * hw..(bi * nf + fi + 1) * hw];
                for ch in c0..c1 {
                    let base = (bi * c + ch) * hw;
                    for ((o, &x), &m) in out[base..base + hw]
                        .iter_mut()
                        .zip(&id[base..base + hw])
                        .zip(msl)
                    {
                        *o = x * m;
                    }
                }
            }
        }
    }
    let shape = vec![b, c, h, w];
    if grad_enabled() && input.needs_grad() {
        Ok(Tensor::from_op(
            shape,
            out,
            Op::DropoutFields {
                input: input.clone(),
                ranges: Arc::clone(ranges),
                mask,
            },
        ))
    } else {
        Ok(Tensor::from_vec(&shape, out).expect("shape computed"))
    }
}

/// Field-coherent inverted dropout: one Bernoulli draw per batch/field/pixel,
/// shared across the field's channels; survivors are scaled by `1/(1-p)`.
pub fn dropout_fields<T: Scalar, R: rand::Rng>(
    input: &Tensor<T>,
    ranges: &ChannelRanges,
    p: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg(
            "dropout_fields",
            format!("probability {} outside [0,1]", p),
        ));
    }
    if p == 0.0 {
        return Ok(input.clone());
    }
    let [b, _, h, w] = shape4(input, "dropout_fields")?;
    let nf = ranges.len();
    let hw = h * w;
    let keep_scale = if p >= 1.0 { T::zero() } else { lit::<T>(1.0 / (1.0 - p)) };
    let mut mask = vec![T::zero(); b * nf * hw];
    for m in mask.iter_mut() {
        let u: f64 = rng.gen();
        *m = if p >= 1.0 || u < p { T::zero() } else { keep_scale };
    }
    dropout_fields_with_mask(input, ranges, Arc::new(mask))
}

/// Expands basis coefficients into a convolution kernel through a
/// [`KernelExpander`]; gradients flow back to the coefficients.
pub fn expand_kernel_op<T: Scalar>(
    coeffs: &Tensor<T>,
    expander: Arc<dyn KernelExpander<T>>,
) -> Result<Tensor<T>> {
    if coeffs.numel() != expander.coeff_count() {
        return Err(Error::shape(
            "expand_kernel",
            format!(
                "{} coefficients supplied, basis has {}",
                coeffs.numel(),
                expander.coeff_count()
            ),
        ));
    }
    let dims = expander.kernel_dims();
    let mut out = vec![T::zero(); dims.iter().product()];
    expander.expand(&coeffs.data(), &mut out);
    let shape = dims.to_vec();
    if grad_enabled() && coeffs.needs_grad() {
        Ok(Tensor::from_op(
            shape,
            out,
            Op::ExpandKernel {
                coeffs: coeffs.clone(),
                expander,
            },
        ))
    } else {
        Ok(Tensor::from_vec(&shape, out).expect("shape computed"))
    }
}
