//! Independent reference implementations used as test oracles.
//!
//! Everything here is deliberately written from first principles — naive
//! nested loops, index-level group actions, dense Gaussian elimination —
//! and must stay independent of the implementation paths it checks in
//! `equiseg-core`. Used only from test code.

use equiseg_core::tensor::{Scalar, Tensor};

// ---------------------------------------------------------------------------
// Naive tensor-op references
// ---------------------------------------------------------------------------

/// Direct quadruple-loop cross-correlation with zero padding.
/// Accumulation order (cin, kh, kw ascending, bias last) matches the natural
/// definition, so f64 results are bit-comparable with any implementation that
/// sums patch entries in the same order.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d<T: Scalar>(
    input: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
) -> Vec<T> {
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![T::zero(); b * cout * ho * wo];
    for bi in 0..b {
        for co in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = T::zero();
                    for ci in 0..cin {
                        for dkh in 0..kh {
                            for dkw in 0..kw {
                                let ih = (oh * stride + dkh) as isize - padding as isize;
                                let iw = (ow * stride + dkw) as isize - padding as isize;
                                if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let iv = input
                                    [((bi * cin + ci) * h + ih as usize) * w + iw as usize];
                                let kv = kernel[((co * cin + ci) * kh + dkh) * kw + dkw];
                                acc += iv * kv;
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        acc += bias[co];
                    }
                    out[((bi * cout + co) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    out
}

/// Window-scan 2x2 max pooling reference.
pub fn window_scan_maxpool2<T: Scalar>(input: &[T], bc: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); bc * ho * wo];
    for i in 0..bc {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = input[i * h * w + 2 * oh * w + 2 * ow];
                for dr in 0..2 {
                    for dc in 0..2 {
                        let v = input[i * h * w + (2 * oh + dr) * w + 2 * ow + dc];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(i * ho + oh) * wo + ow] = best;
            }
        }
    }
    out
}

/// Triple-loop affine map `x[B,N] * w[M,N]^T + b[M]`.
pub fn triple_loop_matmul_bias<T: Scalar>(
    x: &[T],
    b: usize,
    n: usize,
    w: &[T],
    m: usize,
    bias: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); b * m];
    for bi in 0..b {
        for mi in 0..m {
            let mut acc = T::zero();
            for ni in 0..n {
                acc += x[bi * n + ni] * w[mi * n + ni];
            }
            out[bi * m + mi] = acc + bias[mi];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central finite differences of `eval()` with respect to every element of
/// `param`, perturbing the tensor's buffer in place and restoring it.
pub fn numeric_grad(param: &Tensor<f64>, h: f64, mut eval: impl FnMut() -> f64) -> Vec<f64> {
    let n = param.numel();
    let mut grad = vec![0.0f64; n];
    for i in 0..n {
        let orig = param.data()[i];
        param.data_mut()[i] = orig + h;
        let up = eval();
        param.data_mut()[i] = orig - h;
        let down = eval();
        param.data_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Central finite differences at selected coordinates only.
pub fn numeric_grad_at(
    param: &Tensor<f64>,
    coords: &[usize],
    h: f64,
    mut eval: impl FnMut() -> f64,
) -> Vec<f64> {
    let mut grad = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = param.data()[i];
        param.data_mut()[i] = orig + h;
        let up = eval();
        param.data_mut()[i] = orig - h;
        let down = eval();
        param.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Worst elementwise relative error between analytic and numeric gradients,
/// evaluated where either magnitude exceeds `floor`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs());
        if scale > floor {
            worst = worst.max((a - n).abs() / scale);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Dense linear algebra
// ---------------------------------------------------------------------------

/// Rank of a dense row-major `rows x cols` matrix by Gaussian elimination
/// with partial pivoting.
pub fn matrix_rank(mut m: Vec<f64>, rows: usize, cols: usize, tol: f64) -> usize {
    let mut rank = 0usize;
    let mut row = 0usize;
    for col in 0..cols {
        // Find the pivot.
        let mut best = row;
        for r in row..rows {
            if m[r * cols + col].abs() > m[best * cols + col].abs() {
                best = r;
            }
        }
        if row >= rows || m[best * cols + col].abs() <= tol {
            continue;
        }
        if best != row {
            for c in 0..cols {
                m.swap(row * cols + c, best * cols + c);
            }
        }
        let pivot = m[row * cols + col];
        for r in 0..rows {
            if r == row {
                continue;
            }
            let factor = m[r * cols + col] / pivot;
            if factor != 0.0 {
                for c in col..cols {
                    m[r * cols + c] -= factor * m[row * cols + c];
                }
            }
        }
        rank += 1;
        row += 1;
        if row == rows {
            break;
        }
    }
    rank
}

// ---------------------------------------------------------------------------
// Independent kernel-constraint system
// ---------------------------------------------------------------------------

/// A field type for the oracle's purposes: a group order, whether each field
/// is trivial (dim 1) or regular (dim = group order), built without touching
/// the core group machinery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleRep {
    Trivial,
    Regular,
}

/// Index-level spatial map for an exact rotation: where grid position
/// `(u, v)` of a `k x k` kernel lands under `q` counterclockwise quarter
/// turns about the center.
fn rotate_index(u: usize, v: usize, k: usize, q: usize) -> (usize, usize) {
    let m = (k - 1) as i64;
    let (mut y, mut x) = (m - 2 * u as i64, 2 * v as i64 - m); // doubled math coords
    for _ in 0..q % 4 {
        let (ny, nx) = (x, -y);
        y = ny;
        x = nx;
    }
    (((m - y) / 2) as usize, ((x + m) / 2) as usize)
}

/// Builds the vectorized constraint system `(A_g - I) kappa = 0` for all
/// elements `g` of the cyclic group `C_n` (which must act exactly, i.e.
/// `n` divides 4), stacked into one dense matrix, and returns its null-space
/// dimension.
///
/// The action is written from first principles at the index level:
/// `T_g(kappa)[o, i, s] = kappa[sigma_out^-1(o), sigma_in^-1(i), g^-1 . s]`
/// for permutation representations, where regular fields shift their channel
/// block by the rotation index.
pub fn constraint_nullity_cyclic(
    n: usize,
    in_fields: &[OracleRep],
    out_fields: &[OracleRep],
    k: usize,
) -> usize {
    assert!(4 % n == 0, "oracle handles exactly-acting cyclic groups only");
    let dim_of = |r: &OracleRep| match r {
        OracleRep::Trivial => 1usize,
        OracleRep::Regular => n,
    };
    let d_in: usize = in_fields.iter().map(dim_of).sum();
    let d_out: usize = out_fields.iter().map(dim_of).sum();
    let kk = k * k;
    let dim = d_out * d_in * kk;

    // Channel permutation of one field list under rotation by r:
    // channel c of a regular field at offset f0 maps to f0 + (c + r) mod n.
    let channel_map = |fields: &[OracleRep], r: usize| -> Vec<usize> {
        let mut map = Vec::new();
        let mut off = 0usize;
        for f in fields {
            match f {
                OracleRep::Trivial => {
                    map.push(off);
                    off += 1;
                }
                OracleRep::Regular => {
                    for c in 0..n {
                        map.push(off + (c + r) % n);
                    }
                    off += n;
                }
            }
        }
        map
    };

    let mut rows_total = Vec::new();
    for r in 1..n {
        let q = 4 * r / n; // quarter turns of this element
        let out_map = channel_map(out_fields, r);
        let in_map = channel_map(in_fields, r);
        // T_g(kappa)[o_new, i_new, s_new] = kappa[o, i, s]: build A_g as a
        // permutation matrix, then append rows of (A_g - I).
        for o in 0..d_out {
            for i in 0..d_in {
                for u in 0..k {
                    for v in 0..k {
                        let (ru, rv) = rotate_index(u, v, k, q);
                        let src = (o * d_in + i) * kk + u * k + v;
                        let dst = (out_map[o] * d_in + in_map[i]) * kk + ru * k + rv;
                        let mut row = vec![0.0f64; dim];
                        row[src] += 1.0;
                        row[dst] -= 1.0;
                        rows_total.push(row);
                    }
                }
            }
        }
    }
    if rows_total.is_empty() {
        return dim; // trivial group: no constraints
    }
    let rows = rows_total.len();
    let flat: Vec<f64> = rows_total.into_iter().flatten().collect();
    let rank = matrix_rank(flat, rows, dim, 1e-9);
    dim - rank
}

// ---------------------------------------------------------------------------
// Counting metric references
// ---------------------------------------------------------------------------

pub fn counting_accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let mut correct = 0usize;
    for (p, l) in preds.iter().zip(labels) {
        if p == l {
            correct += 1;
        }
    }
    correct as f64 / preds.len() as f64
}

/// Balanced accuracy by direct counting; `None` when the truth has no
/// positive pixels.
pub fn counting_balanced_accuracy(pred: &[bool], truth: &[bool]) -> Option<f64> {
    let (mut tp, mut pos, mut tn, mut neg) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        if t {
            pos += 1;
            if p {
                tp += 1;
            }
        } else {
            neg += 1;
            if !p {
                tn += 1;
            }
        }
    }
    if pos == 0 {
        return None;
    }
    let tpr = tp as f64 / pos as f64;
    if neg == 0 {
        return Some(tpr);
    }
    Some((tpr + tn as f64 / neg as f64) / 2.0)
}
