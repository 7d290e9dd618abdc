//! Planar resampling primitives shared by the group actions, the kernel
//! solver, the data pipeline, and the metrics.
//!
//! Rotations are counterclockwise about the pixel-grid center
//! `((H-1)/2, (W-1)/2)`. Quarter turns are exact index permutations; every
//! other angle is resampled (bilinear for continuous data, nearest for
//! masks) with zero fill outside the source grid.

use crate::tensor::Scalar;

/// Number of exact quarter turns for rotation index `k` of an order-`n`
/// cyclic rotation set, when the angle `k * 2pi/n` is a multiple of 90
/// degrees.
pub fn quarter_turns(n: usize, k: usize) -> Option<usize> {
    if (4 * k) % n == 0 {
        Some((4 * k / n) % 4)
    } else {
        None
    }
}

/// Exact counterclockwise rotation by `q` quarter turns.
/// Returns the rotated buffer and its `(height, width)`.
pub fn rotate_quarter<T: Copy + Default>(
    src: &[T],
    h: usize,
    w: usize,
    q: usize,
) -> (Vec<T>, usize, usize) {
    debug_assert_eq!(src.len(), h * w);
    match q % 4 {
        0 => (src.to_vec(), h, w),
        1 => {
            // out[r][c] = in[c][W-1-r], output is W x H
            let mut out = vec![T::default(); h * w];
            for r in 0..w {
                for c in 0..h {
                    out[r * h + c] = src[c * w + (w - 1 - r)];
                }
            }
            (out, w, h)
        }
        2 => {
            let mut out = vec![T::default(); h * w];
            for r in 0..h {
                for c in 0..w {
                    out[r * w + c] = src[(h - 1 - r) * w + (w - 1 - c)];
                }
            }
            (out, h, w)
        }
        _ => {
            // out[r][c] = in[H-1-c][r], output is W x H
            let mut out = vec![T::default(); h * w];
            for r in 0..w {
                for c in 0..h {
                    out[r * h + c] = src[(h - 1 - c) * w + r];
                }
            }
            (out, w, h)
        }
    }
}

/// Mirror across the vertical axis through the image center.
pub fn flip_horizontal<T: Copy>(src: &[T], h: usize, w: usize) -> Vec<T> {
    debug_assert_eq!(src.len(), h * w);
    let mut out = src.to_vec();
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = src[r * w + (w - 1 - c)];
        }
    }
    out
}

/// Source pixel position (row, col) that maps onto output pixel `(r, c)`
/// under a counterclockwise rotation by `angle` about the grid center.
fn source_position(r: usize, c: usize, h: usize, w: usize, angle: f64) -> (f64, f64) {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    // Math coordinates: x right, y up.
    let x = c as f64 - cx;
    let y = cy - r as f64;
    let (sin, cos) = (-angle).sin_cos();
    let xs = x * cos - y * sin;
    let ys = x * sin + y * cos;
    (cy - ys, xs + cx)
}

/// Counterclockwise rotation by an arbitrary angle (radians), bilinear
/// resampling, zero fill. Output has the same dimensions as the input.
pub fn rotate_bilinear<T: Scalar>(src: &[T], h: usize, w: usize, angle: f64) -> Vec<T> {
    debug_assert_eq!(src.len(), h * w);
    let mut out = vec![T::zero(); h * w];
    for r in 0..h {
        for c in 0..w {
            let (rs, cs) = source_position(r, c, h, w, angle);
            let r0 = rs.floor();
            let c0 = cs.floor();
            let fr = rs - r0;
            let fc = cs - c0;
            let mut acc = 0.0f64;
            for (dr, wr) in [(0i64, 1.0 - fr), (1, fr)] {
                for (dc, wc) in [(0i64, 1.0 - fc), (1, fc)] {
                    let rr = r0 as i64 + dr;
                    let cc = c0 as i64 + dc;
                    let weight = wr * wc;
                    if weight == 0.0 {
                        continue;
                    }
                    if rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64 {
                        let v = src[rr as usize * w + cc as usize].to_f64().unwrap();
                        acc += weight * v;
                    }
                }
            }
            out[r * w + c] = T::from_f64(acc).unwrap();
        }
    }
    out
}

/// Counterclockwise rotation with nearest-neighbor resampling (for masks).
pub fn rotate_nearest<T: Copy + Default>(src: &[T], h: usize, w: usize, angle: f64) -> Vec<T> {
    debug_assert_eq!(src.len(), h * w);
    let mut out = vec![T::default(); h * w];
    for r in 0..h {
        for c in 0..w {
            let (rs, cs) = source_position(r, c, h, w, angle);
            let rr = rs.round() as i64;
            let cc = cs.round() as i64;
            if rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64 {
                out[r * w + c] = src[rr as usize * w + cc as usize];
            }
        }
    }
    out
}
