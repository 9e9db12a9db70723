//! Raw numeric kernels used by the tape. Shapes are validated by the caller.

use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes (trailing axes aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0; ndim];
    for i in 0..ndim {
        let da = if i + a.len() >= ndim { a[i + a.len() - ndim] } else { 1 };
        let db = if i + b.len() >= ndim { b[i + b.len() - ndim] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    "broadcast",
                    format!("{a:?} and {b:?} are not broadcast-compatible"),
                ))
            }
        };
    }
    Ok(out)
}

/// For every linear index of `out`, the linear index into a tensor of shape
/// `input` that broadcasts to it.
pub(crate) fn broadcast_index(input: &[usize], out: &[usize]) -> Vec<usize> {
    let numel: usize = out.iter().product();
    let in_numel: usize = input.iter().product();
    if input == out {
        return (0..numel).collect();
    }
    if in_numel == 1 {
        return vec![0; numel];
    }
    let ndim = out.len();
    let offset = ndim - input.len();
    // Strides of the input expressed on the output axes; broadcast axes get 0.
    let mut strides = vec![0usize; ndim];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= input[i];
    }
    let mut index = Vec::with_capacity(numel);
    let mut counter = vec![0usize; ndim];
    let mut pos = 0usize;
    for _ in 0..numel {
        index.push(pos);
        for axis in (0..ndim).rev() {
            counter[axis] += 1;
            pos += strides[axis];
            if counter[axis] < out[axis] {
                break;
            }
            pos -= strides[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
    index
}

/// Sums `grad` (shaped like the broadcast output) back into the input shape.
pub(crate) fn reduce_to(grad: &[f64], index: &[usize], in_numel: usize) -> Vec<f64> {
    if index.len() == in_numel {
        // Same shape: the index map is the identity.
        return grad.to_vec();
    }
    let mut out = vec![0.0; in_numel];
    for (g, &i) in grad.iter().zip(index) {
        out[i] += g;
    }
    out
}

/// General matrix product `c = a * b + beta * c` on strided operands.
///
/// `a` is `m x k` with row/column strides `(ars, acs)`, `b` is `k x n`, and
/// `c` is a dense row-major `m x n` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ars: isize,
    acs: isize,
    b: &[f64],
    brs: isize,
    bcs: isize,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
        }
    };
    assert!(a.len() as isize >= span(m, k, ars, acs));
    assert!(b.len() as isize >= span(k, n, brs, bcs));
    // SAFETY: the assertions above keep every strided access in bounds and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            ars,
            acs,
            b.as_ptr(),
            brs,
            bcs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1 zero-padded 1-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len_in: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn len_out(&self) -> usize {
        self.len_in + 2 * self.pad + 1 - self.kernel
    }

    fn rows(&self) -> usize {
        self.c_in * self.kernel
    }
}

/// Unfolds `x` (`[batch, c_in, len_in]`) to `[c_in * kernel, batch * len_out]`.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let lo = g.len_out();
    let width = g.batch * lo;
    let mut cols = vec![0.0; g.rows() * width];
    for ci in 0..g.c_in {
        for k in 0..g.kernel {
            let row = (ci * g.kernel + k) * width;
            // Output position t reads input position t + k - pad.
            let t_start = g.pad.saturating_sub(k);
            let t_end = (g.len_in + g.pad).saturating_sub(k).min(lo);
            for n in 0..g.batch {
                let src = &x[(n * g.c_in + ci) * g.len_in..][..g.len_in];
                let dst = &mut cols[row + n * lo..][..lo];
                for t in t_start..t_end {
                    dst[t] = src[t + k - g.pad];
                }
            }
        }
    }
    cols
}

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let lo = g.len_out();
    let width = g.batch * lo;
    let cols = im2col(x, g);
    let mut tmp = vec![0.0; g.c_out * width];
    gemm(
        g.c_out,
        g.rows(),
        width,
        w,
        g.rows() as isize,
        1,
        &cols,
        width as isize,
        1,
        0.0,
        &mut tmp,
    );
    let mut out = vec![0.0; g.batch * g.c_out * lo];
    for co in 0..g.c_out {
        for n in 0..g.batch {
            let src = &tmp[co * width + n * lo..][..lo];
            let dst = &mut out[(n * g.c_out + co) * lo..][..lo];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b[co];
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let lo = g.len_out();
    let width = g.batch * lo;
    // Regroup grad_out as [c_out, batch * len_out] to match the im2col layout.
    let mut go = vec![0.0; g.c_out * width];
    let mut gb = vec![0.0; g.c_out];
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let src = &grad_out[(n * g.c_out + co) * lo..][..lo];
            go[co * width + n * lo..][..lo].copy_from_slice(src);
            gb[co] += src.iter().sum::<f64>();
        }
    }
    let mut gw = Vec::new();
    if want_w {
        let cols = im2col(x, g);
        gw = vec![0.0; g.c_out * g.rows()];
        // gw = go [c_out, width] * cols^T [width, rows]
        gemm(
            g.c_out,
            width,
            g.rows(),
            &go,
            width as isize,
            1,
            &cols,
            1,
            width as isize,
            0.0,
            &mut gw,
        );
    }
    let mut gx = Vec::new();
    if want_x {
        let mut gcols = vec![0.0; g.rows() * width];
        // gcols = w^T [rows, c_out] * go [c_out, width]
        gemm(
            g.rows(),
            g.c_out,
            width,
            w,
            1,
            g.rows() as isize,
            &go,
            width as isize,
            1,
            0.0,
            &mut gcols,
        );
        gx = vec![0.0; g.batch * g.c_in * g.len_in];
        for ci in 0..g.c_in {
            for k in 0..g.kernel {
                let row = (ci * g.kernel + k) * width;
                let t_start = g.pad.saturating_sub(k);
                let t_end = (g.len_in + g.pad).saturating_sub(k).min(lo);
                for n in 0..g.batch {
                    let src = &gcols[row + n * lo..][..lo];
                    let dst = &mut gx[(n * g.c_in + ci) * g.len_in..][..g.len_in];
                    for t in t_start..t_end {
                        dst[t + k - g.pad] += src[t];
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Bin boundaries for adaptive average pooling of `len` samples into `out`
/// bins: equal widths, with the remainder spread one extra sample over the
/// leading bins.
pub(crate) fn pool_bins(len: usize, out: usize) -> Vec<(usize, usize)> {
    let base = len / out;
    let rem = len % out;
    let mut bins = Vec::with_capacity(out);
    let mut start = 0;
    for i in 0..out {
        let width = base + usize::from(i < rem);
        bins.push((start, start + width));
        start += width;
    }
    bins
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shape(&[2, 3], &[2]).is_err());
    }

    #[test]
    fn broadcast_index_matches_manual_layout() {
        // [2,1] broadcast to [2,3]
        assert_eq!(broadcast_index(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
        // [3] broadcast to [2,3]
        assert_eq!(broadcast_index(&[3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
        // [1,2,1] to [2,2,2]
        assert_eq!(
            broadcast_index(&[1, 2, 1], &[2, 2, 2]),
            vec![0, 0, 1, 1, 0, 0, 1, 1]
        );
    }

    #[test]
    fn pool_bins_spread_remainder_to_leading_bins() {
        assert_eq!(pool_bins(8, 4), vec![(0, 2), (2, 4), (4, 6), (6, 8)]);
        assert_eq!(pool_bins(10, 4), vec![(0, 3), (3, 6), (6, 8), (8, 10)]);
        assert_eq!(pool_bins(3, 3), vec![(0, 1), (1, 2), (2, 3)]);
    }

    fn conv_naive(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let lo = g.len_out();
        let mut out = vec![0.0; g.batch * g.c_out * lo];
        for n in 0..g.batch {
            for co in 0..g.c_out {
                for t in 0..lo {
                    let mut acc = b[co];
                    for ci in 0..g.c_in {
                        for k in 0..g.kernel {
                            let src = t as isize + k as isize - g.pad as isize;
                            if src >= 0 && (src as usize) < g.len_in {
                                acc += w[(co * g.c_in + ci) * g.kernel + k]
                                    * x[(n * g.c_in + ci) * g.len_in + src as usize];
                            }
                        }
                    }
                    out[(n * g.c_out + co) * lo + t] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let g = ConvGeom {
            batch: 2,
            c_in: 3,
            c_out: 4,
            len_in: 9,
            kernel: 5,
            pad: 2,
        };
        let x: Vec<f64> = (0..g.batch * g.c_in * g.len_in)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0)
            .collect();
        let w: Vec<f64> = (0..g.c_out * g.c_in * g.kernel)
            .map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0)
            .collect();
        let b = vec![0.1, -0.2, 0.3, 0.0];
        let fast = conv1d_forward(&x, &w, &b, &g);
        let slow = conv_naive(&x, &w, &b, &g);
        for (a, s) in fast.iter().zip(&slow) {
            assert!((a - s).abs() < 1e-12);
        }
    }
}
