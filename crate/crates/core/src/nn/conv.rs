//! im2col-based convolution and 2x2 max pooling over NHWC activations.
//!
//! A batch of images is a `batch x (height * width * channels)` matrix with
//! channels innermost. Convolution lowers every receptive field to one row
//! of a column matrix whose columns run over `(ky, kx, c_in)`, so the
//! product with a `(k * k * c_in) x c_out` weight matrix yields NHWC output
//! directly.

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_height: usize,
    pub in_width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    /// Follow the convolution with 2x2/stride-2 max pooling.
    pub pool: bool,
}

impl ConvSpec {
    pub fn conv_height(&self) -> usize {
        (self.in_height + 2 * self.padding + 1).saturating_sub(self.kernel)
    }

    pub fn conv_width(&self) -> usize {
        (self.in_width + 2 * self.padding + 1).saturating_sub(self.kernel)
    }

    pub fn out_height(&self) -> usize {
        if self.pool {
            self.conv_height() / 2
        } else {
            self.conv_height()
        }
    }

    pub fn out_width(&self) -> usize {
        if self.pool {
            self.conv_width() / 2
        } else {
            self.conv_width()
        }
    }

    pub fn input_len(&self) -> usize {
        self.in_height * self.in_width * self.in_channels
    }

    pub fn output_len(&self) -> usize {
        self.out_height() * self.out_width() * self.out_channels
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

/// Lower a batch to its `(batch * oh * ow) x (k * k * c_in)` patch matrix.
pub(crate) fn im2col<T: Real>(input: &Matrix<T>, spec: &ConvSpec) -> Matrix<T> {
    let batch = input.rows();
    let (oh, ow) = (spec.conv_height(), spec.conv_width());
    let (h, w, cin, k, pad) = (
        spec.in_height as isize,
        spec.in_width as isize,
        spec.in_channels,
        spec.kernel,
        spec.padding as isize,
    );
    let mut cols = Matrix::zeros(batch * oh * ow, spec.patch_len());
    for n in 0..batch {
        let img = input.row(n);
        for oy in 0..oh {
            for ox in 0..ow {
                let row = cols.row_mut((n * oh + oy) * ow + ox);
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= w {
                            continue;
                        }
                        let src = ((iy * w + ix) as usize) * cin;
                        let dst = (ky * k + kx) * cin;
                        row[dst..dst + cin].copy_from_slice(&img[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input.
pub(crate) fn col2im<T: Real>(dcols: &Matrix<T>, spec: &ConvSpec, batch: usize) -> Matrix<T> {
    let (oh, ow) = (spec.conv_height(), spec.conv_width());
    let (h, w, cin, k, pad) = (
        spec.in_height as isize,
        spec.in_width as isize,
        spec.in_channels,
        spec.kernel,
        spec.padding as isize,
    );
    let mut out = Matrix::zeros(batch, spec.input_len());
    for n in 0..batch {
        let img = out.row_mut(n);
        for oy in 0..oh {
            for ox in 0..ow {
                let row = dcols.row((n * oh + oy) * ow + ox);
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= w {
                            continue;
                        }
                        let dst = ((iy * w + ix) as usize) * cin;
                        let src = (ky * k + kx) * cin;
                        for c in 0..cin {
                            img[dst + c] += row[src + c];
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2x2/stride-2 max pooling of ReLU-activated conv output.
///
/// `pre` is the `(batch * oh * ow) x c_out` pre-activation; the returned
/// indices point into its flat buffer, one per pooled output element. Ties
/// resolve to the first position in window scan order.
pub(crate) fn relu_max_pool<T: Real>(pre: &Matrix<T>, spec: &ConvSpec, batch: usize) -> (Matrix<T>, Vec<u32>) {
    let (ch, cw, c) = (spec.conv_height(), spec.conv_width(), spec.out_channels);
    let (ph, pw) = (spec.out_height(), spec.out_width());
    let src = pre.as_slice();
    let mut out = Matrix::zeros(batch, ph * pw * c);
    let mut index = vec![0u32; batch * ph * pw * c];
    for n in 0..batch {
        for py in 0..ph {
            for px in 0..pw {
                for ch_i in 0..c {
                    let mut best_idx = 0usize;
                    let mut best = T::neg_infinity();
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let (y, x) = (2 * py + dy, 2 * px + dx);
                        let idx = ((n * ch + y) * cw + x) * c + ch_i;
                        let v = src[idx].max(T::zero());
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                    let o = ((py * pw + px) * c) + ch_i;
                    out.row_mut(n)[o] = best;
                    index[n * ph * pw * c + o] = best_idx as u32;
                }
            }
        }
    }
    (out, index)
}

/// Smallest gap between the winning and runner-up activations of any pool
/// window whose winner is positive; infinity when no such window exists.
pub(crate) fn pool_margin<T: Real>(pre: &Matrix<T>, spec: &ConvSpec, batch: usize) -> f64 {
    let (ch, cw, c) = (spec.conv_height(), spec.conv_width(), spec.out_channels);
    let src = pre.as_slice();
    let mut margin = f64::INFINITY;
    for n in 0..batch {
        for py in 0..spec.out_height() {
            for px in 0..spec.out_width() {
                for ch_i in 0..c {
                    let mut vals: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| {
                            let idx = ((n * ch + 2 * py + dy) * cw + 2 * px + dx) * c + ch_i;
                            src[idx].as_f64().max(0.0)
                        })
                        .collect();
                    vals.sort_by(|a, b| b.total_cmp(a));
                    if vals[0] > 0.0 {
                        margin = margin.min(vals[0] - vals[1]);
                    }
                }
            }
        }
    }
    margin
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(h: usize, w: usize, cin: usize, cout: usize, k: usize, pad: usize, pool: bool) -> ConvSpec {
        ConvSpec {
            in_height: h,
            in_width: w,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            padding: pad,
            pool,
        }
    }

    #[test]
    fn output_geometry() {
        let s = spec(28, 28, 1, 16, 5, 0, true);
        assert_eq!((s.conv_height(), s.out_height()), (24, 12));
        let s = spec(5, 5, 32, 64, 3, 1, false);
        assert_eq!((s.out_height(), s.out_width(), s.output_len()), (5, 5, 1600));
    }

    #[test]
    fn im2col_single_channel_windows() {
        // 3x3 image, 2x2 kernel, no padding -> 4 windows.
        let s = spec(3, 3, 1, 1, 2, 0, false);
        let img = Matrix::from_vec(1, 9, (1..=9).map(|v| v as f64).collect()).unwrap();
        let cols = im2col(&img, &s);
        assert_eq!(cols.shape(), (4, 4));
        assert_eq!(cols.row(0), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(cols.row(3), &[5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn im2col_padding_reads_zero() {
        let s = spec(2, 2, 1, 1, 3, 1, false);
        let img = Matrix::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cols = im2col(&img, &s);
        assert_eq!(cols.shape(), (4, 9));
        assert_eq!(cols.row(0), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        let s = spec(4, 5, 2, 3, 3, 1, false);
        let x = Matrix::from_vec(2, s.input_len(), (0..2 * s.input_len()).map(|i| ((i * 7 % 11) as f64) - 5.0).collect()).unwrap();
        let cols = im2col(&x, &s);
        let y = Matrix::from_vec(cols.rows(), cols.cols(), (0..cols.rows() * cols.cols()).map(|i| ((i * 5 % 13) as f64) - 6.0).collect()).unwrap();
        let lhs: f64 = cols.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &s, 2);
        let rhs: f64 = x.as_slice().iter().zip(back.as_slice()).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn pooling_picks_window_max_after_relu() {
        let s = spec(3, 3, 1, 1, 1, 0, true); // conv output 3x3 -> pooled 1x1
        let pre = Matrix::from_vec(9, 1, vec![-1.0, 4.0, 0.0, 2.0, 3.0, 9.0, 9.0, 9.0, 9.0]).unwrap();
        let (out, idx) = relu_max_pool(&pre, &s, 1);
        assert_eq!(out.as_slice(), &[4.0]);
        assert_eq!(idx, vec![1]);
    }
}
