//! Convolution kernels (im2col + GEMM).

use crate::tensor::{Real, Strides};

/// Geometry of a 2-D convolution over a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Output side length under the floor rule.
pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        conv_out(self.height, self.kernel, self.stride, self.pad)
    }
    pub fn out_w(&self) -> usize {
        conv_out(self.width, self.kernel, self.stride, self.pad)
    }
    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (Ho·Wo)` matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let out = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (xo, d) in dst.iter_mut().enumerate() {
                        let ix = (xo * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
pub fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for xo in 0..ow {
                        let ix = (xo * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[y * ow + xo];
                        }
                    }
                }
            }
        }
    }
}

/// Batched forward convolution. `x`: `N×C×H×W`, `w`: `O×C×k×k`, returns `N×O×Ho×Wo`.
pub fn conv2d_forward<T: Real>(x: &[T], n: usize, w: &[T], out_ch: usize, g: &ConvGeom) -> Vec<T> {
    let in_len = g.in_channels * g.height * g.width;
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); n * out_ch * cols_n];
    let mut cols = vec![T::zero(); rows * cols_n];
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        T::gemm(
            out_ch,
            rows,
            cols_n,
            T::one(),
            w,
            Strides::row_major(rows),
            src,
            Strides::row_major(cols_n),
            T::zero(),
            &mut out[b * out_ch * cols_n..(b + 1) * out_ch * cols_n],
            Strides::row_major(cols_n),
        );
    }
    out
}

/// Gradients of a convolution. Accumulates into `dw` and (if given) `dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    n: usize,
    w: &[T],
    out_ch: usize,
    g: &ConvGeom,
    dy: &[T],
    dw: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let in_len = g.in_channels * g.height * g.width;
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); rows * cols_n];
    let mut dcols = vec![T::zero(); rows * cols_n];
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let dyb = &dy[b * out_ch * cols_n..(b + 1) * out_ch * cols_n];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        T::gemm(
            out_ch,
            cols_n,
            rows,
            T::one(),
            dyb,
            Strides::row_major(cols_n),
            src,
            Strides::transposed(cols_n),
            T::one(),
            dw,
            Strides::row_major(rows),
        );
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(
                    rows,
                    out_ch,
                    cols_n,
                    T::one(),
                    w,
                    Strides::transposed(rows),
                    dyb,
                    Strides::row_major(cols_n),
                    T::one(),
                    dxb,
                    Strides::row_major(cols_n),
                );
            } else {
                T::gemm(
                    rows,
                    out_ch,
                    cols_n,
                    T::one(),
                    w,
                    Strides::transposed(rows),
                    dyb,
                    Strides::row_major(cols_n),
                    T::zero(),
                    &mut dcols,
                    Strides::row_major(cols_n),
                );
                col2im_add(&dcols, g, dxb);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(x: &[f64], w: &[f64], o: usize, g: &ConvGeom) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = 0.0;
                    for c in 0..g.in_channels {
                        for ki in 0..g.kernel {
                            for kj in 0..g.kernel {
                                let iy = (y * g.stride + ki) as isize - g.pad as isize;
                                let ix = (xo * g.stride + kj) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                                    s += x[(c * g.height + iy as usize) * g.width + ix as usize]
                                        * w[((oc * g.in_channels + c) * g.kernel + ki) * g.kernel + kj];
                                }
                            }
                        }
                    }
                    out[(oc * oh + y) * ow + xo] = s;
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect()
    }

    #[test]
    fn matches_naive_convolution() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0)] {
            let g = ConvGeom {
                in_channels: 2,
                height: 5,
                width: 6,
                kernel: k,
                stride: s,
                pad: p,
            };
            let x = ramp(2 * 5 * 6, 0.1);
            let w = ramp(3 * 2 * k * k, 0.3);
            let fast = conv2d_forward(&x, 1, &w, 3, &g);
            let slow = naive_conv(&x, &w, 3, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), dy> = <x, conv^T(dy)> and = <w, dW(dy)>
        let g = ConvGeom {
            in_channels: 3,
            height: 7,
            width: 7,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = ramp(3 * 49, 0.2);
        let w = ramp(4 * 27, 0.1);
        let y = conv2d_forward(&x, 1, &w, 4, &g);
        let dy = ramp(y.len(), 0.05);
        let mut dw = vec![0.0; w.len()];
        let mut dx = vec![0.0; x.len()];
        conv2d_backward(&x, 1, &w, 4, &g, &dy, &mut dw, Some(&mut dx));
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn floor_rule_for_odd_sizes() {
        assert_eq!(conv_out(7, 3, 2, 1), 4);
        assert_eq!(conv_out(9, 1, 2, 0), 5);
        assert_eq!(conv_out(32, 3, 2, 1), 16);
    }
}
