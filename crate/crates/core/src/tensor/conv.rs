//! im2col / col2im convolution kernels on raw NCHW buffers.
//!
//! The column buffer for one sample has `c·kh·kw` rows and `oh·ow`
//! columns; row `(ci·kh + ki)·kw + kj` holds the input pixel that kernel tap
//! `(ci, ki, kj)` sees at every output location (zero outside the padding).

use super::{Real, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// `floor((size + 2·padding − kernel) / stride) + 1`, or an error when the
/// kernel does not fit inside the padded input.
pub fn conv2d_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            detail: "stride must be at least 1".into(),
        });
    }
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            detail: format!("kernel {kernel} larger than padded input {padded}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// `(size − 1)·stride − 2·padding + kernel`.
pub fn conv_transpose2d_output_size(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv_transpose2d",
            detail: "stride must be at least 1".into(),
        });
    }
    let full = (size - 1) * stride + kernel;
    if full <= 2 * padding {
        return Err(TensorError::InvalidArgument {
            op: "conv_transpose2d",
            detail: format!("padding {padding} leaves no output for input size {size}"),
        });
    }
    Ok(full - 2 * padding)
}

pub(crate) fn im2col<T: Real>(input: &[T], g: &Geometry, cols: &mut [T]) {
    let ncols = g.col_cols();
    debug_assert_eq!(cols.len(), g.col_rows() * ncols);
    let pad = g.padding as isize;
    for ci in 0..g.channels {
        let plane = &input[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *slot = if ix < 0 || ix >= g.width as isize {
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

/// Adjoint of [`im2col`]: scatters column entries back onto the image,
/// accumulating into `out`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &Geometry, out: &mut [T]) {
    let ncols = g.col_cols();
    let pad = g.padding as isize;
    for ci in 0..g.channels {
        let plane = &mut out[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c (m×n) = a (m×k) · b (k×n) + beta·c`, all contiguous row-major.
pub(crate) fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        (a, k as isize, 1),
        (b, n as isize, 1),
        beta,
        (c, n as isize, 1),
    );
}

/// `c (m×n) = a (m×k) · bᵀ + beta·c` where `b` is stored `n×k`.
pub(crate) fn matmul_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        (a, k as isize, 1),
        (b, 1, k as isize),
        beta,
        (c, n as isize, 1),
    );
}

/// `c (m×n) = aᵀ · b + beta·c` where `a` is stored `k×m`.
pub(crate) fn matmul_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        (a, 1, m as isize),
        (b, n as isize, 1),
        beta,
        (c, n as isize, 1),
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_arithmetic() {
        assert_eq!(conv2d_output_size(4, 2, 2, 0).unwrap(), 2);
        assert_eq!(conv2d_output_size(32, 3, 2, 1).unwrap(), 16);
        assert_eq!(conv2d_output_size(3, 3, 1, 0).unwrap(), 1);
        assert!(conv2d_output_size(2, 3, 1, 0).is_err());
        assert!(conv2d_output_size(4, 2, 0, 0).is_err());
        assert_eq!(conv_transpose2d_output_size(2, 2, 2, 0).unwrap(), 4);
        assert_eq!(conv_transpose2d_output_size(8, 4, 2, 1).unwrap(), 16);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Geometry {
            channels: 2,
            height: 5,
            width: 4,
            kh: 3,
            kw: 2,
            stride: 2,
            padding: 1,
            out_h: conv2d_output_size(5, 3, 2, 1).unwrap(),
            out_w: conv2d_output_size(4, 2, 2, 1).unwrap(),
        };
        let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| ((i * 3) % 13) as f64 * 0.5 - 2.0)
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn strided_matmul_variants_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut c = [0.0; 4];
        matmul(2, 3, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [0.5, 7.0, 2.0, 16.0]);
        // bᵀ stored as 2x3
        let bt = [1.0f64, -1.0, 0.5, 0.0, 2.0, 1.0];
        let mut c2 = [0.0; 4];
        matmul_nt(2, 3, 2, &a, &bt, 0.0, &mut c2);
        assert_eq!(c, c2);
        // aᵀ stored as 3x2
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [1.0; 4];
        matmul_tn(2, 3, 2, &at, &b, 1.0, &mut c3);
        assert_eq!(c3, [1.5, 8.0, 3.0, 17.0]);
    }
}
