//! Convolution lowering helpers shared by the forward and backward rules.

use crate::{Scalar, TensorError};

/// Spatial output size of a strided convolution with zero padding.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize, TensorError> {
    if stride == 0 {
        return Err(TensorError::Dimension {
            op: "conv2d",
            msg: "stride must be at least 1".into(),
        });
    }
    let padded = input + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(TensorError::Dimension {
            op: "conv2d",
            msg: format!("kernel {kernel} does not fit padded input {padded} ({input} + 2*{padding})"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Spatial output size of a transposed convolution.
pub fn conv_transpose2d_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<usize, TensorError> {
    if stride == 0 {
        return Err(TensorError::Dimension {
            op: "conv2d_transpose",
            msg: "stride must be at least 1".into(),
        });
    }
    if output_padding >= stride.max(2) || (stride == 1 && output_padding != 0) {
        return Err(TensorError::Dimension {
            op: "conv2d_transpose",
            msg: format!("output padding {output_padding} must be 0 or 1 and smaller than stride {stride}"),
        });
    }
    let full = (input as isize - 1) * stride as isize + kernel as isize + output_padding as isize;
    let out = full - 2 * padding as isize;
    if input == 0 || kernel == 0 || out <= 0 {
        return Err(TensorError::Dimension {
            op: "conv2d_transpose",
            msg: format!(
                "computed output size {out} is not positive (input {input}, kernel {kernel}, stride {stride}, padding {padding})"
            ),
        });
    }
    Ok(out as usize)
}

/// Geometry of one convolution read pattern: an image of `channels x h x w`
/// sampled by `k x k` windows into an `oh x ow` grid.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds `image` into `cols[(c*k + ky)*k + kx][oy*ow + ox]`.
    pub fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let Window { channels, h, w, k, stride, pad, oh, ow } = *self;
        let ncols = oh * ow;
        for c in 0..channels {
            let plane = &image[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: scatters `cols` back onto `image`,
    /// accumulating into its current contents.
    pub fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let Window { channels, h, w, k, stride, pad, oh, ow } = *self;
        let ncols = oh * ow;
        for c in 0..channels {
            let plane = &mut image[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formulas() {
        assert_eq!(conv2d_output_size(28, 5, 2, 2).unwrap(), 14);
        assert_eq!(conv2d_output_size(14, 5, 2, 2).unwrap(), 7);
        assert_eq!(conv2d_output_size(7, 5, 2, 2).unwrap(), 4);
        assert_eq!(conv2d_output_size(3, 3, 1, 0).unwrap(), 1);
        assert!(conv2d_output_size(3, 5, 1, 0).is_err());
        assert!(conv2d_output_size(3, 3, 0, 0).is_err());
        assert_eq!(conv_transpose2d_output_size(14, 5, 2, 2, 0).unwrap(), 27);
        assert_eq!(conv_transpose2d_output_size(14, 5, 2, 2, 1).unwrap(), 28);
        assert_eq!(conv_transpose2d_output_size(4, 5, 2, 2, 0).unwrap(), 7);
        assert!(conv_transpose2d_output_size(1, 1, 1, 1, 0).is_err());
        assert!(conv_transpose2d_output_size(4, 3, 1, 0, 1).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let win = Window { channels: 2, h: 5, w: 6, k: 3, stride: 2, pad: 1, oh: 3, ow: 3 };
        let x: Vec<f64> = (0..60).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..win.col_rows() * win.col_cols()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let mut cols = vec![0.0; y.len()];
        win.im2col(&x, &mut cols);
        let mut back = vec![0.0; x.len()];
        win.col2im(&y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
