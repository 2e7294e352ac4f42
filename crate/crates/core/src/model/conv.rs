//! 2-D convolution and its dense affine expansion.

use ndarray::{Array1, Array2, Array4};

use super::Affine;
use crate::error::{Error, Result};

/// Zero-padded 2-D convolution over a channel-major `(channels, height, width)`
/// input. `filters` has shape `[out_channels, in_channels, kernel_h, kernel_w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub filters: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub input_shape: (usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        filters: Array4<f64>,
        bias: Array1<f64>,
        stride: (usize, usize),
        padding: (usize, usize),
        input_shape: (usize, usize, usize),
    ) -> Result<Self> {
        let conv = Self {
            filters,
            bias,
            stride,
            padding,
            input_shape,
        };
        conv.output_shape()?;
        Ok(conv)
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.input_shape;
        c * h * w
    }

    /// `(out_channels, out_height, out_width)`.
    pub fn output_shape(&self) -> Result<(usize, usize, usize)> {
        let (co, ci, kh, kw) = self.filters.dim();
        let (c, h, w) = self.input_shape;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if ci != c {
            return Err(Error::Shape(format!(
                "filters expect {ci} input channels, input has {c}"
            )));
        }
        if self.bias.len() != co {
            return Err(Error::Shape(format!(
                "bias has {} entries for {co} output channels",
                self.bias.len()
            )));
        }
        if co == 0 || kh == 0 || kw == 0 || sh == 0 || sw == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape("zero extent in convolution".into()));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        Ok((co, (h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }

    pub fn output_len(&self) -> Result<usize> {
        let (c, h, w) = self.output_shape()?;
        Ok(c * h * w)
    }

    /// Calls `visit(out_index, in_index, weight)` for every tap that lands
    /// inside the (unpadded) input.
    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize, f64)) {
        let (co, ci, kh, kw) = self.filters.dim();
        let (_, h, w) = self.input_shape;
        let (_, oh, ow) = self.output_shape().expect("validated");
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (o * oh + oy) * ow + ox;
                    for i in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let col = (i * h + iy as usize) * w + ix as usize;
                                visit(row, col, self.filters[[o, i, ky, kx]]);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (_, oh, ow) = self.output_shape().expect("validated");
        let mut out: Vec<f64> = self
            .bias
            .iter()
            .flat_map(|&b| std::iter::repeat_n(b, oh * ow))
            .collect();
        self.for_each_tap(|row, col, wgt| out[row] += wgt * x[col]);
        out
    }
}

/// Dense matrix form of a convolution: `conv(x) == W x + b` for every `x`.
pub fn conv_to_affine(conv: &Conv2d) -> Result<Affine> {
    let (_, oh, ow) = conv.output_shape()?;
    let rows = conv.output_len()?;
    let mut weight = Array2::zeros((rows, conv.input_len()));
    conv.for_each_tap(|row, col, wgt| weight[[row, col]] += wgt);
    let bias: Array1<f64> = conv
        .bias
        .iter()
        .flat_map(|&b| std::iter::repeat_n(b, oh * ow))
        .collect();
    Affine::new(weight, bias)
}
