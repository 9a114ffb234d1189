use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;

/// 2-D convolution over a `(channels, height, width)` input, computed as an
/// im2col matrix product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `(out_channels, in_channels * kernel * kernel)`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight: Tensor::kaiming_normal(&[out_channels, fan_in], fan_in, rng),
            bias: bias.then(|| Tensor::zeros(&[out_channels])),
            trainable,
        }
    }

    pub fn output_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn im2col(&self, input: ArrayView3<f64>) -> Array2<f64> {
        let (c, h, w) = input.dim();
        let (k, s, p) = (self.kernel, self.stride, self.padding as i64);
        let (ho, wo) = (self.output_size(h), self.output_size(w));
        let mut cols = Array2::zeros((c * k * k, ho * wo));
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let mut dst = cols.row_mut(row);
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as i64 - p;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * s + kj) as i64 - p;
                            if ix >= 0 && ix < w as i64 {
                                dst[oy * wo + ox] = input[[ch, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, (c, h, w): (usize, usize, usize)) -> Array3<f64> {
        let (k, s, p) = (self.kernel, self.stride, self.padding as i64);
        let (ho, wo) = (self.output_size(h), self.output_size(w));
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let src = dcols.row((ch * k + ki) * k + kj);
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as i64 - p;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * s + kj) as i64 - p;
                            if ix >= 0 && ix < w as i64 {
                                out[[ch, iy as usize, ix as usize]] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Pre-activation output `(out_channels, ho, wo)`.
    pub fn forward(&self, input: ArrayView3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = input.dim();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let cols = self.im2col(input);
        let mut out = self.weight.view2().dot(&cols);
        if let Some(b) = &self.bias {
            for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(&b.data) {
                row += bv;
            }
        }
        let (ho, wo) = (self.output_size(h), self.output_size(w));
        let out = out.into_shape_with_order((self.out_channels, ho, wo)).expect("conv output shape");
        (out, ConvCache { cols, in_shape: (c, h, w) })
    }

    /// Returns `(d_weight, d_bias, d_input)`; `d_input` only when requested.
    pub fn backward(
        &self,
        cache: &ConvCache,
        d_out: ArrayView3<f64>,
        need_input_grad: bool,
    ) -> (Tensor, Option<Tensor>, Option<Array3<f64>>) {
        let (oc, ho, wo) = d_out.dim();
        let d_out = d_out.to_shape((oc, ho * wo)).expect("contiguous grad");
        let d_w = d_out.dot(&cache.cols.t());
        let d_b = self
            .bias
            .as_ref()
            .map(|_| Tensor::from_vec(&[oc], d_out.sum_axis(Axis(1)).to_vec()));
        let d_in = need_input_grad.then(|| {
            let d_cols = self.weight.view2().t().dot(&d_out);
            self.col2im(&d_cols, cache.in_shape)
        });
        let d_w = Tensor::from_matrix(&self.weight.shape, &d_w);
        (d_w, d_b, d_in)
    }
}
