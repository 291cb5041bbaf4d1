//! 2-D cross-correlation over NHWC tensors with kernels laid out `[kh,kw,C,F]`,
//! computed as im2col followed by a matrix product.

use rayon::prelude::*;

use crate::scalar::Scalar;

use super::gemm::{col_sums, matmul, matmul_nt, matmul_tn};
use super::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_c: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Output extent along one axis; errors unless the window tiles exactly.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize, NnError> {
    if stride == 0 {
        return Err(NnError::Shape("stride must be >= 1".into()));
    }
    let span = input + 2 * padding;
    if kernel == 0 || kernel > span {
        return Err(NnError::Shape(format!(
            "kernel {kernel} does not fit input {input} with padding {padding}"
        )));
    }
    if !(span - kernel).is_multiple_of(stride) {
        return Err(NnError::Shape(format!(
            "non-integral output size: ({input} + 2*{padding} - {kernel}) / {stride}"
        )));
    }
    Ok((span - kernel) / stride + 1)
}

pub fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry, NnError> {
    x.expect_rank(4, "conv2d input")?;
    kernel.expect_rank(4, "conv2d kernel")?;
    let [batch, in_h, in_w, in_c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [kh, kw, kc, out_c] = [kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]];
    if kc != in_c || bias.shape() != [out_c] {
        return Err(NnError::Shape(format!(
            "conv2d: input {:?}, kernel {:?}, bias {:?}",
            x.shape(),
            kernel.shape(),
            bias.shape()
        )));
    }
    let out_h = conv_output_size(in_h, kh, stride, padding)?;
    let out_w = conv_output_size(in_w, kw, stride, padding)?;
    Ok(ConvGeometry { batch, in_h, in_w, in_c, kh, kw, out_c, stride, padding, out_h, out_w })
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.patch_len();
    let mut cols = vec![T::zero(); g.rows() * k];
    cols.par_chunks_mut(k).enumerate().with_min_len(64).for_each(|(row, patch)| {
        let b = row / (g.out_h * g.out_w);
        let oy = (row / g.out_w) % g.out_h;
        let ox = row % g.out_w;
        for ky in 0..g.kh {
            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
            if iy < 0 || iy >= g.in_h as isize {
                continue;
            }
            for kx in 0..g.kw {
                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                if ix < 0 || ix >= g.in_w as isize {
                    continue;
                }
                let src = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * g.in_c;
                let dst = (ky * g.kw + kx) * g.in_c;
                patch[dst..dst + g.in_c].copy_from_slice(&x[src..src + g.in_c]);
            }
        }
    });
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.patch_len();
    let frame = g.in_h * g.in_w * g.in_c;
    let per_frame_rows = g.out_h * g.out_w;
    let mut dx = vec![T::zero(); g.batch * frame];
    dx.par_chunks_mut(frame.max(1)).enumerate().for_each(|(b, img)| {
        for r in 0..per_frame_rows {
            let (oy, ox) = (r / g.out_w, r % g.out_w);
            let patch = &cols[(b * per_frame_rows + r) * k..][..k];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.in_w + ix as usize) * g.in_c;
                    let src = (ky * g.kw + kx) * g.in_c;
                    for (d, &s) in img[dst..dst + g.in_c].iter_mut().zip(&patch[src..src + g.in_c]) {
                        *d += s;
                    }
                }
            }
        }
    });
    dx
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    pub geometry: ConvGeometry,
    cols: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Vec<T>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, ConvCache<T>), NnError> {
    let g = conv_geometry(x, kernel, bias, stride, padding)?;
    let cols = im2col(x.data(), &g);
    let mut out = matmul(&cols, kernel.data(), g.rows(), g.patch_len(), g.out_c);
    for row in out.chunks_mut(g.out_c) {
        for (o, &bv) in row.iter_mut().zip(bias.data()) {
            *o += bv;
        }
    }
    let y = Tensor::new(vec![g.batch, g.out_h, g.out_w, g.out_c], out)?;
    Ok((y, ConvCache { geometry: g, cols }))
}

pub fn conv2d_backward<T: Scalar>(
    cache: &ConvCache<T>,
    kernel: &Tensor<T>,
    grad_out: &[T],
    need_input_grad: bool,
) -> ConvGrads<T> {
    let g = &cache.geometry;
    let (m, k, f) = (g.rows(), g.patch_len(), g.out_c);
    debug_assert_eq!(grad_out.len(), m * f);
    let input = if need_input_grad {
        col2im(&matmul_nt(grad_out, kernel.data(), m, f, k), g)
    } else {
        Vec::new()
    };
    ConvGrads {
        input,
        kernel: matmul_tn(&cache.cols, grad_out, m, k, f),
        bias: col_sums(grad_out, m, f),
    }
}
