use rayon::prelude::*;

use crate::scalar::Scalar;

use super::{NnError, Tensor};

/// Argmax positions (flat input offsets) of a max-pool forward pass.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

pub fn pool_output_size(input: usize, window: usize, stride: usize) -> Result<usize, NnError> {
    if window == 0 || stride == 0 || window > input {
        return Err(NnError::Shape(format!(
            "max-pool window {window} stride {stride} on extent {input}"
        )));
    }
    Ok((input - window) / stride + 1)
}

/// Max pooling over NHWC; trailing rows/columns that do not fill a window are dropped.
pub fn maxpool_forward<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolCache), NnError> {
    x.expect_rank(4, "max-pool input")?;
    let [batch, h, w, ch] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let oh = pool_output_size(h, window, stride)?;
    let ow = pool_output_size(w, window, stride)?;
    let out_frame = oh * ow * ch;
    let in_frame = h * w * ch;
    let mut out = vec![T::zero(); batch * out_frame];
    let mut argmax = vec![0usize; batch * out_frame];
    let data = x.data();
    out.par_chunks_mut(out_frame.max(1))
        .zip(argmax.par_chunks_mut(out_frame.max(1)))
        .enumerate()
        .for_each(|(b, (o, am))| {
            let base = b * in_frame;
            for oy in 0..oh {
                for ox in 0..ow {
                    for c in 0..ch {
                        let mut best_idx = base + ((oy * stride) * w + ox * stride) * ch + c;
                        let mut best = data[best_idx];
                        for dy in 0..window {
                            for dx in 0..window {
                                let idx = base + ((oy * stride + dy) * w + ox * stride + dx) * ch + c;
                                if data[idx] > best {
                                    best = data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let oi = (oy * ow + ox) * ch + c;
                        o[oi] = best;
                        am[oi] = best_idx;
                    }
                }
            }
        });
    let y = Tensor::new(vec![batch, oh, ow, ch], out)?;
    Ok((y, PoolCache { input_shape: x.shape().to_vec(), argmax }))
}

/// Routes each output gradient to its argmax input position.
pub fn maxpool_backward<T: Scalar>(cache: &PoolCache, grad_out: &[T]) -> Vec<T> {
    let len: usize = cache.input_shape.iter().product();
    let batch = cache.input_shape[0].max(1);
    let in_frame = len / batch;
    let out_frame = grad_out.len() / batch;
    let mut dx = vec![T::zero(); len];
    dx.par_chunks_mut(in_frame.max(1)).enumerate().for_each(|(b, frame)| {
        let base = b * in_frame;
        for i in b * out_frame..(b + 1) * out_frame {
            frame[cache.argmax[i] - base] += grad_out[i];
        }
    });
    dx
}
