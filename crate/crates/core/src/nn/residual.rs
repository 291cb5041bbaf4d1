//! Residual block `out = F(x) + skip(x)` with `F = conv → relu → conv`.
//! The first convolution carries the block stride; `skip` is the identity or,
//! when channels or stride change, a strided 1×1 projection.

use crate::scalar::Scalar;

use super::activation::{relu, relu_backward};
use super::conv::{conv2d_backward, conv2d_forward, ConvCache};
use super::{NnError, Tensor};

/// Borrowed parameters of one block.
#[derive(Debug, Clone, Copy)]
pub struct ResidualWeights<'a, T> {
    pub stride: usize,
    pub conv_a: (&'a Tensor<T>, &'a Tensor<T>),
    pub conv_b: (&'a Tensor<T>, &'a Tensor<T>),
    pub projection: Option<(&'a Tensor<T>, &'a Tensor<T>)>,
}

#[derive(Debug, Clone)]
pub struct ResidualCache<T> {
    conv_a: ConvCache<T>,
    hidden_pre: Vec<T>,
    conv_b: ConvCache<T>,
    projection: Option<ConvCache<T>>,
}

/// Gradients as `(kernel, bias)` pairs plus the input gradient.
#[derive(Debug, Clone)]
pub struct ResidualGrads<T> {
    pub input: Vec<T>,
    pub conv_a: (Vec<T>, Vec<T>),
    pub conv_b: (Vec<T>, Vec<T>),
    pub projection: Option<(Vec<T>, Vec<T>)>,
}

pub fn residual_block_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &ResidualWeights<'_, T>,
) -> Result<(Tensor<T>, ResidualCache<T>), NnError> {
    let pad_a = p.conv_a.0.shape()[0] / 2;
    let pad_b = p.conv_b.0.shape()[0] / 2;
    let (a, cache_a) = conv2d_forward(x, p.conv_a.0, p.conv_a.1, p.stride, pad_a)?;
    let hidden_pre = a.data().to_vec();
    let hidden = Tensor::new(a.shape().to_vec(), relu(a.data()))?;
    let (mut out, cache_b) = conv2d_forward(&hidden, p.conv_b.0, p.conv_b.1, 1, pad_b)?;
    let projection = match p.projection {
        Some((k, b)) => {
            let (s, cache) = conv2d_forward(x, k, b, p.stride, 0)?;
            if s.shape() != out.shape() {
                return Err(NnError::Shape(format!(
                    "residual projection {:?} vs block output {:?}",
                    s.shape(),
                    out.shape()
                )));
            }
            for (o, &v) in out.data_mut().iter_mut().zip(s.data()) {
                *o += v;
            }
            Some(cache)
        }
        None => {
            if x.shape() != out.shape() {
                return Err(NnError::Shape(format!(
                    "identity skip needs matching shapes: input {:?}, block output {:?}",
                    x.shape(),
                    out.shape()
                )));
            }
            for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                *o += v;
            }
            None
        }
    };
    Ok((out, ResidualCache { conv_a: cache_a, hidden_pre, conv_b: cache_b, projection }))
}

pub fn residual_block_backward<T: Scalar>(
    cache: &ResidualCache<T>,
    p: &ResidualWeights<'_, T>,
    grad_out: &[T],
) -> ResidualGrads<T> {
    let gb = conv2d_backward(&cache.conv_b, p.conv_b.0, grad_out, true);
    let d_hidden = relu_backward(&cache.hidden_pre, &gb.input);
    let ga = conv2d_backward(&cache.conv_a, p.conv_a.0, &d_hidden, true);
    let mut input = ga.input;
    let projection = match (&cache.projection, p.projection) {
        (Some(pc), Some((k, _))) => {
            let gp = conv2d_backward(pc, k, grad_out, true);
            for (d, v) in input.iter_mut().zip(&gp.input) {
                *d += *v;
            }
            Some((gp.kernel, gp.bias))
        }
        _ => {
            for (d, &v) in input.iter_mut().zip(grad_out) {
                *d += v;
            }
            None
        }
    };
    ResidualGrads {
        input,
        conv_a: (ga.kernel, ga.bias),
        conv_b: (gb.kernel, gb.bias),
        projection,
    }
}
