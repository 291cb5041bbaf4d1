//! Fully connected layer: `out[b,j] = Σ_i x[b,i]·W[i,j] + bias[j]`.

use crate::scalar::Scalar;

use super::gemm::{col_sums, matmul, matmul_nt, matmul_tn};
use super::{NnError, Tensor};

/// Parameter gradients of a fully connected layer.
#[derive(Debug, Clone)]
pub struct FcGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

fn fc_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize), NnError> {
    x.expect_rank(2, "fc input")?;
    w.expect_rank(2, "fc weight")?;
    let (rows, fan_in) = (x.shape()[0], x.shape()[1]);
    let (w_in, fan_out) = (w.shape()[0], w.shape()[1]);
    if w_in != fan_in || b.shape() != [fan_out] {
        return Err(NnError::Shape(format!(
            "fc: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    Ok((rows, fan_in, fan_out))
}

pub fn fc_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (rows, fan_in, fan_out) = fc_dims(x, w, b)?;
    let mut out = matmul(x.data(), w.data(), rows, fan_in, fan_out);
    for row in out.chunks_mut(fan_out.max(1)) {
        for (o, &bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Tensor::new(vec![rows, fan_out], out)
}

pub fn fc_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &[T],
) -> Result<FcGrads<T>, NnError> {
    let (rows, fan_in, fan_out) = fc_dims(x, w, b)?;
    if grad_out.len() != rows * fan_out {
        return Err(NnError::Shape("fc: gradient size".into()));
    }
    Ok(FcGrads {
        input: matmul_nt(grad_out, w.data(), rows, fan_out, fan_in),
        weight: matmul_tn(x.data(), grad_out, rows, fan_in, fan_out),
        bias: col_sums(grad_out, rows, fan_out),
    })
}
