//! `1 − CCC` objective over `[n, l, 2]` predictions (valence, arousal).

use crate::metrics::{ccc_denominator, pair_moments};
use crate::scalar::{c, Scalar};

use super::{NnError, Tensor};

/// Over which frames CCC statistics are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossStats {
    /// All `n·l` frames of a group per dimension.
    #[default]
    Joint,
    /// Each sequence separately, then averaged over the `n` sequences.
    PerSequence,
}

impl std::str::FromStr for LossStats {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(Self::Joint),
            "per_sequence" | "per-sequence" => Ok(Self::PerSequence),
            other => Err(format!("unknown loss statistics '{other}' (joint or per_sequence)")),
        }
    }
}

/// CCC of `p` against `t` and its gradient with respect to `p`.
pub(crate) fn ccc_with_grad<T: Scalar>(p: &[T], t: &[T]) -> (T, Vec<T>) {
    let m = pair_moments(p, t);
    let (den, floored) = ccc_denominator(&m);
    let n = T::from_usize_lossy(p.len());
    let two = c::<T>(2.0);
    let value = two * m.cov / den;
    let gap = m.mean_a - m.mean_b;
    let grad = p
        .iter()
        .zip(t)
        .map(|(&pi, &ti)| {
            let d_cov = (ti - m.mean_b) / n;
            if floored {
                two * d_cov / den
            } else {
                let d_den = two * ((pi - m.mean_a) + gap) / n;
                two * d_cov / den - two * m.cov * d_den / (den * den)
            }
        })
        .collect();
    (value, grad)
}

/// Loss and gradient with respect to `pred`, both `[n, l, 2]`.
pub fn loss_1mccc<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>), NnError> {
    loss_1mccc_with(pred, target, LossStats::Joint)
}

pub fn loss_1mccc_with<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    stats: LossStats,
) -> Result<(T, Tensor<T>), NnError> {
    if pred.shape() != target.shape() || pred.shape().len() != 3 || pred.shape()[2] != 2 {
        return Err(NnError::Shape(format!(
            "loss expects matching [n, l, 2] tensors, got {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (n, l) = (pred.shape()[0], pred.shape()[1]);
    if n * l < 2 {
        return Err(NnError::Shape("loss needs at least 2 frames".into()));
    }
    let mut grad = vec![T::zero(); pred.len()];
    let mut ccc_sum = T::zero();
    let half = c::<T>(0.5);
    let (chunks, chunk_len) = match stats {
        LossStats::Joint => (1, n * l),
        LossStats::PerSequence => (n, l),
    };
    if chunk_len < 2 {
        return Err(NnError::Shape("per-sequence loss needs sequences of at least 2 frames".into()));
    }
    let weight = T::one() / T::from_usize_lossy(chunks);
    for dim in 0..2 {
        for chunk in 0..chunks {
            let frames = chunk * chunk_len..(chunk + 1) * chunk_len;
            let p: Vec<T> = frames.clone().map(|f| pred.data()[f * 2 + dim]).collect();
            let t: Vec<T> = frames.clone().map(|f| target.data()[f * 2 + dim]).collect();
            let (value, g) = ccc_with_grad(&p, &t);
            ccc_sum += value * weight;
            for (f, gv) in frames.zip(g) {
                grad[f * 2 + dim] = -half * weight * gv;
            }
        }
    }
    let loss = T::one() - half * ccc_sum;
    Ok((loss, Tensor::new(pred.shape().to_vec(), grad)?))
}
