//! Gated recurrent unit.
//!
//! ```text
//! z  = σ(x·W_z + h·U_z + b_z)
//! r  = σ(x·W_r + h·U_r + b_r)
//! h̃  = tanh(x·W_h + (r ⊙ h)·U_h + b_h)
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```
//!
//! Input weights are `[in, hidden]`, recurrent weights `[hidden, hidden]`.

use crate::scalar::Scalar;

use super::activation::sigmoid;
use super::gemm::{col_sums, matmul, matmul_acc, matmul_nt, matmul_tn};
use super::NnError;

/// Borrowed view of one cell's parameters.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights<'a, T> {
    pub input_size: usize,
    pub hidden: usize,
    pub w_z: &'a [T],
    pub w_r: &'a [T],
    pub w_h: &'a [T],
    pub u_z: &'a [T],
    pub u_r: &'a [T],
    pub u_h: &'a [T],
    pub b_z: &'a [T],
    pub b_r: &'a [T],
    pub b_h: &'a [T],
}

impl<T> GruWeights<'_, T> {
    fn check(&self) -> Result<(), NnError> {
        let (i, h) = (self.input_size, self.hidden);
        let ok = [self.w_z, self.w_r, self.w_h].iter().all(|w| w.len() == i * h)
            && [self.u_z, self.u_r, self.u_h].iter().all(|u| u.len() == h * h)
            && [self.b_z, self.b_r, self.b_h].iter().all(|b| b.len() == h);
        if ok {
            Ok(())
        } else {
            Err(NnError::Shape(format!("gru weights do not match in={i} hidden={h}")))
        }
    }
}

/// Gate activations of one step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GruStep<T> {
    pub h: Vec<T>,
    pub z: Vec<T>,
    pub r: Vec<T>,
    pub candidate: Vec<T>,
}

/// Gradients of one step. Parameter gradients are in the same layout as [`GruWeights`].
#[derive(Debug, Clone)]
pub struct GruStepGrads<T> {
    pub x: Vec<T>,
    pub h_prev: Vec<T>,
    pub w_z: Vec<T>,
    pub w_r: Vec<T>,
    pub w_h: Vec<T>,
    pub u_z: Vec<T>,
    pub u_r: Vec<T>,
    pub u_h: Vec<T>,
    pub b_z: Vec<T>,
    pub b_r: Vec<T>,
    pub b_h: Vec<T>,
}

fn affine<T: Scalar>(x: &[T], w: &[T], h: &[T], u: &[T], b: &[T], rows: usize, fan_in: usize, hid: usize) -> Vec<T> {
    let mut a = matmul(x, w, rows, fan_in, hid);
    matmul_acc(&mut a, h, u, rows, hid, hid);
    for row in a.chunks_mut(hid) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
    a
}

/// One step for a batch of `rows` sequences: `x: [rows, in]`, `h_prev: [rows, hidden]`.
pub fn gru_cell_forward<T: Scalar>(
    x: &[T],
    h_prev: &[T],
    p: &GruWeights<'_, T>,
) -> Result<GruStep<T>, NnError> {
    p.check()?;
    let (fan_in, hid) = (p.input_size, p.hidden);
    if fan_in == 0 || hid == 0 || !x.len().is_multiple_of(fan_in) {
        return Err(NnError::Shape("gru input size".into()));
    }
    let rows = x.len() / fan_in;
    if h_prev.len() != rows * hid {
        return Err(NnError::Shape(format!(
            "gru hidden state has {} values, expected {}",
            h_prev.len(),
            rows * hid
        )));
    }
    let z: Vec<T> = affine(x, p.w_z, h_prev, p.u_z, p.b_z, rows, fan_in, hid)
        .into_iter()
        .map(sigmoid)
        .collect();
    let r: Vec<T> = affine(x, p.w_r, h_prev, p.u_r, p.b_r, rows, fan_in, hid)
        .into_iter()
        .map(sigmoid)
        .collect();
    let rh: Vec<T> = r.iter().zip(h_prev).map(|(&a, &b)| a * b).collect();
    let candidate: Vec<T> = affine(x, p.w_h, &rh, p.u_h, p.b_h, rows, fan_in, hid)
        .into_iter()
        .map(|v| v.tanh())
        .collect();
    let h = (0..rows * hid)
        .map(|i| (T::one() - z[i]) * h_prev[i] + z[i] * candidate[i])
        .collect();
    Ok(GruStep { h, z, r, candidate })
}

/// Backward through one step given `grad_h = ∂L/∂h'`.
pub fn gru_cell_backward<T: Scalar>(
    x: &[T],
    h_prev: &[T],
    step: &GruStep<T>,
    grad_h: &[T],
    p: &GruWeights<'_, T>,
) -> GruStepGrads<T> {
    let (fan_in, hid) = (p.input_size, p.hidden);
    let rows = x.len() / fan_in;
    let n = rows * hid;
    let one = T::one();

    let mut d_h_prev: Vec<T> = (0..n).map(|i| grad_h[i] * (one - step.z[i])).collect();
    let d_az: Vec<T> = (0..n)
        .map(|i| {
            let dz = grad_h[i] * (step.candidate[i] - h_prev[i]);
            dz * step.z[i] * (one - step.z[i])
        })
        .collect();
    let d_ah: Vec<T> = (0..n)
        .map(|i| {
            let dc = grad_h[i] * step.z[i];
            dc * (one - step.candidate[i] * step.candidate[i])
        })
        .collect();

    let rh: Vec<T> = step.r.iter().zip(h_prev).map(|(&a, &b)| a * b).collect();
    let d_rh = matmul_nt(&d_ah, p.u_h, rows, hid, hid);
    let d_ar: Vec<T> = (0..n)
        .map(|i| {
            let dr = d_rh[i] * h_prev[i];
            dr * step.r[i] * (one - step.r[i])
        })
        .collect();
    for i in 0..n {
        d_h_prev[i] += d_rh[i] * step.r[i];
    }
    for (d_a, u) in [(&d_az, p.u_z), (&d_ar, p.u_r)] {
        let contrib = matmul_nt(d_a, u, rows, hid, hid);
        for (d, c) in d_h_prev.iter_mut().zip(contrib) {
            *d += c;
        }
    }

    let mut d_x = matmul_nt(&d_az, p.w_z, rows, hid, fan_in);
    for (d_a, w) in [(&d_ar, p.w_r), (&d_ah, p.w_h)] {
        let contrib = matmul_nt(d_a, w, rows, hid, fan_in);
        for (d, c) in d_x.iter_mut().zip(contrib) {
            *d += c;
        }
    }

    GruStepGrads {
        x: d_x,
        h_prev: d_h_prev,
        w_z: matmul_tn(x, &d_az, rows, fan_in, hid),
        w_r: matmul_tn(x, &d_ar, rows, fan_in, hid),
        w_h: matmul_tn(x, &d_ah, rows, fan_in, hid),
        u_z: matmul_tn(h_prev, &d_az, rows, hid, hid),
        u_r: matmul_tn(h_prev, &d_ar, rows, hid, hid),
        u_h: matmul_tn(&rh, &d_ah, rows, hid, hid),
        b_z: col_sums(&d_az, rows, hid),
        b_r: col_sums(&d_ar, rows, hid),
        b_h: col_sums(&d_ah, rows, hid),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Owned {
        w: [Vec<f64>; 3],
        u: [Vec<f64>; 3],
        b: [Vec<f64>; 3],
    }

    impl Owned {
        fn new(fan_in: usize, hid: usize, f: impl Fn(usize) -> f64) -> Self {
            let v = |n: usize, off: usize| (0..n).map(|i| f(i + off)).collect::<Vec<_>>();
            Owned {
                w: [v(fan_in * hid, 0), v(fan_in * hid, 100), v(fan_in * hid, 200)],
                u: [v(hid * hid, 300), v(hid * hid, 400), v(hid * hid, 500)],
                b: [vec![0.0; hid], vec![0.0; hid], vec![0.0; hid]],
            }
        }

        fn view(&self, fan_in: usize, hid: usize) -> GruWeights<'_, f64> {
            GruWeights {
                input_size: fan_in,
                hidden: hid,
                w_z: &self.w[0],
                w_r: &self.w[1],
                w_h: &self.w[2],
                u_z: &self.u[0],
                u_r: &self.u[1],
                u_h: &self.u[2],
                b_z: &self.b[0],
                b_r: &self.b[1],
                b_h: &self.b[2],
            }
        }
    }

    #[test]
    fn closed_update_gate_copies_state() {
        let mut p = Owned::new(3, 2, |i| ((i * 37 % 17) as f64 - 8.0) / 10.0);
        p.b[0] = vec![-60.0; 2];
        let x = [0.3, -0.2, 0.9];
        let h_prev = [0.5, -0.7];
        let step = gru_cell_forward(&x, &h_prev, &p.view(3, 2)).unwrap();
        for (a, b) in step.h.iter().zip(&h_prev) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn open_update_gate_from_zero_state() {
        let mut p = Owned::new(3, 2, |i| ((i * 37 % 17) as f64 - 8.0) / 10.0);
        p.b[0] = vec![60.0; 2];
        p.b[2] = vec![0.1, -0.2];
        let x = [0.3, -0.2, 0.9];
        let step = gru_cell_forward(&x, &[0.0, 0.0], &p.view(3, 2)).unwrap();
        for j in 0..2 {
            let pre: f64 = (0..3).map(|i| x[i] * p.w[2][i * 2 + j]).sum::<f64>() + p.b[2][j];
            assert!((step.h[j] - pre.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_state_size() {
        let p = Owned::new(3, 2, |_| 0.1);
        assert!(gru_cell_forward(&[0.0; 3], &[0.0; 3], &p.view(3, 2)).is_err());
    }
}
