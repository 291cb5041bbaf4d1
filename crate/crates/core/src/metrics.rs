//! Agreement and error metrics over aligned value sequences.
//!
//! All moments are population moments (divide by `N`). The CCC denominator is
//! floored at [`CCC_EPS`], so a pair of constant series with equal means scores
//! 0 instead of NaN.

use std::fmt::Write as _;

use thiserror::Error;

use crate::scalar::{c, Scalar};

/// Floor applied to the CCC denominator.
pub const CCC_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty series")]
    Empty,
    #[error("series too short: need at least {need} values, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("both series are constant; correlation is undefined")]
    DegenerateSeries,
    #[error("need at least 2 annotators, got {0}")]
    TooFewAnnotators(usize),
    #[error("{ids} annotator ids for {series} series")]
    IdCount { ids: usize, series: usize },
}

/// Which statistic fills the cells of an [`AgreementMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AgreementMetric {
    #[default]
    Ccc,
    Pearson,
}

impl std::str::FromStr for AgreementMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ccc" => Ok(Self::Ccc),
            "pearson" => Ok(Self::Pearson),
            other => Err(format!("unknown agreement metric '{other}' (expected ccc or pearson)")),
        }
    }
}

fn check_finite<T: Scalar>(a: &[T]) -> Result<(), MetricsError> {
    match a.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(MetricsError::NonFinite(i)),
        None => Ok(()),
    }
}

fn check_pair<T: Scalar>(a: &[T], b: &[T], min_len: usize) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.len() < min_len {
        return Err(if a.is_empty() {
            MetricsError::Empty
        } else {
            MetricsError::TooShort { need: min_len, got: a.len() }
        });
    }
    check_finite(a)?;
    check_finite(b)
}

fn mean<T: Scalar>(a: &[T]) -> T {
    a.iter().copied().sum::<T>() / T::from_usize_lossy(a.len())
}

/// Population mean and variance.
pub fn mean_var<T: Scalar>(a: &[T]) -> Result<(T, T), MetricsError> {
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    check_finite(a)?;
    let m = mean(a);
    let var = a.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / T::from_usize_lossy(a.len());
    Ok((m, var))
}

/// Population moments of a pair: means, variances and covariance.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PairMoments<T> {
    pub mean_a: T,
    pub mean_b: T,
    pub var_a: T,
    pub var_b: T,
    pub cov: T,
}

pub(crate) fn pair_moments<T: Scalar>(a: &[T], b: &[T]) -> PairMoments<T> {
    let n = T::from_usize_lossy(a.len());
    let mean_a = mean(a);
    let mean_b = mean(b);
    let (mut var_a, mut var_b, mut cov) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        var_a += dx * dx;
        var_b += dy * dy;
        cov += dx * dy;
    }
    PairMoments { mean_a, mean_b, var_a: var_a / n, var_b: var_b / n, cov: cov / n }
}

/// Denominator of the CCC with the ε floor applied.
#[inline]
pub(crate) fn ccc_denominator<T: Scalar>(m: &PairMoments<T>) -> (T, bool) {
    let gap = m.mean_a - m.mean_b;
    let den = m.var_a + m.var_b + gap * gap;
    let eps = c::<T>(CCC_EPS);
    if den > eps {
        (den, false)
    } else {
        (eps, true)
    }
}

/// Pearson correlation. A single constant series yields 0; two constant series
/// are an error because that signals broken input data.
pub fn pearson<T: Scalar>(a: &[T], b: &[T]) -> Result<T, MetricsError> {
    check_pair(a, b, 2)?;
    let m = pair_moments(a, b);
    let zero = T::zero();
    if m.var_a == zero && m.var_b == zero {
        return Err(MetricsError::DegenerateSeries);
    }
    if m.var_a == zero || m.var_b == zero {
        return Ok(zero);
    }
    let r = m.cov / (m.var_a * m.var_b).sqrt();
    Ok(r.max(-T::one()).min(T::one()))
}

/// Concordance correlation coefficient of `pred` against `truth`.
pub fn ccc<T: Scalar>(pred: &[T], truth: &[T]) -> Result<T, MetricsError> {
    check_pair(pred, truth, 2)?;
    let m = pair_moments(pred, truth);
    let (den, _) = ccc_denominator(&m);
    Ok(c::<T>(2.0) * m.cov / den)
}

/// Mean squared error.
pub fn mse<T: Scalar>(pred: &[T], truth: &[T]) -> Result<T, MetricsError> {
    check_pair(pred, truth, 1)?;
    let sum = pred.iter().zip(truth).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>();
    Ok(sum / T::from_usize_lossy(pred.len()))
}

/// Pairwise agreement between annotators. The diagonal is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementMatrix<T> {
    pub annotator_ids: Vec<String>,
    cells: Vec<Vec<Option<T>>>,
}

impl<T: Scalar> AgreementMatrix<T> {
    /// Builds a matrix from the upper-triangle cells in row-major order
    /// (`(0,1), (0,2), ..., (1,2), ...`).
    pub fn from_upper_triangle(ids: Vec<String>, upper: &[T]) -> Result<Self, MetricsError> {
        let k = ids.len();
        if k < 2 {
            return Err(MetricsError::TooFewAnnotators(k));
        }
        let expected = k * (k - 1) / 2;
        if upper.len() != expected {
            return Err(MetricsError::LengthMismatch { left: upper.len(), right: expected });
        }
        let mut cells = vec![vec![None; k]; k];
        let mut it = upper.iter();
        for i in 0..k {
            for j in (i + 1)..k {
                let v = *it.next().expect("length checked");
                cells[i][j] = Some(v);
                cells[j][i] = Some(v);
            }
        }
        Ok(Self { annotator_ids: ids, cells })
    }

    pub fn len(&self) -> usize {
        self.annotator_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotator_ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<T> {
        self.cells[i][j]
    }

    /// Plain-text table: header row and column of ids, blank diagonal.
    pub fn render_text(&self) -> String {
        let width = self
            .annotator_ids
            .iter()
            .map(|s| s.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = String::new();
        let _ = write!(out, "{:width$}", "");
        for id in &self.annotator_ids {
            let _ = write!(out, "  {id:>width$}");
        }
        out.push('\n');
        for (i, id) in self.annotator_ids.iter().enumerate() {
            let _ = write!(out, "{id:<width$}");
            for cell in &self.cells[i] {
                match cell {
                    Some(v) => {
                        let _ = write!(out, "  {:>width$.3}", v.as_f64());
                    }
                    None => {
                        let _ = write!(out, "  {:>width$}", "");
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// CSV with header `annotator,<id1>,<id2>,...`; diagonal cells are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("annotator");
        for id in &self.annotator_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (i, id) in self.annotator_ids.iter().enumerate() {
            out.push_str(id);
            for cell in &self.cells[i] {
                out.push(',');
                if let Some(v) = cell {
                    let _ = write!(out, "{:.6}", v.as_f64());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Pairwise agreement matrix over annotators' per-frame series.
pub fn agreement_matrix<T: Scalar, S: AsRef<[T]>>(
    series: &[S],
    ids: &[String],
    metric: AgreementMetric,
) -> Result<AgreementMatrix<T>, MetricsError> {
    if series.len() < 2 {
        return Err(MetricsError::TooFewAnnotators(series.len()));
    }
    if ids.len() != series.len() {
        return Err(MetricsError::IdCount { ids: ids.len(), series: series.len() });
    }
    let mut upper = Vec::with_capacity(series.len() * (series.len() - 1) / 2);
    for i in 0..series.len() {
        for j in (i + 1)..series.len() {
            let (a, b) = (series[i].as_ref(), series[j].as_ref());
            let v = match metric {
                AgreementMetric::Ccc => ccc(a, b)?,
                AgreementMetric::Pearson => pearson(a, b)?,
            };
            upper.push(v);
        }
    }
    AgreementMatrix::from_upper_triangle(ids.to_vec(), &upper)
}

/// Arithmetic mean of the upper-triangle off-diagonal cells.
pub fn mean_agreement<T: Scalar>(m: &AgreementMatrix<T>) -> Result<T, MetricsError> {
    let k = m.len();
    if k < 2 {
        return Err(MetricsError::TooFewAnnotators(k));
    }
    let mut sum = T::zero();
    let mut count = 0usize;
    for i in 0..k {
        for j in (i + 1)..k {
            sum += m.cells[i][j].expect("off-diagonal cell");
            count += 1;
        }
    }
    Ok(sum / T::from_usize_lossy(count))
}
