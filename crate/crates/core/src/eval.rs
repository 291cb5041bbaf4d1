//! Offline evaluation, prediction dumps, static-image prediction and
//! result tables.

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::dataio::{DataError, EpochPlan, FrameSource, SequenceBatch};
use crate::metrics::{ccc, mse, MetricsError};
use crate::nn::{Model, NnError, Tensor};
use crate::scalar::Scalar;

/// Share of final steps averaged by [`predict_static`].
pub const DEFAULT_TAIL_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error("tail fraction must lie in (0, 1], got {0}")]
    TailFraction(f64),
}

/// CCC and MSE per dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimMetrics {
    pub ccc_valence: f64,
    pub ccc_arousal: f64,
    pub mse_valence: f64,
    pub mse_arousal: f64,
}

impl DimMetrics {
    pub fn mean_ccc(&self) -> f64 {
        (self.ccc_valence + self.ccc_arousal) / 2.0
    }

    pub fn is_finite(&self) -> bool {
        [self.ccc_valence, self.ccc_arousal, self.mse_valence, self.mse_arousal]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Per-frame predictions next to their labels, in evaluation order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Predictions {
    pub frame_paths: Vec<PathBuf>,
    pub pred: Vec<[f64; 2]>,
    pub truth: Vec<[f64; 2]>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred.is_empty()
    }

    pub fn column(rows: &[[f64; 2]], dim: usize) -> Vec<f64> {
        rows.iter().map(|r| r[dim]).collect()
    }

    pub fn metrics(&self) -> Result<DimMetrics, EvalError> {
        if self.pred.len() < 2 {
            return Err(EvalError::Empty("need at least 2 frames"));
        }
        let (pv, pa) = (Self::column(&self.pred, 0), Self::column(&self.pred, 1));
        let (tv, ta) = (Self::column(&self.truth, 0), Self::column(&self.truth, 1));
        Ok(DimMetrics {
            ccc_valence: ccc(&pv, &tv)?,
            ccc_arousal: ccc(&pa, &ta)?,
            mse_valence: mse(&pv, &tv)?,
            mse_arousal: mse(&pa, &ta)?,
        })
    }

    /// `frame_path,pred_v,pred_a,true_v,true_a` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_path,pred_v,pred_a,true_v,true_a\n");
        for ((path, p), t) in self.frame_paths.iter().zip(&self.pred).zip(&self.truth) {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6}",
                path.to_string_lossy().replace('\\', "/"),
                p[0],
                p[1],
                t[0],
                t[1]
            );
        }
        out
    }
}

/// Runs `model` over `batches` in order, `n` sequences per forward pass.
pub fn predict_batches<T: Scalar>(
    model: &Model<T>,
    source: &FrameSource,
    batches: &[SequenceBatch],
    n: usize,
) -> Result<Predictions, EvalError> {
    let plan = EpochPlan::sequential(batches.len(), n);
    let mut out = Predictions::default();
    source.stream_groups::<T, EvalError, _>(batches, &plan, |gi, x, _| {
        let y = model.forward_sequence(&x)?;
        let mut rows = y.data().chunks_exact(2);
        for &bi in &plan.groups[gi] {
            let b = &batches[bi];
            for (path, target) in b.frame_paths.iter().zip(&b.targets) {
                let r = rows.next().expect("one output row per frame");
                out.frame_paths.push(path.clone());
                out.pred.push([r[0].as_f64(), r[1].as_f64()]);
                out.truth.push(*target);
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// Headline numbers for one model on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    pub metrics: DimMetrics,
    pub frames: usize,
}

/// Deterministic pass over all full batches of `batches`.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    source: &FrameSource,
    batches: &[SequenceBatch],
    n: usize,
    dataset: &str,
) -> Result<(EvalReport, Predictions), EvalError> {
    if batches.is_empty() {
        return Err(EvalError::Empty("no full-length batches"));
    }
    let preds = predict_batches(model, source, batches, n)?;
    let report = EvalReport {
        model: model.spec.name.clone(),
        dataset: dataset.to_string(),
        metrics: preds.metrics()?,
        frames: preds.len(),
    };
    Ok((report, preds))
}

/// Repeats one preprocessed frame `l` times and averages the outputs of
/// the final `⌈tail_fraction · l⌉` steps.
pub fn predict_static<T: Scalar>(
    model: &Model<T>,
    frame: &[f64],
    l: usize,
    tail_fraction: f64,
) -> Result<(f64, f64), EvalError> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(EvalError::TailFraction(tail_fraction));
    }
    if l == 0 {
        return Err(EvalError::Data(DataError::SequenceLength));
    }
    let s = model.spec.input_size;
    let x = Tensor::new(
        vec![1, l, s, s, 3],
        (0..l).flat_map(|_| frame.iter().map(|&v| T::from_f64_lossy(v))).collect(),
    )?;
    let y = model.forward_sequence(&x)?;
    Ok(tail_mean(y.data(), tail_fraction))
}

/// Mean of the last `⌈fraction · steps⌉` rows of a `[steps, 2]` buffer.
pub fn tail_mean<T: Scalar>(rows: &[T], fraction: f64) -> (f64, f64) {
    let steps = rows.len() / 2;
    let k = ((fraction * steps as f64).ceil() as usize).clamp(1, steps);
    let tail = &rows[(steps - k) * 2..];
    let sum = tail.chunks_exact(2).fold((0.0, 0.0), |acc, r| (acc.0 + r[0].as_f64(), acc.1 + r[1].as_f64()));
    (sum.0 / k as f64, sum.1 / k as f64)
}

/// `vgg16-gru` → `VGG16_GRU`.
pub fn display_name(model: &str) -> String {
    model.to_uppercase().replace('-', "_")
}

/// Aligned text table, two decimals per value. With `with_mse` the MSE
/// columns follow the CCC columns.
pub fn render_table(reports: &[EvalReport], with_mse: bool) -> Result<String, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Empty("no reports to render"));
    }
    let mut header = vec!["Model".to_string(), "Valence CCC".into(), "Arousal CCC".into()];
    if with_mse {
        header.extend(["Valence MSE".to_string(), "Arousal MSE".into()]);
    }
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let m = &r.metrics;
            let mut row = vec![display_name(&r.model), format!("{:.2}", m.ccc_valence), format!("{:.2}", m.ccc_arousal)];
            if with_mse {
                row.extend([format!("{:.2}", m.mse_valence), format!("{:.2}", m.mse_arousal)]);
            }
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&rows) {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    Ok(out)
}

/// Tab separated report lines with a header.
pub fn reports_tsv(reports: &[EvalReport]) -> String {
    let mut out = String::from("model\tdataset\tframes\tccc_v\tccc_a\tmse_v\tmse_a\n");
    for r in reports {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.model, r.dataset, r.frames, m.ccc_valence, m.ccc_arousal, m.mse_valence, m.mse_arousal
        );
    }
    out
}
