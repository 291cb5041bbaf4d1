//! Thin adapters from parsed arguments to library calls.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use affectlab::annotation::{
    build_manifest as build_records, merge_annotators, parse_frame_series, parse_trace, resample_to_frames,
    write_manifest, AnnotationTrace, Dimension, FrameSeries,
};
use affectlab::dataio::{load_manifest, make_batches, split_train_test, FrameSource, SplitRatio};
use affectlab::eval::{evaluate, predict_static, render_table, reports_tsv};
use affectlab::metrics::{agreement_matrix, mean_agreement, AgreementMetric};
use affectlab::nn::{restore, Checkpoint};
use affectlab::preproc::{compute_stats, load_image, read_landmarks};
use affectlab::synth::{write_synthetic_dataset, SynthSpec};
use affectlab::train::{chain_from_checkpoint, prepare_dataset, Precision, StopReason, TrainConfig, TrainError, Trainer, LOG_HEADER};
use affectlab::Scalar;
use anyhow::{anyhow, Context};

use crate::{
    usage, AgreementArgs, BuildManifestArgs, CliError, CliResult, EvalArgs, MergeArgs, PredictArgs, RunFlags,
    SplitArgs, StatsArgs, SynthArgs, TrainArgs,
};

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_traces(paths: &[PathBuf]) -> anyhow::Result<Vec<AnnotationTrace>> {
    paths
        .iter()
        .map(|p| parse_trace(&read_text(p)?).with_context(|| format!("parsing {}", p.display())))
        .collect()
}

/// All traces must describe one video and one dimension.
fn check_same_target(traces: &[AnnotationTrace]) -> CliResult<(String, Dimension)> {
    let first = &traces[0];
    if let Some(t) = traces.iter().find(|t| t.video_id != first.video_id) {
        return usage(format!("traces cover different videos: '{}' and '{}'", first.video_id, t.video_id));
    }
    if let Some(t) = traces.iter().find(|t| t.dimension != first.dimension) {
        return usage(format!("traces mix dimensions: {} and {}", first.dimension, t.dimension));
    }
    Ok((first.video_id.clone(), first.dimension))
}

/// Frames needed to reach the latest sample of any trace.
fn covering_frames(traces: &[AnnotationTrace], fps: f64) -> usize {
    traces
        .iter()
        .filter_map(|t| t.samples.last())
        .map(|s| (s.time * fps + 1e-9).floor() as usize + 1)
        .max()
        .unwrap_or(1)
}

fn check_fps(fps: f64) -> CliResult {
    if fps > 0.0 && fps.is_finite() {
        Ok(())
    } else {
        usage(format!("--fps must be positive, got {fps}"))
    }
}

pub fn agreement(a: &AgreementArgs) -> CliResult {
    check_fps(a.fps)?;
    if a.traces.len() < 2 {
        return usage("agreement needs at least 2 traces");
    }
    let metric: AgreementMetric = a.metric.parse().map_err(CliError::Usage)?;
    let traces = read_traces(&a.traces)?;
    check_same_target(&traces)?;
    let ids: Vec<String> = traces.iter().map(|t| t.annotator_id.clone()).collect();
    if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
        return usage("each annotator may appear only once");
    }
    let frames = a.frames.unwrap_or_else(|| covering_frames(&traces, a.fps));
    let series: Vec<Vec<f64>> = traces.iter().map(|t| resample_to_frames(t, a.fps, frames).values).collect();
    let m = agreement_matrix(&series, &ids, metric).map_err(|e| anyhow!(e))?;
    let mean = mean_agreement(&m).map_err(|e| anyhow!(e))?;
    if a.csv {
        print!("{}", m.to_csv());
    } else {
        print!("{}", m.render_text());
    }
    println!("mean agreement: {mean:.4}");
    Ok(())
}

pub fn merge(a: &MergeArgs) -> CliResult {
    check_fps(a.fps)?;
    if a.frames == 0 {
        return usage("--frames must be at least 1");
    }
    let traces = read_traces(&a.traces)?;
    if let Some(t) = traces.iter().find(|t| t.dimension != traces[0].dimension) {
        return usage(format!("traces mix dimensions: {} and {}", traces[0].dimension, t.dimension));
    }
    let series: Vec<FrameSeries> = traces.iter().map(|t| resample_to_frames(t, a.fps, a.frames)).collect();
    let merged = merge_annotators(&series).map_err(|e| anyhow!(e))?;
    write_text(&a.out, &merged.serialize())?;
    Ok(())
}

pub fn build_manifest(a: &BuildManifestArgs) -> CliResult {
    let mut valence = BTreeMap::new();
    let mut arousal = BTreeMap::new();
    let entries = fs::read_dir(&a.series).with_context(|| format!("listing {}", a.series.display()))?;
    for entry in entries {
        let path = entry.context("listing series directory")?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let target = if name.ends_with("_valence.csv") {
            &mut valence
        } else if name.ends_with("_arousal.csv") {
            &mut arousal
        } else {
            continue;
        };
        let s = parse_frame_series(&read_text(&path)?).with_context(|| format!("parsing {}", path.display()))?;
        target.insert(s.video_id.clone(), s);
    }
    if valence.is_empty() {
        return Err(anyhow!("no *_valence.csv series in {}", a.series.display()).into());
    }
    let records = build_records(&a.frames_root, &valence, &arousal).map_err(|e| anyhow!(e))?;
    write_text(&a.out, &write_manifest(&records))?;
    eprintln!("{} records from {} videos", records.len(), valence.len());
    Ok(())
}

pub fn split(a: &SplitArgs) -> CliResult {
    let ratio: SplitRatio = a.ratio.parse().map_err(|e| CliError::Usage(format!("--ratio: {e}")))?;
    let records = load_manifest(&a.manifest).map_err(|e| anyhow!(e))?;
    let s = split_train_test(&records, ratio, a.seed).map_err(|e| anyhow!(e))?;
    write_text(&a.out, &s.to_text(&records))?;
    eprintln!(
        "train: {} videos, {} frames; test: {} videos, {} frames",
        s.train_videos.len(),
        s.train.len(),
        s.test_videos.len(),
        s.test.len()
    );
    Ok(())
}

pub fn stats(a: &StatsArgs) -> CliResult {
    let records = load_manifest(&a.manifest).map_err(|e| anyhow!(e))?;
    let paths: Vec<PathBuf> = records.iter().map(|r| a.frames_root.join(&r.frame_path)).collect();
    let stats = compute_stats(&paths, a.channelwise).map_err(|e| anyhow!(e))?;
    match &a.out {
        Some(p) => write_text(p, &stats.to_text())?,
        None => print!("{}", stats.to_text()),
    }
    Ok(())
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config { .. } | TrainError::Invalid(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(anyhow!(other)),
    }
}

/// Config file (if any) with the shared flags applied on top.
fn base_config(run: &RunFlags) -> CliResult<TrainConfig> {
    let mut cfg = match &run.config {
        Some(p) => TrainConfig::load(p).map_err(train_error)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = &run.manifest {
        cfg.manifest = Some(v.clone());
    }
    if let Some(v) = &run.frames_root {
        cfg.frames_root = v.clone();
    }
    if let Some(v) = &run.landmarks {
        cfg.landmarks = Some(v.clone());
    }
    if let Some(v) = run.seq_len {
        cfg.seq_len = v;
    }
    if let Some(v) = run.group_size {
        cfg.group_size = v;
    }
    if let Some(v) = run.image_size {
        cfg.image_size = Some(v);
    }
    Ok(cfg)
}

pub fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = base_config(&a.run)?;
    let mut set = |key: &str, value: Option<String>| -> CliResult {
        match value {
            Some(v) => cfg.set(key, &v).map_err(|e| CliError::Usage(format!("--{}: {e}", key.replace('_', "-")))),
            None => Ok(()),
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.to_string_lossy().into_owned());
    set("out_dir", path(&a.out))?;
    set("seed", a.seed.map(|v| v.to_string()))?;
    set("model", a.model.clone())?;
    set("lr", a.lr.map(|v| v.to_string()))?;
    set("epochs", a.epochs.map(|v| v.to_string()))?;
    set("test_manifest", path(&a.test_manifest))?;
    set("preproc", a.preproc.clone())?;
    set("eval_subset", a.eval_subset.map(|v| v.to_string()))?;
    set("target_ccc", a.target_ccc.map(|v| v.to_string()))?;
    set("precision", a.precision.clone())?;
    set("loss", a.loss.clone())?;
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        set(k.trim(), Some(v.trim().to_string()))?;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn run_training<T: Scalar>(cfg: TrainConfig, resume: Option<&Path>) -> CliResult {
    let data = prepare_dataset(&cfg).map_err(train_error)?;
    let mut trainer = match resume {
        Some(ck) => Trainer::<T>::resume(cfg, data, ck).map_err(train_error)?,
        None => Trainer::<T>::new(cfg, data).map_err(train_error)?,
    };
    println!("{LOG_HEADER}");
    let outcome = trainer.run(|r| println!("{}", r.tsv_line())).map_err(train_error)?;
    match outcome.stop {
        StopReason::NothingToDo => {
            eprintln!("checkpoint is already at epoch {}; nothing to do", trainer.epoch)
        }
        stop => eprintln!(
            "stopped ({stop:?}) after epoch {}; checkpoint {}",
            trainer.epoch,
            outcome.final_checkpoint.map(|p| p.display().to_string()).unwrap_or_default()
        ),
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> CliResult {
    let cfg = train_config(a)?;
    let resume = a.resume.as_deref();
    match cfg.precision {
        Precision::F32 => run_training::<f32>(cfg, resume),
        Precision::F64 => run_training::<f64>(cfg, resume),
    }
}

fn evaluate_checkpoint<T: Scalar>(ck: Checkpoint, cfg: &TrainConfig, a: &EvalArgs) -> CliResult<affectlab::eval::EvalReport> {
    let mut chain = chain_from_checkpoint(&ck).map_err(train_error)?;
    if chain.needs_landmarks() {
        let path = cfg.landmarks.as_ref().ok_or_else(|| CliError::Usage("checkpoint aligns faces; pass --landmarks".into()))?;
        chain = chain.with_landmarks(read_landmarks(path).map_err(|e| anyhow!(e))?);
    }
    let loaded = restore::<T>(ck).map_err(|e| anyhow!(e))?;
    let manifest = cfg.manifest.as_ref().ok_or_else(|| CliError::Usage("eval needs --manifest".into()))?;
    let batches = make_batches(&load_manifest(manifest).map_err(|e| anyhow!(e))?, cfg.seq_len).map_err(|e| anyhow!(e))?;
    let source = FrameSource::new(&cfg.frames_root, loaded.model.spec.input_size, chain);
    let (report, preds) = evaluate(&loaded.model, &source, &batches, cfg.group_size, &a.dataset).map_err(|e| anyhow!(e))?;
    if let Some(p) = &a.dump_predictions {
        write_text(p, &preds.to_csv())?;
    }
    Ok(report)
}

pub fn eval(a: &EvalArgs) -> CliResult {
    if a.ckpt.is_empty() {
        return usage("eval needs at least one --ckpt");
    }
    if a.dump_predictions.is_some() && a.ckpt.len() > 1 {
        return usage("--dump-predictions takes a single --ckpt");
    }
    let cfg = base_config(&a.run)?;
    let mut reports = Vec::new();
    for path in &a.ckpt {
        let ck = Checkpoint::read(path).map_err(|e| anyhow!("{}: {e}", path.display()))?;
        let report = match ck.get("scalar") {
            Some("f32") => evaluate_checkpoint::<f32>(ck, &cfg, a)?,
            _ => evaluate_checkpoint::<f64>(ck, &cfg, a)?,
        };
        reports.push(report);
    }
    print!("{}", render_table(&reports, a.mse).map_err(|e| anyhow!(e))?);
    println!();
    print!("{}", reports_tsv(&reports));
    Ok(())
}

fn predict_with<T: Scalar>(ck: Checkpoint, frame: &[f64], a: &PredictArgs) -> CliResult<(f64, f64)> {
    let loaded = restore::<T>(ck).map_err(|e| anyhow!(e))?;
    predict_static(&loaded.model, frame, a.seq_len, a.tail).map_err(|e| CliError::Usage(e.to_string()))
}

pub fn predict(a: &PredictArgs) -> CliResult {
    let ck = Checkpoint::read(&a.ckpt).map_err(|e| anyhow!("{}: {e}", a.ckpt.display()))?;
    let size = ck.model_spec().map_err(|e| anyhow!(e))?.input_size;
    let mut chain = chain_from_checkpoint(&ck).map_err(train_error)?;
    if chain.needs_landmarks() {
        let path = a.landmarks.as_ref().ok_or_else(|| CliError::Usage("checkpoint aligns faces; pass --landmarks".into()))?;
        chain = chain.with_landmarks(read_landmarks(path).map_err(|e| anyhow!(e))?);
    }
    let img = load_image(&a.image).map_err(|e| anyhow!(e))?;
    let key = a.image.to_string_lossy();
    let frame = chain.apply(&img, &key, size).map_err(|e| anyhow!(e))?.into_data();
    let (v, ar) = match ck.get("scalar") {
        Some("f32") => predict_with::<f32>(ck, &frame, a)?,
        _ => predict_with::<f64>(ck, &frame, a)?,
    };
    println!("{v:.6}\t{ar:.6}");
    Ok(())
}

pub fn synth(a: &SynthArgs) -> CliResult {
    let spec = SynthSpec { videos: a.videos, frames: a.frames, image_size: a.image_size, seed: a.seed, ..SynthSpec::default() };
    if spec.videos == 0 || spec.frames == 0 || spec.image_size == 0 {
        return usage("--videos, --frames and --image-size must be positive");
    }
    let manifest = write_synthetic_dataset(&a.out, &spec).map_err(|e| anyhow!(e))?;
    println!("{}", manifest.display());
    Ok(())
}
