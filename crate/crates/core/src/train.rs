//! Config-driven training: shuffled groups per epoch, `1 − CCC` updates
//! with Adam, per-epoch evaluation, checkpoints and early stopping.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::annotation::ManifestRecord;
use crate::dataio::{
    apply_split, epoch_plan, load_manifest, make_batches, split_train_test, DataError, FrameSource, SequenceBatch,
    SplitRatio,
};
use crate::eval::{predict_batches, DimMetrics, EvalError};
use crate::nn::checkpoint::{checkpoint_of, restore, Checkpoint};
use crate::nn::{loss_1mccc_with, warm_start, AdamState, LossStats, Model, ModelSpec, NnError};
use crate::preproc::{compute_stats, read_landmarks, DatasetStats, PreprocChain, PreprocError};
use crate::scalar::Scalar;

pub const LOG_FILE: &str = "train_log.tsv";
pub const STATS_FILE: &str = "stats.txt";
pub const LOG_HEADER: &str = "epoch\ttrain_loss\ttrain_ccc_v\ttrain_ccc_a\ttrain_mse_v\ttrain_mse_a\ttest_ccc_v\ttest_ccc_a\ttest_mse_v\ttest_mse_a\twall_secs";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Preproc(#[from] PreprocError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss at epoch {epoch}, group {group} (batches: {batches})")]
    NonFinite { epoch: usize, group: usize, batches: String },
    #[error("checkpoint does not match the configuration: {0}")]
    Resume(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Numeric type used for parameters and activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(format!("unknown precision '{other}' (f32 or f64)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: String,
    /// Defaults to the preset's native input size.
    pub image_size: Option<usize>,
    pub seq_len: usize,
    pub group_size: usize,
    pub lr: f64,
    /// Defaults to 60 for resnet presets and 50 otherwise.
    pub epochs: Option<usize>,
    pub checkpoint_every: usize,
    pub patience: usize,
    pub seed: u64,
    pub preproc: String,
    pub channelwise_stats: bool,
    pub stats: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub split_ratio: SplitRatio,
    pub frames_root: PathBuf,
    pub landmarks: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub warm_start: Option<PathBuf>,
    /// Parameter-name prefixes copied on warm start; empty copies all.
    pub warm_start_prefixes: Vec<String>,
    pub freeze: Vec<String>,
    pub loss: LossStats,
    /// Evaluate on this many seeded-random batches per set instead of all.
    pub eval_subset: Option<usize>,
    /// Stop once both test CCCs reach this value.
    pub target_ccc: Option<f64>,
    pub cache_images: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: "vgg16-gru".into(),
            image_size: None,
            seq_len: 80,
            group_size: 4,
            lr: crate::nn::adam::DEFAULT_LR,
            epochs: None,
            checkpoint_every: 10,
            patience: 10,
            seed: 0,
            preproc: "normalize".into(),
            channelwise_stats: false,
            stats: None,
            manifest: None,
            test_manifest: None,
            split: None,
            split_ratio: SplitRatio::default(),
            frames_root: PathBuf::from("."),
            landmarks: None,
            out_dir: PathBuf::from("runs"),
            warm_start: None,
            warm_start_prefixes: Vec::new(),
            freeze: Vec::new(),
            loss: LossStats::Joint,
            eval_subset: None,
            target_ccc: None,
            cache_images: false,
            precision: Precision::F64,
        }
    }
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
}

fn optional_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "model", "image_size", "seq_len", "group_size", "lr", "epochs", "checkpoint_every", "patience", "seed",
        "preproc", "channelwise_stats", "stats", "manifest", "test_manifest", "split", "split_ratio", "frames_root",
        "landmarks", "out_dir", "warm_start", "warm_start_prefixes", "freeze", "loss", "eval_subset", "target_ccc",
        "cache_images", "precision",
    ];

    /// `key = value` lines; `#` starts a comment. Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| TrainError::Config {
                line: idx + 1,
                msg: format!("expected key = value, got '{line}'"),
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|msg| TrainError::Config { line: idx + 1, msg })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse '{v}'"))
        }
        fn flag(key: &str, v: &str) -> Result<bool, String> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(format!("{key}: expected true or false, got '{v}'")),
            }
        }
        match key {
            "model" => self.model = value.to_string(),
            "image_size" => self.image_size = Some(num(key, value)?),
            "seq_len" => self.seq_len = num(key, value)?,
            "group_size" => self.group_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = Some(num(key, value)?),
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "preproc" => self.preproc = value.to_string(),
            "channelwise_stats" => self.channelwise_stats = flag(key, value)?,
            "stats" => self.stats = optional_path(value),
            "manifest" => self.manifest = optional_path(value),
            "test_manifest" => self.test_manifest = optional_path(value),
            "split" => self.split = optional_path(value),
            "split_ratio" => self.split_ratio = value.parse().map_err(|e: DataError| e.to_string())?,
            "frames_root" => self.frames_root = PathBuf::from(value),
            "landmarks" => self.landmarks = optional_path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "warm_start" => self.warm_start = optional_path(value),
            "warm_start_prefixes" => self.warm_start_prefixes = list(value),
            "freeze" => self.freeze = list(value),
            "loss" => self.loss = value.parse()?,
            "eval_subset" => self.eval_subset = Some(num(key, value)?),
            "target_ccc" => self.target_ccc = Some(num(key, value)?),
            "cache_images" => self.cache_images = flag(key, value)?,
            "precision" => self.precision = value.parse()?,
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    pub fn resolved_epochs(&self) -> usize {
        self.epochs.unwrap_or(if self.model.starts_with("resnet") { 60 } else { 50 })
    }

    pub fn model_spec(&self) -> Result<ModelSpec, TrainError> {
        Ok(match self.image_size {
            Some(s) => ModelSpec::preset_with_input(&self.model, s)?,
            None => ModelSpec::preset(&self.model)?,
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Invalid(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.seq_len < 1 {
            return bad("seq_len must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.resolved_epochs() < 1 {
            return bad("epochs must be at least 1");
        }
        if self.checkpoint_every < 1 {
            return bad("checkpoint_every must be at least 1");
        }
        if self.eval_subset == Some(0) {
            return bad("eval_subset must be positive");
        }
        self.model_spec()?;
        self.preproc.parse::<PreprocChain>()?;
        Ok(())
    }
}

/// Batches and frame loader for one run.
#[derive(Debug)]
pub struct Dataset {
    pub train: Vec<SequenceBatch>,
    pub test: Vec<SequenceBatch>,
    pub source: FrameSource,
}

/// Loads manifests, splits, computes statistics when the chain needs them
/// and builds the frame source described by `cfg`.
pub fn prepare_dataset(cfg: &TrainConfig) -> Result<Dataset, TrainError> {
    let manifest = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| TrainError::Invalid("no manifest given".into()))?;
    let records = load_manifest(manifest)?;
    let (train, test): (Vec<ManifestRecord>, Vec<ManifestRecord>) = match (&cfg.test_manifest, &cfg.split) {
        (Some(test), _) => (records, load_manifest(test)?),
        (None, Some(split)) => {
            let s = apply_split(&records, &fs::read_to_string(split).map_err(io_err(split))?)?;
            (s.train, s.test)
        }
        (None, None) => {
            let s = split_train_test(&records, cfg.split_ratio, cfg.seed)?;
            (s.train, s.test)
        }
    };
    let mut chain: PreprocChain = cfg.preproc.parse()?;
    if chain.needs_landmarks() {
        let path = cfg
            .landmarks
            .as_ref()
            .ok_or_else(|| TrainError::Invalid("crop_align needs a landmarks file".into()))?;
        chain = chain.with_landmarks(read_landmarks(path)?);
    }
    if chain.needs_stats() {
        let stats = match &cfg.stats {
            Some(p) => DatasetStats::read(p)?,
            None => {
                let paths: Vec<PathBuf> = train.iter().map(|r| cfg.frames_root.join(&r.frame_path)).collect();
                compute_stats(&paths, cfg.channelwise_stats)?
            }
        };
        chain = chain.with_stats(stats);
    }
    let spec = cfg.model_spec()?;
    let source = FrameSource::new(&cfg.frames_root, spec.input_size, chain).with_cache(cfg.cache_images);
    Ok(Dataset { train: make_batches(&train, cfg.seq_len)?, test: make_batches(&test, cfg.seq_len)?, source })
}

/// Metrics of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train: DimMetrics,
    pub test: DimMetrics,
    /// Batches consumed by updates this epoch.
    pub batches: usize,
    pub wall_secs: f64,
}

impl EpochReport {
    pub fn tsv_line(&self) -> String {
        let (a, b) = (&self.train, &self.test);
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.2}",
            self.epoch,
            self.train_loss,
            a.ccc_valence,
            a.ccc_arousal,
            a.mse_valence,
            a.mse_arousal,
            b.ccc_valence,
            b.ccc_arousal,
            b.mse_valence,
            b.mse_arousal,
            self.wall_secs
        )
    }

    /// Equality ignoring wall-clock time.
    pub fn same_result(&self, other: &Self) -> bool {
        Self { wall_secs: 0.0, ..self.clone() } == Self { wall_secs: 0.0, ..other.clone() }
    }
}

/// Why [`Trainer::run`] returned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    EarlyStop,
    TargetReached,
    /// Resumed at or past the configured epoch count.
    NothingToDo,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub reports: Vec<EpochReport>,
    pub stop: StopReason,
    pub final_checkpoint: Option<PathBuf>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch:04}.aflb")
}

/// Owns the model, optimizer and early-stop state of one run.
#[derive(Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub adam: AdamState,
    pub data: Dataset,
    /// Completed epochs.
    pub epoch: usize,
    pub best_ccc: f64,
    pub since_best: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, data: Dataset) -> Result<Self, TrainError> {
        config.validate()?;
        let mut model = Model::new(config.model_spec()?, config.seed)?;
        if let Some(path) = &config.warm_start {
            let ck = Checkpoint::read(path)?;
            warm_start(&mut model, &ck, &config.warm_start_prefixes, false);
        }
        model.freeze(&config.freeze);
        let adam = AdamState::new(config.lr);
        Ok(Self { config, model, adam, data, epoch: 0, best_ccc: f64::NEG_INFINITY, since_best: 0 })
    }

    /// Restores model, optimizer, epoch counter and early-stop state.
    pub fn resume(config: TrainConfig, data: Dataset, checkpoint: &Path) -> Result<Self, TrainError> {
        config.validate()?;
        let loaded = restore::<T>(Checkpoint::read(checkpoint)?)?;
        let expected = config.model_spec()?;
        if loaded.model.spec != expected {
            return Err(TrainError::Resume(format!(
                "checkpoint holds '{}' at input {}, config asks for '{}' at input {}",
                loaded.model.spec.name, loaded.model.spec.input_size, expected.name, expected.input_size
            )));
        }
        let ck = &loaded.raw;
        let meta = |key: &str| ck.get(key).ok_or_else(|| TrainError::Resume(format!("missing {key}")));
        let parse_err = |key: &str| TrainError::Resume(format!("bad {key}"));
        let epoch = meta("epoch")?.parse().map_err(|_| parse_err("epoch"))?;
        let best_ccc = meta("train.best_ccc")?.parse().map_err(|_| parse_err("train.best_ccc"))?;
        let since_best = meta("train.since_best")?.parse().map_err(|_| parse_err("train.since_best"))?;
        let adam = loaded.adam.unwrap_or_else(|| AdamState::new(config.lr));
        Ok(Self { config, model: loaded.model, adam, data, epoch, best_ccc, since_best })
    }

    fn checkpoint_meta(&self) -> Vec<(String, String)> {
        let mut meta = vec![
            ("epoch".to_string(), self.epoch.to_string()),
            ("train.best_ccc".into(), self.best_ccc.to_string()),
            ("train.since_best".into(), self.since_best.to_string()),
            ("train.seed".into(), self.config.seed.to_string()),
            ("train.seq_len".into(), self.config.seq_len.to_string()),
            ("train.group_size".into(), self.config.group_size.to_string()),
            ("preproc.chain".into(), self.data.source.chain.to_string()),
        ];
        if let Some(s) = &self.data.source.chain.stats {
            meta.extend(stats_meta(s));
        }
        meta
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        checkpoint_of(&self.model, Some(&self.adam), &self.checkpoint_meta()).write(path)?;
        Ok(())
    }

    fn eval_batches(&self, batches: &[SequenceBatch], salt: u64) -> Vec<SequenceBatch> {
        match self.config.eval_subset {
            Some(k) if k < batches.len() => {
                let mut idx: Vec<usize> = (0..batches.len()).collect();
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed ^ salt));
                idx.truncate(k);
                idx.sort_unstable();
                idx.into_iter().map(|i| batches[i].clone()).collect()
            }
            _ => batches.to_vec(),
        }
    }

    fn evaluate_set(&self, batches: &[SequenceBatch], salt: u64) -> Result<DimMetrics, TrainError> {
        let chosen = self.eval_batches(batches, salt);
        let preds = predict_batches(&self.model, &self.data.source, &chosen, self.config.group_size)?;
        Ok(preds.metrics()?)
    }

    /// One pass over the training batches followed by evaluation.
    pub fn run_epoch(&mut self) -> Result<EpochReport, TrainError> {
        let started = Instant::now();
        let epoch_index = self.epoch;
        let plan = epoch_plan(&self.data.train, self.config.group_size, self.config.seed, epoch_index as u64)?;
        debug_assert_eq!(plan.batch_count(), self.data.train.len());
        let (mut loss_sum, mut updates, mut consumed) = (0.0, 0usize, 0usize);
        let Self { model, adam, data, config, .. } = self;
        data.source.stream_groups::<T, TrainError, _>(&data.train, &plan, |gi, x, y| {
            let group = &plan.groups[gi];
            consumed += group.len();
            if x.shape()[0] * x.shape()[1] < 2 {
                return Ok(());
            }
            model.zero_grad();
            let (out, tape) = model.forward_train(&x)?;
            let (loss, grad) = loss_1mccc_with(&out, &y, config.loss)?;
            if !loss.is_finite() || grad.data().iter().any(|g| !g.is_finite()) {
                let batches = group
                    .iter()
                    .map(|&i| format!("{}@{}", data.train[i].video_id, data.train[i].start))
                    .collect::<Vec<_>>()
                    .join(",");
                return Err(TrainError::NonFinite { epoch: epoch_index + 1, group: gi, batches });
            }
            model.backward(tape, grad.data())?;
            adam.step(&mut model.params_mut())?;
            loss_sum += loss.as_f64();
            updates += 1;
            Ok(())
        })?;
        self.epoch += 1;
        let train = self.evaluate_set(&self.data.train, 0x74_7261_696e)?;
        let test = self.evaluate_set(&self.data.test, 0x7465_7374)?;
        if !train.is_finite() || !test.is_finite() {
            return Err(TrainError::NonFinite { epoch: self.epoch, group: usize::MAX, batches: "evaluation".into() });
        }
        let mean = test.mean_ccc();
        if mean > self.best_ccc {
            self.best_ccc = mean;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        Ok(EpochReport {
            epoch: self.epoch,
            train_loss: if updates > 0 { loss_sum / updates as f64 } else { f64::NAN },
            train,
            test,
            batches: consumed,
            wall_secs: started.elapsed().as_secs_f64(),
        })
    }

    /// Trains until the epoch budget, early stop or target CCC. Each report
    /// is appended to the log in `out_dir` and passed to `on_epoch`.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochReport)) -> Result<TrainOutcome, TrainError> {
        let total = self.config.resolved_epochs();
        if self.epoch >= total {
            return Ok(TrainOutcome { reports: Vec::new(), stop: StopReason::NothingToDo, final_checkpoint: None });
        }
        let out = self.config.out_dir.clone();
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        let log_path = out.join(LOG_FILE);
        let fresh = self.epoch == 0;
        let mut log = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        if fresh {
            writeln!(log, "{LOG_HEADER}").map_err(io_err(&log_path))?;
            if let Some(stats) = &self.data.source.chain.stats {
                let p = out.join(STATS_FILE);
                fs::write(&p, stats.to_text()).map_err(io_err(&p))?;
            }
        }
        let mut reports = Vec::new();
        let mut stop = StopReason::Completed;
        let mut last_saved = None;
        while self.epoch < total {
            let report = self.run_epoch()?;
            writeln!(log, "{}", report.tsv_line()).map_err(io_err(&log_path))?;
            on_epoch(&report);
            let hit_target = self
                .config
                .target_ccc
                .is_some_and(|t| report.test.ccc_valence >= t && report.test.ccc_arousal >= t);
            reports.push(report);
            if hit_target {
                stop = StopReason::TargetReached;
            } else if self.since_best >= self.config.patience {
                stop = StopReason::EarlyStop;
            }
            let last = stop != StopReason::Completed || self.epoch == total;
            if self.epoch.is_multiple_of(self.config.checkpoint_every) || last {
                let path = out.join(checkpoint_name(self.epoch));
                self.save(&path)?;
                last_saved = Some(path);
            }
            if last {
                break;
            }
        }
        Ok(TrainOutcome { reports, stop, final_checkpoint: last_saved })
    }
}

/// Checkpoint metadata entries describing preprocessing statistics.
pub fn stats_meta(s: &DatasetStats) -> Vec<(String, String)> {
    let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    vec![
        ("preproc.stats.mean".into(), join(&s.mean)),
        ("preproc.stats.std".into(), join(&s.std)),
        ("preproc.stats.count".into(), s.count.to_string()),
    ]
}

/// Preprocessing chain recorded in a checkpoint, with its statistics.
pub fn chain_from_checkpoint(ck: &Checkpoint) -> Result<PreprocChain, TrainError> {
    let chain: PreprocChain = ck.get("preproc.chain").unwrap_or("normalize").parse()?;
    if let (Some(m), Some(s), Some(c)) =
        (ck.get("preproc.stats.mean"), ck.get("preproc.stats.std"), ck.get("preproc.stats.count"))
    {
        let mut text = String::new();
        let _ = write!(text, "mean={m}\nstd={s}\ncount={c}\n");
        return Ok(chain.with_stats(text.parse()?));
    }
    Ok(chain)
}
