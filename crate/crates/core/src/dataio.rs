//! Manifests, train/test splits, sequence batches, epoch plans and image
//! loading with read-ahead.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc::sync_channel;
use std::sync::{Arc, RwLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::annotation::ManifestRecord;
use crate::nn::Tensor;
use crate::preproc::{load_image, PreprocChain, PreprocError};
use crate::scalar::Scalar;

/// Groups prepared ahead of the consumer.
pub const READ_AHEAD: usize = 2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: value {value} outside [-1, 1]")]
    Range { line: usize, value: f64 },
    #[error("line {line}: video '{video}' appears in more than one block")]
    Contiguity { line: usize, video: String },
    #[error("need at least 2 videos to split, found {0}")]
    TooFewVideos(usize),
    #[error("group size must be at least 2, got {0}")]
    GroupSize(usize),
    #[error("sequence length must be at least 1")]
    SequenceLength,
    #[error("{batches} batches cannot fill a group of {n}")]
    NotEnoughBatches { batches: usize, n: usize },
    #[error("invalid split ratio '{0}' (expected e.g. 2:1)")]
    Ratio(String),
    #[error("empty group")]
    EmptyGroup,
    #[error("split file does not mention video '{0}'")]
    UnsplitVideo(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] PreprocError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn video_of(frame_path: &Path) -> String {
    frame_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Parses manifest CSV: `frame_path,valence,arousal`, or
/// `video_id,frame_path,valence,arousal`. Without an explicit id the video is
/// the frame's parent directory.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>, DataError> {
    let mut records: Vec<ManifestRecord> = Vec::new();
    let mut finished: HashSet<String> = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (video, path, v, a) = match fields[..] {
            [p, v, a] => (None, p, v, a),
            [id, p, v, a] => (Some(id), p, v, a),
            _ => {
                return Err(DataError::Parse {
                    line: line_no,
                    msg: format!("expected 3 or 4 fields, got {}", fields.len()),
                })
            }
        };
        let value = |s: &str| -> Result<f64, DataError> {
            let x: f64 = s
                .parse()
                .map_err(|_| DataError::Parse { line: line_no, msg: format!("bad number '{s}'") })?;
            if !(-1.0..=1.0).contains(&x) {
                return Err(DataError::Range { line: line_no, value: x });
            }
            Ok(x)
        };
        if path.is_empty() {
            return Err(DataError::Parse { line: line_no, msg: "empty frame path".into() });
        }
        let frame_path = PathBuf::from(path.replace('\\', "/"));
        let video_id = video.map(str::to_string).unwrap_or_else(|| video_of(&frame_path));
        let (valence, arousal) = (value(v)?, value(a)?);
        if let Some(prev) = records.last() {
            if prev.video_id != video_id {
                finished.insert(prev.video_id.clone());
            }
        }
        if finished.contains(&video_id) {
            return Err(DataError::Contiguity { line: line_no, video: video_id });
        }
        records.push(ManifestRecord { video_id, frame_path, valence, arousal });
    }
    Ok(records)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DataError> {
    parse_manifest(&fs::read_to_string(path).map_err(io_err(path))?)
}

/// Video ids in order of first appearance with their frame counts.
pub fn video_frame_counts(records: &[ManifestRecord]) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some((v, n)) if *v == r.video_id => *n += 1,
            _ => out.push((r.video_id.clone(), 1)),
        }
    }
    out
}

/// Train:test proportion, written `a:b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatio {
    pub train: u32,
    pub test: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self { train: 2, test: 1 }
    }
}

impl FromStr for SplitRatio {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DataError::Ratio(s.to_string());
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let (train, test) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if train == 0 || test == 0 {
            return Err(bad());
        }
        Ok(Self { train, test })
    }
}

impl fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.train, self.test)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train_videos: Vec<String>,
    pub test_videos: Vec<String>,
    pub train: Vec<ManifestRecord>,
    pub test: Vec<ManifestRecord>,
}

impl Split {
    /// `video_id,train|test` lines in manifest order.
    pub fn to_text(&self, records: &[ManifestRecord]) -> String {
        let train: HashSet<&str> = self.train_videos.iter().map(String::as_str).collect();
        video_frame_counts(records)
            .into_iter()
            .map(|(v, _)| format!("{v},{}\n", if train.contains(v.as_str()) { "train" } else { "test" }))
            .collect()
    }
}

fn partition(records: &[ManifestRecord], train_videos: Vec<String>, test_videos: Vec<String>) -> Split {
    let train_set: HashSet<&str> = train_videos.iter().map(String::as_str).collect();
    let (train, test) = records.iter().cloned().partition(|r| train_set.contains(r.video_id.as_str()));
    Split { train_videos, test_videos, train, test }
}

/// Whole-video split: videos in seeded random order go to train until the
/// train frame count reaches its share of the total; the rest are test.
pub fn split_train_test(records: &[ManifestRecord], ratio: SplitRatio, seed: u64) -> Result<Split, DataError> {
    let mut videos = video_frame_counts(records);
    if videos.len() < 2 {
        return Err(DataError::TooFewVideos(videos.len()));
    }
    videos.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total: u64 = videos.iter().map(|(_, n)| *n as u64).sum();
    let (a, b) = (ratio.train as u64, ratio.test as u64);
    let mut train_frames = 0u64;
    let mut cut = 0;
    while cut < videos.len() && train_frames * (a + b) < total * a {
        train_frames += videos[cut].1 as u64;
        cut += 1;
    }
    let cut = cut.clamp(1, videos.len() - 1);
    let ids: Vec<String> = videos.into_iter().map(|(v, _)| v).collect();
    let (train, test) = ids.split_at(cut);
    Ok(partition(records, train.to_vec(), test.to_vec()))
}

/// Applies a split file written by [`Split::to_text`].
pub fn apply_split(records: &[ManifestRecord], text: &str) -> Result<Split, DataError> {
    let mut side: HashMap<&str, bool> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| DataError::Parse { line: idx + 1, msg };
        let (video, which) = line.split_once(',').ok_or_else(|| err("expected video_id,train|test".into()))?;
        let is_train = match which.trim() {
            "train" => true,
            "test" => false,
            other => return Err(err(format!("unknown side '{other}'"))),
        };
        side.insert(video.trim(), is_train);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (v, _) in video_frame_counts(records) {
        match side.get(v.as_str()) {
            Some(true) => train.push(v),
            Some(false) => test.push(v),
            None => return Err(DataError::UnsplitVideo(v)),
        }
    }
    Ok(partition(records, train, test))
}

/// `l` consecutive frames of one video with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub video_id: String,
    /// Zero-based index of the first frame within its video.
    pub start: usize,
    pub frame_paths: Vec<PathBuf>,
    /// `(valence, arousal)` per frame.
    pub targets: Vec<[f64; 2]>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.frame_paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_paths.is_empty()
    }
}

/// Cuts every video into non-overlapping windows of `l` frames, dropping
/// each video's trailing remainder.
pub fn make_batches(records: &[ManifestRecord], l: usize) -> Result<Vec<SequenceBatch>, DataError> {
    if l == 0 {
        return Err(DataError::SequenceLength);
    }
    let mut out = Vec::new();
    let mut offset = 0;
    for (video, count) in video_frame_counts(records) {
        let frames = &records[offset..offset + count];
        out.extend(frames.chunks_exact(l).enumerate().map(|(k, chunk)| SequenceBatch {
            video_id: video.clone(),
            start: k * l,
            frame_paths: chunk.iter().map(|r| r.frame_path.clone()).collect(),
            targets: chunk.iter().map(|r| [r.valence, r.arousal]).collect(),
        }));
        offset += count;
    }
    Ok(out)
}

/// Groups of batch indices for one epoch. All groups hold `n` batches
/// except possibly the last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub groups: Vec<Vec<usize>>,
    pub seed: u64,
    pub epoch: u64,
}

impl EpochPlan {
    /// Groups of size 1 when the plan is a plain ordered pass.
    pub fn sequential(batches: usize, n: usize) -> Self {
        let idx: Vec<usize> = (0..batches).collect();
        Self { groups: idx.chunks(n.max(1)).map(<[usize]>::to_vec).collect(), seed: 0, epoch: 0 }
    }

    pub fn batch_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

/// Shuffled grouping of `batches` into groups of `n`, seeded by
/// `seed ^ epoch`. Whenever some grouping with pairwise distinct videos
/// per group exists, the plan is one.
///
/// Batches are laid out video by video (largest video first) and dealt
/// row by row into `g = ⌈N/n⌉` columns; each column is a group. The first
/// `r` rows are `g` wide and the rest `g − 1`, where `r` is the size of the
/// remainder group, so a video with at most `g` batches never repeats in a
/// column unless more than `r` videos have exactly `g` batches, which is
/// infeasible for any grouping.
pub fn epoch_plan(batches: &[SequenceBatch], n: usize, seed: u64, epoch: u64) -> Result<EpochPlan, DataError> {
    if n < 2 {
        return Err(DataError::GroupSize(n));
    }
    let total = batches.len();
    if total < n {
        return Err(DataError::NotEnoughBatches { batches: total, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch);
    let mut by_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, b) in batches.iter().enumerate() {
        by_video.entry(b.video_id.as_str()).or_default().push(i);
    }
    let mut videos: Vec<Vec<usize>> = by_video.into_values().collect();
    for v in &mut videos {
        v.shuffle(&mut rng);
    }
    videos.shuffle(&mut rng);
    videos.sort_by_key(|v| std::cmp::Reverse(v.len()));

    let g = total.div_ceil(n);
    let r = total - (g - 1) * n;
    let mut groups: Vec<Vec<usize>> = vec![Vec::with_capacity(n); g];
    let mut order = videos.into_iter().flatten();
    for row in 0..n {
        let width = if row < r { g } else { g - 1 };
        for group in groups.iter_mut().take(width) {
            group.push(order.next().expect("row widths sum to the batch count"));
        }
    }
    let last = groups.len() - 1;
    groups[..last].shuffle(&mut rng);
    for group in &mut groups {
        group.shuffle(&mut rng);
    }
    Ok(EpochPlan { groups, seed, epoch })
}

/// Decodes and preprocesses frames, optionally memoizing the results.
#[derive(Debug)]
pub struct FrameSource {
    pub frames_root: PathBuf,
    pub image_size: usize,
    pub chain: PreprocChain,
    cache: Option<RwLock<HashMap<PathBuf, Arc<Vec<f64>>>>>,
}

impl FrameSource {
    pub fn new(frames_root: impl Into<PathBuf>, image_size: usize, chain: PreprocChain) -> Self {
        Self { frames_root: frames_root.into(), image_size, chain, cache: None }
    }

    /// Keeps every preprocessed frame in memory after its first load.
    pub fn with_cache(mut self, on: bool) -> Self {
        self.cache = on.then(|| RwLock::new(HashMap::new()));
        self
    }

    /// Preprocessed `S × S × 3` values of one frame.
    pub fn frame(&self, rel: &Path) -> Result<Arc<Vec<f64>>, DataError> {
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.read().expect("cache lock").get(rel) {
                return Ok(Arc::clone(hit));
            }
        }
        let img = load_image(&self.frames_root.join(rel))?;
        let key = rel.to_string_lossy().replace('\\', "/");
        let out = Arc::new(self.chain.apply(&img, &key, self.image_size)?.into_data());
        if let Some(cache) = &self.cache {
            cache.write().expect("cache lock").insert(rel.to_path_buf(), Arc::clone(&out));
        }
        Ok(out)
    }

    /// `([n, l, S, S, 3], [n, l, 2])` tensors for a group of equally long batches.
    pub fn load_group<T: Scalar>(&self, group: &[&SequenceBatch]) -> Result<(Tensor<T>, Tensor<T>), DataError> {
        let first = group.first().ok_or(DataError::EmptyGroup)?;
        let l = first.len();
        if l == 0 || group.iter().any(|b| b.len() != l) {
            return Err(DataError::SequenceLength);
        }
        let n = group.len();
        let s = self.image_size;
        let frame_len = s * s * 3;
        let paths: Vec<&PathBuf> = group.iter().flat_map(|b| &b.frame_paths).collect();
        let frames = paths.par_iter().map(|p| self.frame(p)).collect::<Result<Vec<_>, _>>()?;
        let mut x = Vec::with_capacity(n * l * frame_len);
        for f in &frames {
            x.extend(f.iter().map(|&v| T::from_f64_lossy(v)));
        }
        let y = group
            .iter()
            .flat_map(|b| b.targets.iter().flat_map(|t| t.iter().map(|&v| T::from_f64_lossy(v))))
            .collect();
        let x = Tensor::new(vec![n, l, s, s, 3], x).map_err(|e| DataError::Parse { line: 0, msg: e.to_string() })?;
        let y = Tensor::new(vec![n, l, 2], y).map_err(|e| DataError::Parse { line: 0, msg: e.to_string() })?;
        Ok((x, y))
    }

    /// Loads the plan's groups on a helper thread, at most [`READ_AHEAD`]
    /// groups ahead, and hands them to `consume` in plan order. The first
    /// error from either side stops the stream.
    pub fn stream_groups<T, E, F>(&self, batches: &[SequenceBatch], plan: &EpochPlan, mut consume: F) -> Result<(), E>
    where
        T: Scalar,
        E: From<DataError> + Send,
        F: FnMut(usize, Tensor<T>, Tensor<T>) -> Result<(), E>,
    {
        std::thread::scope(|scope| {
            let (tx, rx) = sync_channel::<Result<(usize, Tensor<T>, Tensor<T>), DataError>>(READ_AHEAD);
            scope.spawn(move || {
                for (gi, group) in plan.groups.iter().enumerate() {
                    let refs: Vec<&SequenceBatch> = group.iter().map(|&i| &batches[i]).collect();
                    let item = self.load_group(&refs).map(|(x, y)| (gi, x, y));
                    let failed = item.is_err();
                    if tx.send(item).is_err() || failed {
                        break;
                    }
                }
            });
            for item in rx.iter() {
                let (gi, x, y) = item?;
                consume(gi, x, y)?;
            }
            Ok(())
        })
    }
}
