//! Pixel preprocessing and eye-landmark alignment.
//!
//! Images are held as `f64` RGB in height × width × channel order. Values
//! stay in 8-bit pixel units until a value step (normalize, mean subtraction
//! or whitening) runs.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

pub const CHANNELS: usize = 3;
pub const DEFAULT_ALIGN_SIZE: usize = 112;
pub const DEFAULT_TARGET_LEFT: (f64, f64) = (0.3, 0.4);
pub const DEFAULT_TARGET_RIGHT: (f64, f64) = (0.7, 0.4);
/// Smallest standard deviation `whiten` accepts.
pub const STD_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PreprocError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("{0}: image has zero size")]
    EmptyImage(PathBuf),
    #[error("standard deviation {0} is too small to whiten")]
    ZeroStd(f64),
    #[error("eye points coincide")]
    CoincidentEyes,
    #[error("eye point ({0}, {1}) lies outside the {2}x{3} image")]
    EyeOutOfBounds(f64, f64, usize, usize),
    #[error("invalid image: {0}")]
    Shape(String),
    #[error("invalid preprocessing chain: {0}")]
    Chain(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no landmarks for frame {0}")]
    MissingLandmarks(String),
}

/// An RGB image in pixel units, row-major `[height][width][3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl PixelImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, PreprocError> {
        if data.len() != width * height * CHANNELS {
            return Err(PreprocError::Shape(format!(
                "{width}x{height} RGB needs {} values, got {}",
                width * height * CHANNELS,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * CHANNELS] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..CHANNELS {
                    data.push(f(x, y, ch));
                }
            }
        }
        Self { width, height, data }
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self { width: w as usize, height: h as usize, data: img.as_raw().iter().map(|&v| v as f64).collect() }
    }

    /// Rounds and clamps to 8 bits.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer length matches")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, ch: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + ch]
    }

    fn map(&self, f: impl Fn(f64, usize) -> f64) -> Self {
        let data = self.data.iter().enumerate().map(|(i, &v)| f(v, i % CHANNELS)).collect();
        Self { width: self.width, height: self.height, data }
    }

    /// Bilinear sample at a continuous pixel coordinate; neighbours outside
    /// the image count as 0.
    fn sample(&self, x: f64, y: f64, ch: usize) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let at = |xi: f64, yi: f64| {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
                0.0
            } else {
                self.get(xi as usize, yi as usize, ch)
            }
        };
        let top = at(x0, y0) * (1.0 - fx) + if fx > 0.0 { at(x0 + 1.0, y0) * fx } else { 0.0 };
        if fy == 0.0 {
            return top;
        }
        let bottom = at(x0, y0 + 1.0) * (1.0 - fx) + if fx > 0.0 { at(x0 + 1.0, y0 + 1.0) * fx } else { 0.0 };
        top * (1.0 - fy) + bottom * fy
    }
}

pub fn load_image(path: &Path) -> Result<PixelImage, PreprocError> {
    let bytes = fs::read(path).map_err(|source| PreprocError::Io { path: path.to_path_buf(), source })?;
    let decoded = image::load_from_memory(&bytes)
        .map_err(|e| PreprocError::Decode { path: path.to_path_buf(), msg: e.to_string() })?;
    if decoded.width() == 0 || decoded.height() == 0 {
        return Err(PreprocError::EmptyImage(path.to_path_buf()));
    }
    Ok(PixelImage::from_rgb8(&decoded.to_rgb8()))
}

/// `(v − 128) / 128`, mapping 8-bit values into `[-1, 0.9921875]`.
pub fn normalize_pixels(img: &PixelImage) -> PixelImage {
    img.map(|v, _| (v - 128.0) / 128.0)
}

/// Pixel statistics in 8-bit units: one entry for global stats, three for
/// per-channel stats. `std` is the population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: u64,
}

impl DatasetStats {
    pub fn is_channelwise(&self) -> bool {
        self.mean.len() == CHANNELS
    }

    fn channel(&self, ch: usize) -> (f64, f64) {
        if self.is_channelwise() {
            (self.mean[ch], self.std[ch])
        } else {
            (self.mean[0], self.std[0])
        }
    }

    /// `mean=…`, `std=…`, `count=…` lines; channel values are comma separated.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!("mean={}\nstd={}\ncount={}\n", join(&self.mean), join(&self.std), self.count)
    }

    pub fn read(path: &Path) -> Result<Self, PreprocError> {
        let text = fs::read_to_string(path).map_err(|source| PreprocError::Io { path: path.to_path_buf(), source })?;
        text.parse()
    }
}

impl FromStr for DatasetStats {
    type Err = PreprocError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let (mut mean, mut std, mut count) = (None, None, None);
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| PreprocError::Parse { line: idx + 1, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got '{line}'")))?;
            let floats = || {
                value
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| err(format!("{key}: {e}")))
            };
            match key.trim() {
                "mean" => mean = Some(floats()?),
                "std" => std = Some(floats()?),
                "count" => count = Some(value.trim().parse::<u64>().map_err(|e| err(format!("count: {e}")))?),
                other => return Err(err(format!("unknown key '{other}'"))),
            }
        }
        let missing = |k: &str| PreprocError::Parse { line: 0, msg: format!("missing {k}") };
        let (mean, std, count) = (mean.ok_or_else(|| missing("mean"))?, std.ok_or_else(|| missing("std"))?, count.ok_or_else(|| missing("count"))?);
        if mean.len() != std.len() || !(mean.len() == 1 || mean.len() == CHANNELS) {
            return Err(PreprocError::Parse { line: 0, msg: "mean and std need 1 or 3 values each".into() });
        }
        if std.iter().any(|&s| s < 0.0) || count == 0 {
            return Err(PreprocError::Parse { line: 0, msg: "std must be >= 0 and count > 0".into() });
        }
        Ok(Self { mean, std, count })
    }
}

/// Streaming mean/variance (Welford) with Chan's parallel merge.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn merge(&self, other: &Self) -> Self {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.count as f64 / count as f64;
        let m2 = self.m2 + other.m2 + delta * delta * (self.count as f64 * other.count as f64) / count as f64;
        Self { count, mean, m2 }
    }

    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).sqrt()
        }
    }
}

/// Accumulates global or per-channel pixel moments.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsAccumulator {
    channels: Vec<Moments>,
}

impl StatsAccumulator {
    pub fn new(channelwise: bool) -> Self {
        Self { channels: vec![Moments::default(); if channelwise { CHANNELS } else { 1 }] }
    }

    pub fn push_image(&mut self, img: &PixelImage) {
        let per_channel = self.channels.len() == CHANNELS;
        for (i, &v) in img.data.iter().enumerate() {
            let slot = if per_channel { i % CHANNELS } else { 0 };
            self.channels[slot].push(v);
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.channels.iter_mut().zip(&other.channels) {
            *a = a.merge(b);
        }
    }

    pub fn finish(&self) -> Option<DatasetStats> {
        let count = self.channels[0].count;
        (count > 0).then(|| DatasetStats {
            mean: self.channels.iter().map(|m| m.mean).collect(),
            std: self.channels.iter().map(Moments::std).collect(),
            count: self.channels.iter().map(|m| m.count).sum(),
        })
    }
}

/// Statistics over already-decoded images, merged in input order.
pub fn stats_of_images<'a>(images: impl IntoIterator<Item = &'a PixelImage>, channelwise: bool) -> Option<DatasetStats> {
    let mut acc = StatsAccumulator::new(channelwise);
    for img in images {
        acc.push_image(img);
    }
    acc.finish()
}

/// Decodes every image (in parallel) and merges per-image moments in list
/// order, so the result does not depend on thread scheduling.
pub fn compute_stats(paths: &[PathBuf], channelwise: bool) -> Result<DatasetStats, PreprocError> {
    let partials = paths
        .par_iter()
        .map(|p| {
            let img = load_image(p)?;
            let mut acc = StatsAccumulator::new(channelwise);
            acc.push_image(&img);
            Ok(acc)
        })
        .collect::<Result<Vec<_>, PreprocError>>()?;
    let mut total = StatsAccumulator::new(channelwise);
    for part in &partials {
        total.merge(part);
    }
    total.finish().ok_or_else(|| PreprocError::Shape("no pixels to compute statistics from".into()))
}

pub fn mean_subtract(img: &PixelImage, stats: &DatasetStats) -> PixelImage {
    img.map(|v, ch| v - stats.channel(ch).0)
}

/// `(v − mean) / std`.
pub fn whiten(img: &PixelImage, stats: &DatasetStats) -> Result<PixelImage, PreprocError> {
    if let Some(&s) = stats.std.iter().find(|&&s| s <= STD_EPS) {
        return Err(PreprocError::ZeroStd(s));
    }
    Ok(img.map(|v, ch| {
        let (m, s) = stats.channel(ch);
        (v - m) / s
    }))
}

/// Eye landmarks in source pixels plus the canonical output frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignSpec {
    pub left_eye: (f64, f64),
    pub right_eye: (f64, f64),
    pub out_size: usize,
    /// Output eye positions as fractions of `out_size`.
    pub target_left: (f64, f64),
    pub target_right: (f64, f64),
}

impl AlignSpec {
    pub fn new(left_eye: (f64, f64), right_eye: (f64, f64)) -> Self {
        Self {
            left_eye,
            right_eye,
            out_size: DEFAULT_ALIGN_SIZE,
            target_left: DEFAULT_TARGET_LEFT,
            target_right: DEFAULT_TARGET_RIGHT,
        }
    }

    pub fn with_out_size(mut self, out_size: usize) -> Self {
        self.out_size = out_size;
        self
    }
}

/// `z ↦ a·z + b` on points treated as complex numbers: rotation, uniform
/// scale and translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    a: (f64, f64),
    b: (f64, f64),
}

fn cmul(p: (f64, f64), q: (f64, f64)) -> (f64, f64) {
    (p.0 * q.0 - p.1 * q.1, p.0 * q.1 + p.1 * q.0)
}

fn cdiv(p: (f64, f64), q: (f64, f64)) -> (f64, f64) {
    let d = q.0 * q.0 + q.1 * q.1;
    ((p.0 * q.0 + p.1 * q.1) / d, (p.1 * q.0 - p.0 * q.1) / d)
}

impl Similarity {
    /// The transform taking `from.0 → to.0` and `from.1 → to.1`.
    pub fn from_pairs(from: ((f64, f64), (f64, f64)), to: ((f64, f64), (f64, f64))) -> Result<Self, PreprocError> {
        let df = (from.1 .0 - from.0 .0, from.1 .1 - from.0 .1);
        if df.0.hypot(df.1) < 1e-9 {
            return Err(PreprocError::CoincidentEyes);
        }
        let dt = (to.1 .0 - to.0 .0, to.1 .1 - to.0 .1);
        let a = cdiv(dt, df);
        let az = cmul(a, from.0);
        Ok(Self { a, b: (to.0 .0 - az.0, to.0 .1 - az.1) })
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let q = cmul(self.a, p);
        (q.0 + self.b.0, q.1 + self.b.1)
    }

    pub fn inverse(&self) -> Self {
        let a = cdiv((1.0, 0.0), self.a);
        let b = cmul(a, self.b);
        Self { a, b: (-b.0, -b.1) }
    }

    pub fn scale(&self) -> f64 {
        self.a.0.hypot(self.a.1)
    }

    pub fn angle(&self) -> f64 {
        self.a.1.atan2(self.a.0)
    }
}

/// Source-to-output transform for `spec`.
pub fn align_transform(spec: &AlignSpec) -> Result<Similarity, PreprocError> {
    let s = spec.out_size as f64;
    let tl = (spec.target_left.0 * s, spec.target_left.1 * s);
    let tr = (spec.target_right.0 * s, spec.target_right.1 * s);
    Similarity::from_pairs((spec.left_eye, spec.right_eye), (tl, tr))
}

/// Warps `img` so the eyes land on the target positions of an
/// `out_size × out_size` window. Pixel `(x, y)` sits at integer coordinates.
pub fn crop_align(img: &PixelImage, spec: &AlignSpec) -> Result<PixelImage, PreprocError> {
    if spec.out_size < 8 {
        return Err(PreprocError::Shape(format!("align size {} is below 8", spec.out_size)));
    }
    for &(x, y) in &[spec.left_eye, spec.right_eye] {
        let inside = x >= 0.0 && y >= 0.0 && x <= (img.width - 1) as f64 && y <= (img.height - 1) as f64;
        if !inside {
            return Err(PreprocError::EyeOutOfBounds(x, y, img.width, img.height));
        }
    }
    let inv = align_transform(spec)?.inverse();
    let n = spec.out_size;
    let mut data = vec![0.0; n * n * CHANNELS];
    data.par_chunks_mut(n * CHANNELS).enumerate().for_each(|(y, row)| {
        for x in 0..n {
            let (sx, sy) = inv.apply((x as f64, y as f64));
            for ch in 0..CHANNELS {
                row[x * CHANNELS + ch] = img.sample(sx, sy, ch);
            }
        }
    });
    Ok(PixelImage { width: n, height: n, data })
}

/// Bilinear resize with half-pixel centres and edge clamping. Equal sizes
/// return the input unchanged.
pub fn resize_bilinear(img: &PixelImage, width: usize, height: usize) -> PixelImage {
    if img.width == width && img.height == height {
        return img.clone();
    }
    let src = |out: usize, n_out: usize, n_in: usize| {
        let s = ((out as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let mut data = vec![0.0; width * height * CHANNELS];
    data.par_chunks_mut(width * CHANNELS).enumerate().for_each(|(y, row)| {
        let (y0, y1, fy) = src(y, height, img.height);
        for x in 0..width {
            let (x0, x1, fx) = src(x, width, img.width);
            for ch in 0..CHANNELS {
                let top = img.get(x0, y0, ch) * (1.0 - fx) + img.get(x1, y0, ch) * fx;
                let bottom = img.get(x0, y1, ch) * (1.0 - fx) + img.get(x1, y1, ch) * fx;
                row[x * CHANNELS + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    });
    PixelImage { width, height, data }
}

/// Eye landmarks keyed by manifest frame path.
pub type Landmarks = HashMap<String, ((f64, f64), (f64, f64))>;

/// Reads `frame_path,lx,ly,rx,ry` lines. Blank lines and `#` comments are skipped.
pub fn parse_landmarks(text: &str) -> Result<Landmarks, PreprocError> {
    let mut out = Landmarks::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| PreprocError::Parse { line: idx + 1, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", fields.len())));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(format!("bad coordinate '{f}'")))?;
        }
        out.insert(fields[0].replace('\\', "/"), ((v[0], v[1]), (v[2], v[3])));
    }
    Ok(out)
}

pub fn read_landmarks(path: &Path) -> Result<Landmarks, PreprocError> {
    let text = fs::read_to_string(path).map_err(|source| PreprocError::Io { path: path.to_path_buf(), source })?;
    parse_landmarks(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocStep {
    CropAlign,
    Normalize,
    MeanSubtract,
    Whiten,
}

impl PreprocStep {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::CropAlign => "crop_align",
            Self::Normalize => "normalize",
            Self::MeanSubtract => "mean_subtract",
            Self::Whiten => "whiten",
        }
    }

    fn needs_stats(self) -> bool {
        matches!(self, Self::MeanSubtract | Self::Whiten)
    }
}

impl fmt::Display for PreprocStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PreprocStep {
    type Err = PreprocError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "crop_align" => Ok(Self::CropAlign),
            "normalize" | "normalize_pixels" => Ok(Self::Normalize),
            "mean_subtract" => Ok(Self::MeanSubtract),
            "whiten" => Ok(Self::Whiten),
            other => Err(PreprocError::Chain(format!("unknown step '{other}'"))),
        }
    }
}

/// Ordered preprocessing steps. `crop_align`, if present, comes first;
/// at most one value step follows. Resizing to the model input happens
/// after the geometric step.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocChain {
    steps: Vec<PreprocStep>,
    pub stats: Option<DatasetStats>,
    pub landmarks: Option<Landmarks>,
    pub align_size: usize,
}

impl Default for PreprocChain {
    fn default() -> Self {
        Self { steps: vec![PreprocStep::Normalize], stats: None, landmarks: None, align_size: DEFAULT_ALIGN_SIZE }
    }
}

impl PreprocChain {
    pub fn new(steps: Vec<PreprocStep>) -> Result<Self, PreprocError> {
        if let Some(pos) = steps.iter().position(|&s| s == PreprocStep::CropAlign) {
            if pos != 0 || steps.iter().filter(|&&s| s == PreprocStep::CropAlign).count() > 1 {
                return Err(PreprocError::Chain("crop_align must be the first and only geometric step".into()));
            }
        }
        if steps.iter().filter(|s| **s != PreprocStep::CropAlign).count() > 1 {
            return Err(PreprocError::Chain("at most one of normalize, mean_subtract, whiten".into()));
        }
        Ok(Self { steps, ..Self::default() })
    }

    /// No steps: raw pixel values, only resized.
    pub fn identity() -> Self {
        Self { steps: Vec::new(), ..Self::default() }
    }

    pub fn steps(&self) -> &[PreprocStep] {
        &self.steps
    }

    pub fn needs_stats(&self) -> bool {
        self.steps.iter().any(|s| s.needs_stats())
    }

    pub fn needs_landmarks(&self) -> bool {
        self.steps.contains(&PreprocStep::CropAlign)
    }

    pub fn with_stats(mut self, stats: DatasetStats) -> Self {
        self.stats = Some(stats);
        self
    }

    pub fn with_landmarks(mut self, landmarks: Landmarks) -> Self {
        self.landmarks = Some(landmarks);
        self
    }

    /// Checks that statistics and landmarks required by the steps are present.
    pub fn check_ready(&self) -> Result<(), PreprocError> {
        if self.needs_stats() && self.stats.is_none() {
            return Err(PreprocError::Chain("mean_subtract/whiten need dataset statistics".into()));
        }
        if self.needs_landmarks() && self.landmarks.is_none() {
            return Err(PreprocError::Chain("crop_align needs a landmarks file".into()));
        }
        Ok(())
    }

    /// Runs the chain on one decoded frame. `key` is the frame's manifest
    /// path, used to look up landmarks.
    pub fn apply(&self, img: &PixelImage, key: &str, image_size: usize) -> Result<PixelImage, PreprocError> {
        self.check_ready()?;
        let mut cur: Option<PixelImage> = None;
        for (i, step) in self.steps.iter().enumerate() {
            let src = cur.as_ref().unwrap_or(img);
            let geometric_done = i > 0 || *step != PreprocStep::CropAlign;
            let src = if geometric_done && (src.width != image_size || src.height != image_size) {
                cur = Some(resize_bilinear(src, image_size, image_size));
                cur.as_ref().expect("just set")
            } else {
                src
            };
            let next = match step {
                PreprocStep::CropAlign => {
                    let key = key.replace('\\', "/");
                    let &(l, r) = self
                        .landmarks
                        .as_ref()
                        .and_then(|m| m.get(&key))
                        .ok_or(PreprocError::MissingLandmarks(key))?;
                    crop_align(src, &AlignSpec::new(l, r).with_out_size(self.align_size))?
                }
                PreprocStep::Normalize => normalize_pixels(src),
                PreprocStep::MeanSubtract => mean_subtract(src, self.stats.as_ref().expect("checked")),
                PreprocStep::Whiten => whiten(src, self.stats.as_ref().expect("checked"))?,
            };
            cur = Some(next);
        }
        let out = cur.unwrap_or_else(|| img.clone());
        Ok(if out.width != image_size || out.height != image_size {
            resize_bilinear(&out, image_size, image_size)
        } else {
            out
        })
    }
}

impl FromStr for PreprocChain {
    type Err = PreprocError;

    /// Comma separated step names; empty or `none` gives the identity chain.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self::identity());
        }
        Self::new(s.split(',').map(str::parse).collect::<Result<_, _>>()?)
    }
}

impl fmt::Display for PreprocChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.steps.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<&str> = self.steps.iter().map(|s| s.as_str()).collect();
        f.write_str(&names.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> PixelImage {
        PixelImage::from_fn(w, h, |x, y, ch| ((x * 7 + y * 13 + ch * 29) % 256) as f64)
    }

    #[test]
    fn normalize_endpoints() {
        let img = PixelImage::new(1, 1, vec![0.0, 128.0, 255.0]).unwrap();
        assert_eq!(normalize_pixels(&img).data(), &[-1.0, 0.0, 0.9921875]);
    }

    #[test]
    fn mean_subtract_and_whiten_examples() {
        let stats = DatasetStats { mean: vec![100.0], std: vec![64.0], count: 1 };
        let img = PixelImage::new(1, 1, vec![228.0, 100.0, 164.0]).unwrap();
        assert_eq!(mean_subtract(&img, &stats).data(), &[128.0, 0.0, 64.0]);
        let stats = DatasetStats { mean: vec![128.0], std: vec![64.0], count: 1 };
        let img = PixelImage::new(1, 1, vec![192.0, 128.0, 64.0]).unwrap();
        assert_eq!(whiten(&img, &stats).unwrap().data(), &[1.0, 0.0, -1.0]);
        let flat = DatasetStats { mean: vec![0.0], std: vec![0.0], count: 3 };
        assert!(matches!(whiten(&img, &flat), Err(PreprocError::ZeroStd(_))));
    }

    #[test]
    fn two_point_stats() {
        let img = PixelImage::from_fn(4, 2, |x, _, _| if x % 2 == 0 { 0.0 } else { 255.0 });
        let s = stats_of_images([&img], false).unwrap();
        assert!((s.mean[0] - 127.5).abs() < 1e-12);
        assert!((s.std[0] - 127.5).abs() < 1e-12);
        let zeros = PixelImage::zeros(3, 3);
        let s = stats_of_images([&zeros], true).unwrap();
        assert_eq!((s.mean, s.std), (vec![0.0; 3], vec![0.0; 3]));
    }

    #[test]
    fn stats_text_round_trip() {
        let s = DatasetStats { mean: vec![1.5, 2.25, 3.0], std: vec![0.1, 0.2, 0.3], count: 42 };
        assert_eq!(s.to_text().parse::<DatasetStats>().unwrap(), s);
        assert!("mean=1\nstd=2\n".parse::<DatasetStats>().is_err());
    }

    #[test]
    fn identity_alignment_preserves_image() {
        let n = 20;
        let img = gradient_image(n, n);
        let spec = AlignSpec::new((0.3 * n as f64, 0.4 * n as f64), (0.7 * n as f64, 0.4 * n as f64)).with_out_size(n);
        let out = crop_align(&img, &spec).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn vertical_eyes_rotate_a_quarter_turn() {
        let spec = AlignSpec::new((50.0, 20.0), (50.0, 60.0));
        let t = align_transform(&spec).unwrap();
        assert!((t.angle().abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let (l, r) = (t.apply(spec.left_eye), t.apply(spec.right_eye));
        assert!((l.1 - r.1).abs() < 1e-9);
    }

    #[test]
    fn alignment_rejects_bad_eyes() {
        let img = gradient_image(10, 10);
        assert!(matches!(crop_align(&img, &AlignSpec::new((2.0, 2.0), (2.0, 2.0))), Err(PreprocError::CoincidentEyes)));
        assert!(matches!(
            crop_align(&img, &AlignSpec::new((2.0, 2.0), (20.0, 2.0))),
            Err(PreprocError::EyeOutOfBounds(..))
        ));
    }

    #[test]
    fn similarity_inverse_round_trips() {
        let t = Similarity::from_pairs(((3.0, 4.0), (10.0, 1.0)), ((0.0, 0.0), (5.0, 5.0))).unwrap();
        let p = (7.5, -2.0);
        let q = t.inverse().apply(t.apply(p));
        assert!((p.0 - q.0).abs() < 1e-12 && (p.1 - q.1).abs() < 1e-12);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let img = PixelImage::from_fn(7, 5, |_, _, ch| 10.0 * ch as f64);
        let out = resize_bilinear(&img, 3, 11);
        assert_eq!((out.width(), out.height()), (3, 11));
        for (i, v) in out.data().iter().enumerate() {
            assert!((v - 10.0 * (i % 3) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn chain_rules() {
        assert!("normalize,whiten".parse::<PreprocChain>().is_err());
        assert!("normalize,crop_align".parse::<PreprocChain>().is_err());
        assert!("bogus".parse::<PreprocChain>().is_err());
        let c: PreprocChain = "crop_align,whiten".parse().unwrap();
        assert_eq!(c.to_string(), "crop_align,whiten");
        assert!(c.check_ready().is_err());
        assert_eq!("none".parse::<PreprocChain>().unwrap().steps(), &[]);
    }

    #[test]
    fn chain_applies_alignment_then_resize_then_values() {
        let img = gradient_image(40, 40);
        let mut lm = Landmarks::new();
        lm.insert("v/000001.png".into(), ((12.0, 16.0), (28.0, 16.0)));
        let chain: PreprocChain = "crop_align,normalize".parse().unwrap();
        let chain = chain.with_landmarks(lm);
        let out = chain.apply(&img, "v/000001.png", 16).unwrap();
        assert_eq!((out.width(), out.height()), (16, 16));
        assert!(out.data().iter().all(|v| (-1.0..1.0).contains(v)));
        assert!(matches!(chain.apply(&img, "other.png", 16), Err(PreprocError::MissingLandmarks(_))));
    }

    #[test]
    fn landmarks_parse() {
        let lm = parse_landmarks("a/1.png,1,2,3,4\n\n# c\nb\\2.png, 5, 6, 7, 8\n").unwrap();
        assert_eq!(lm["a/1.png"], ((1.0, 2.0), (3.0, 4.0)));
        assert_eq!(lm["b/2.png"], ((5.0, 6.0), (7.0, 8.0)));
        assert!(matches!(parse_landmarks("x,1,2\n"), Err(PreprocError::Parse { line: 1, .. })));
    }
}
