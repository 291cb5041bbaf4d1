//! Annotation traces: parsing, per-frame resampling, merging annotators and
//! writing the training manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

/// Frame rate all videos were converted to.
pub const DEFAULT_FPS: f64 = 25.0;

/// Tolerance used when comparing a frame timestamp against sample times.
const TIME_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: value {value} outside [-1, 1]")]
    Range { line: usize, value: f64 },
    #[error("line {line}: time {time} does not increase (previous {previous})")]
    Monotonicity { line: usize, time: f64, previous: f64 },
    #[error("missing header field '{0}'")]
    MissingHeader(&'static str),
    #[error("trace has no samples")]
    NoSamples,
    #[error("nothing to merge")]
    NothingToMerge,
    #[error("cannot merge series: {0}")]
    MergeMismatch(String),
    #[error("video '{video}': {msg}")]
    Video { video: String, msg: String },
    #[error("video '{video}': {series} series values for {frames} frame files")]
    LengthMismatch { video: String, series: usize, frames: usize },
    #[error("video '{video}': missing frame file number {index}")]
    MissingFrame { video: String, index: usize },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnnotationError + '_ {
    move |source| AnnotationError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dimension {
    Valence,
    Arousal,
}

impl Dimension {
    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Valence => "valence",
            Dimension::Arousal => "arousal",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dimension {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "valence" => Ok(Dimension::Valence),
            "arousal" => Ok(Dimension::Arousal),
            other => Err(format!("unknown dimension '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub time: f64,
    pub value: f64,
}

/// One annotator's value stream for one video and one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationTrace {
    pub video_id: String,
    pub annotator_id: String,
    pub dimension: Dimension,
    pub samples: Vec<Sample>,
}

impl AnnotationTrace {
    /// Checks sample ordering and value range.
    pub fn validate(&self) -> Result<(), AnnotationError> {
        if self.samples.is_empty() {
            return Err(AnnotationError::NoSamples);
        }
        let mut previous: Option<f64> = None;
        for (i, s) in self.samples.iter().enumerate() {
            if !s.time.is_finite() || s.time < 0.0 {
                return Err(AnnotationError::Parse { line: i + 1, msg: format!("bad time {}", s.time) });
            }
            if !(-1.0..=1.0).contains(&s.value) {
                return Err(AnnotationError::Range { line: i + 1, value: s.value });
            }
            if let Some(p) = previous {
                if s.time <= p {
                    return Err(AnnotationError::Monotonicity { line: i + 1, time: s.time, previous: p });
                }
            }
            previous = Some(s.time);
        }
        Ok(())
    }

    /// Canonical text form; `parse_trace` reads it back unchanged.
    pub fn serialize(&self) -> String {
        let mut out = format!(
            "# video={}\n# annotator={}\n# dimension={}\n",
            self.video_id, self.annotator_id, self.dimension
        );
        for s in &self.samples {
            out.push_str(&format_decimal(s.time, 2));
            out.push(',');
            out.push_str(&format_decimal(s.value, 4));
            out.push('\n');
        }
        out
    }
}

/// Fixed six-decimal rendering with trailing zeros trimmed down to `min_decimals`.
fn format_decimal(v: f64, min_decimals: usize) -> String {
    let mut s = format!("{v:.6}");
    if s.starts_with('-') && s[1..].bytes().all(|b| b == b'0' || b == b'.') {
        s.remove(0);
    }
    let dot = s.find('.').expect("fixed-point format has a dot");
    while s.len() > dot + 1 + min_decimals && s.ends_with('0') {
        s.pop();
    }
    s
}

/// Parses a trace document. Line numbers in errors are 1-based physical lines.
pub fn parse_trace(text: &str) -> Result<AnnotationTrace, AnnotationError> {
    let mut video = None;
    let mut annotator = None;
    let mut dimension = None;
    let mut samples: Vec<Sample> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let Some((key, value)) = rest.trim().split_once('=') else {
                continue;
            };
            let value = value.trim().to_string();
            match key.trim() {
                "video" => video = Some(value),
                "annotator" => annotator = Some(value),
                "dimension" => {
                    dimension = Some(value.parse::<Dimension>().map_err(|msg| {
                        AnnotationError::Parse { line: line_no, msg }
                    })?)
                }
                _ => {}
            }
            continue;
        }
        let parse_err = |msg: String| AnnotationError::Parse { line: line_no, msg };
        let (t, v) = line
            .split_once(',')
            .ok_or_else(|| parse_err(format!("expected '<time>,<value>', got '{line}'")))?;
        let time: f64 = t
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad time '{}'", t.trim())))?;
        let value: f64 = v
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad value '{}'", v.trim())))?;
        if !time.is_finite() || time < 0.0 {
            return Err(parse_err(format!("time must be finite and >= 0, got {time}")));
        }
        if !value.is_finite() || !(-1.0..=1.0).contains(&value) {
            return Err(AnnotationError::Range { line: line_no, value });
        }
        if let Some(prev) = samples.last() {
            if time <= prev.time {
                return Err(AnnotationError::Monotonicity { line: line_no, time, previous: prev.time });
            }
        }
        samples.push(Sample { time, value });
    }

    if samples.is_empty() {
        return Err(AnnotationError::NoSamples);
    }
    Ok(AnnotationTrace {
        video_id: video.ok_or(AnnotationError::MissingHeader("video"))?,
        annotator_id: annotator.ok_or(AnnotationError::MissingHeader("annotator"))?,
        dimension: dimension.ok_or(AnnotationError::MissingHeader("dimension"))?,
        samples,
    })
}

/// Per-frame values of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSeries {
    pub video_id: String,
    pub fps: f64,
    pub values: Vec<f64>,
}

impl FrameSeries {
    /// `# video=`, `# fps=` header then `<frame_index>,<value>` lines.
    pub fn serialize(&self) -> String {
        let mut out = format!("# video={}\n# fps={}\n", self.video_id, self.fps);
        for (i, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{i},{v:.6}\n"));
        }
        out
    }
}

/// Reads the text written by [`FrameSeries::serialize`]. Frame indices must
/// run 0, 1, 2, ... without gaps.
pub fn parse_frame_series(text: &str) -> Result<FrameSeries, AnnotationError> {
    let (mut video, mut fps) = (None, None);
    let mut values = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let err = |msg: String| AnnotationError::Parse { line: idx + 1, msg };
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            match rest.trim().split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
                Some(("video", v)) => video = Some(v.to_string()),
                Some(("fps", v)) => {
                    let f: f64 = v.parse().map_err(|_| err(format!("bad fps '{v}'")))?;
                    if !(f > 0.0 && f.is_finite()) {
                        return Err(err(format!("fps must be positive, got {f}")));
                    }
                    fps = Some(f);
                }
                _ => {}
            }
            continue;
        }
        let (i, v) = line.split_once(',').ok_or_else(|| err(format!("expected '<frame>,<value>', got '{line}'")))?;
        let i: usize = i.trim().parse().map_err(|_| err(format!("bad frame index '{}'", i.trim())))?;
        if i != values.len() {
            return Err(err(format!("frame index {i}, expected {}", values.len())));
        }
        let value: f64 = v.trim().parse().map_err(|_| err(format!("bad value '{}'", v.trim())))?;
        if !(-1.0..=1.0).contains(&value) {
            return Err(AnnotationError::Range { line: idx + 1, value });
        }
        values.push(value);
    }
    if values.is_empty() {
        return Err(AnnotationError::NoSamples);
    }
    Ok(FrameSeries {
        video_id: video.ok_or(AnnotationError::MissingHeader("video"))?,
        fps: fps.ok_or(AnnotationError::MissingHeader("fps"))?,
        values,
    })
}

/// Zero-order hold: frame `k` takes the value of the latest sample at or
/// before `k / fps`; frames before the first sample take the first value.
pub fn resample_to_frames(trace: &AnnotationTrace, fps: f64, frame_count: usize) -> FrameSeries {
    assert!(fps > 0.0, "fps must be positive");
    let samples = &trace.samples;
    let mut values = Vec::with_capacity(frame_count);
    let mut cursor = 0usize;
    for k in 0..frame_count {
        let t = k as f64 / fps;
        while cursor + 1 < samples.len() && samples[cursor + 1].time <= t + TIME_TOL {
            cursor += 1;
        }
        values.push(samples.get(cursor).map_or(0.0, |s| s.value));
    }
    FrameSeries { video_id: trace.video_id.clone(), fps, values }
}

/// Per-frame mean over annotators, clamped to [-1, 1].
pub fn merge_annotators(series: &[FrameSeries]) -> Result<FrameSeries, AnnotationError> {
    let first = series.first().ok_or(AnnotationError::NothingToMerge)?;
    for s in &series[1..] {
        if s.video_id != first.video_id {
            return Err(AnnotationError::MergeMismatch(format!(
                "video '{}' vs '{}'",
                first.video_id, s.video_id
            )));
        }
        if s.fps != first.fps {
            return Err(AnnotationError::MergeMismatch(format!("fps {} vs {}", first.fps, s.fps)));
        }
        if s.values.len() != first.values.len() {
            return Err(AnnotationError::MergeMismatch(format!(
                "length {} vs {}",
                first.values.len(),
                s.values.len()
            )));
        }
    }
    let k = series.len() as f64;
    let values = (0..first.values.len())
        .map(|i| {
            let sum: f64 = series.iter().map(|s| s.values[i]).sum();
            (sum / k).clamp(-1.0, 1.0)
        })
        .collect();
    Ok(FrameSeries { video_id: first.video_id.clone(), fps: first.fps, values })
}

/// One manifest line: a frame and its merged labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub video_id: String,
    /// Relative to the frames root.
    pub frame_path: PathBuf,
    pub valence: f64,
    pub arousal: f64,
}

/// Frame files of one video directory, sorted by numeric file stem. The
/// numbering must run 1..=N without gaps.
pub fn list_frames(frames_root: &Path, video_id: &str) -> Result<Vec<PathBuf>, AnnotationError> {
    let dir = frames_root.join(video_id);
    let mut numbered = Vec::new();
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let entry = entry.map_err(io_err(&dir))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Ok(index) = stem.parse::<usize>() {
            numbered.push((index, PathBuf::from(video_id).join(entry.file_name())));
        }
    }
    if numbered.is_empty() {
        return Err(AnnotationError::Video { video: video_id.to_string(), msg: "no frame files".into() });
    }
    numbered.sort_by_key(|(i, _)| *i);
    for (expected, (index, _)) in (1..).zip(&numbered) {
        if *index != expected {
            return Err(AnnotationError::MissingFrame { video: video_id.to_string(), index: expected });
        }
    }
    Ok(numbered.into_iter().map(|(_, p)| p).collect())
}

/// One record per frame, videos in key order, frames in numeric order.
pub fn build_manifest(
    frames_root: &Path,
    valence: &BTreeMap<String, FrameSeries>,
    arousal: &BTreeMap<String, FrameSeries>,
) -> Result<Vec<ManifestRecord>, AnnotationError> {
    let mut records = Vec::new();
    for (video, v_series) in valence {
        let a_series = arousal.get(video).ok_or_else(|| AnnotationError::Video {
            video: video.clone(),
            msg: "no arousal series".into(),
        })?;
        let frames = list_frames(frames_root, video)?;
        for series in [v_series, a_series] {
            if series.values.len() != frames.len() {
                return Err(AnnotationError::LengthMismatch {
                    video: video.clone(),
                    series: series.values.len(),
                    frames: frames.len(),
                });
            }
        }
        for (i, frame_path) in frames.into_iter().enumerate() {
            records.push(ManifestRecord {
                video_id: video.clone(),
                frame_path,
                valence: v_series.values[i].clamp(-1.0, 1.0),
                arousal: a_series.values[i].clamp(-1.0, 1.0),
            });
        }
    }
    if let Some(video) = arousal.keys().find(|k| !valence.contains_key(*k)) {
        return Err(AnnotationError::Video { video: video.clone(), msg: "no valence series".into() });
    }
    Ok(records)
}

/// `frame_path,valence,arousal` lines with six-decimal values.
pub fn write_manifest(records: &[ManifestRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{},{:.6},{:.6}\n",
            r.frame_path.to_string_lossy().replace('\\', "/"),
            r.valence,
            r.arousal
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_series_round_trip() {
        let s = FrameSeries { video_id: "v9".into(), fps: 25.0, values: vec![0.25, -0.5, 1.0] };
        assert_eq!(parse_frame_series(&s.serialize()).unwrap(), s);
        assert!(parse_frame_series("# video=v\n# fps=25\n0,0.1\n2,0.2\n").is_err());
        assert!(matches!(parse_frame_series("# video=v\n0,0.1\n"), Err(AnnotationError::MissingHeader("fps"))));
    }

    const HEADER: &str = "# video=v1\n# annotator=a1\n# dimension=valence\n";

    fn trace(samples: &[(f64, f64)]) -> AnnotationTrace {
        AnnotationTrace {
            video_id: "v1".into(),
            annotator_id: "a1".into(),
            dimension: Dimension::Valence,
            samples: samples.iter().map(|&(time, value)| Sample { time, value }).collect(),
        }
    }

    #[test]
    fn parses_minimal_trace() {
        let t = parse_trace(&format!("{HEADER}0.00,0.0\n0.50,0.4\n")).unwrap();
        assert_eq!(t.samples.len(), 2);
        assert_eq!(t.dimension, Dimension::Valence);
        assert_eq!(t.samples[1], Sample { time: 0.5, value: 0.4 });
    }

    #[test]
    fn out_of_range_value_reports_line() {
        let err = parse_trace(&format!("{HEADER}0.00,0.0\n0.50,1.5\n")).unwrap_err();
        // second sample line; three header lines precede it
        assert!(matches!(err, AnnotationError::Range { line: 5, value } if value == 1.5));
        let err = parse_trace("0.00,0.0\n0.50,1.5\n").unwrap_err();
        assert!(matches!(err, AnnotationError::Range { line: 2, .. }));
    }

    #[test]
    fn equal_timestamps_rejected() {
        let err = parse_trace(&format!("{HEADER}0.50,0.0\n0.50,0.1\n")).unwrap_err();
        assert!(matches!(err, AnnotationError::Monotonicity { line: 5, .. }));
    }

    #[test]
    fn malformed_and_missing_header() {
        assert!(matches!(
            parse_trace(&format!("{HEADER}0.00;0.1\n")),
            Err(AnnotationError::Parse { line: 4, .. })
        ));
        assert!(matches!(
            parse_trace("# video=v\n# dimension=arousal\n0.00,0.1\n"),
            Err(AnnotationError::MissingHeader("annotator"))
        ));
        assert!(matches!(parse_trace(HEADER), Err(AnnotationError::NoSamples)));
    }

    #[test]
    fn canonical_serialization() {
        let t = trace(&[(0.0, 0.0), (0.04, -0.25), (0.125, 0.123456)]);
        let text = t.serialize();
        assert_eq!(
            text,
            format!("{HEADER}0.00,0.0000\n0.04,-0.2500\n0.125,0.123456\n")
        );
        assert_eq!(parse_trace(&text).unwrap(), t);
    }

    #[test]
    fn resample_examples() {
        assert_eq!(resample_to_frames(&trace(&[(0.0, 0.2)]), 25.0, 3).values, vec![0.2; 3]);
        assert_eq!(
            resample_to_frames(&trace(&[(0.0, 0.0), (0.08, 1.0)]), 25.0, 4).values,
            vec![0.0, 0.0, 1.0, 1.0]
        );
        assert_eq!(resample_to_frames(&trace(&[(0.1, 0.5)]), 25.0, 2).values, vec![0.5, 0.5]);
    }

    #[test]
    fn merge_examples() {
        let s = |v: Vec<f64>| FrameSeries { video_id: "v".into(), fps: 25.0, values: v };
        let a = s(vec![0.2, 0.2]);
        assert_eq!(merge_annotators(std::slice::from_ref(&a)).unwrap(), a);
        let merged = merge_annotators(&[a.clone(), s(vec![0.4, 0.6])]).unwrap();
        assert!((merged.values[0] - 0.3).abs() < 1e-15);
        assert!((merged.values[1] - 0.4).abs() < 1e-15);
        assert_eq!(merge_annotators(&vec![a.clone(); 4]).unwrap(), a);
        assert!(matches!(
            merge_annotators(&[a.clone(), s(vec![0.1])]),
            Err(AnnotationError::MergeMismatch(_))
        ));
        let mut other = a.clone();
        other.video_id = "w".into();
        assert!(merge_annotators(&[a, other]).is_err());
        assert!(matches!(merge_annotators(&[]), Err(AnnotationError::NothingToMerge)));
    }

    fn make_frames(root: &Path, video: &str, n: usize) {
        let dir = root.join(video);
        fs::create_dir_all(&dir).unwrap();
        for i in 1..=n {
            fs::write(dir.join(format!("{i:06}.png")), b"x").unwrap();
        }
    }

    fn series_map(entries: &[(&str, usize)]) -> BTreeMap<String, FrameSeries> {
        entries
            .iter()
            .map(|&(v, n)| {
                let values = (0..n).map(|i| i as f64 / 10.0).collect();
                (v.to_string(), FrameSeries { video_id: v.into(), fps: 25.0, values })
            })
            .collect()
    }

    #[test]
    fn manifest_for_two_videos() {
        let dir = tempfile::tempdir().unwrap();
        make_frames(dir.path(), "va", 3);
        make_frames(dir.path(), "vb", 3);
        let m = series_map(&[("va", 3), ("vb", 3)]);
        let records = build_manifest(dir.path(), &m, &m).unwrap();
        assert_eq!(records.len(), 6);
        assert!(records[..3].iter().all(|r| r.video_id == "va"));
        assert!(records[3..].iter().all(|r| r.video_id == "vb"));
        assert_eq!(records[1].frame_path, PathBuf::from("va").join("000002.png"));
        let text = write_manifest(&records);
        assert_eq!(text.lines().next(), Some("va/000001.png,0.000000,0.000000"));
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        make_frames(dir.path(), "va", 3);
        let m = series_map(&[("va", 4)]);
        assert!(matches!(
            build_manifest(dir.path(), &m, &m),
            Err(AnnotationError::LengthMismatch { series: 4, frames: 3, .. })
        ));
        fs::create_dir_all(dir.path().join("empty")).unwrap();
        let m = series_map(&[("empty", 1)]);
        let err = build_manifest(dir.path(), &m, &m).unwrap_err();
        assert!(err.to_string().contains("empty"));

        make_frames(dir.path(), "gap", 3);
        fs::remove_file(dir.path().join("gap").join("000002.png")).unwrap();
        let m = series_map(&[("gap", 2)]);
        assert!(matches!(
            build_manifest(dir.path(), &m, &m),
            Err(AnnotationError::MissingFrame { index: 2, .. })
        ));
    }

    #[test]
    fn numeric_frame_order() {
        let dir = tempfile::tempdir().unwrap();
        let v = dir.path().join("v");
        fs::create_dir_all(&v).unwrap();
        for name in ["10.png", "9.png", "1.png", "2.png", "3.png", "4.png", "5.png", "6.png", "7.png", "8.png"] {
            fs::write(v.join(name), b"x").unwrap();
        }
        let frames = list_frames(dir.path(), "v").unwrap();
        assert_eq!(frames[8], PathBuf::from("v/9.png"));
        assert_eq!(frames[9], PathBuf::from("v/10.png"));
    }
}
