//! Binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! "AFLB1" | u64 meta_len | meta (UTF-8 `key = value` lines)
//! u64 count | count × (u64 name_len, name, u64 ndim, ndim × u64 dim, u64 offset, u8 width)
//! u64 payload_len | payload
//! ```
//!
//! Tensors are stored at their native width, so a save/load cycle is bit exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::scalar::Scalar;

use super::adam::{AdamState, Moments};
use super::model::Model;
use super::spec::{LayerSpec, ModelSpec};
use super::NnError;

const MAGIC: &[u8; 5] = b"AFLB1";

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Bytes per element on disk: 4 or 8.
    pub width: u8,
    /// Widened values; `f32 → f64 → f32` is lossless.
    pub values: Vec<f64>,
}

/// Raw contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<StoredTensor>,
}

fn corrupt(msg: impl Into<String>) -> NnError {
    NnError::CorruptCheckpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated while reading {what}")))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self, what: &str) -> Result<u64, NnError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize, NnError> {
        usize::try_from(self.u64(what)?).map_err(|_| corrupt(format!("{what} out of range")))
    }
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_all<'s>(&'s self, key: &'s str) -> impl Iterator<Item = &'s str> + 's {
        self.meta.iter().filter(move |(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn push_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NnError> {
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.contains(['\n', '=']) || v.contains('\n') || k.trim() != k {
                return Err(corrupt(format!("metadata entry '{k}' cannot be encoded")));
            }
            meta.push_str(&format!("{k} = {v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        let mut payload = Vec::new();
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.values.len() {
                return Err(corrupt(format!("tensor '{}' shape does not match its data", t.name)));
            }
            out.extend_from_slice(&(t.name.len() as u64).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u64).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.push(t.width);
            match t.width {
                4 => t.values.iter().for_each(|&v| payload.extend_from_slice(&(v as f32).to_le_bytes())),
                8 => t.values.iter().for_each(|&v| payload.extend_from_slice(&v.to_le_bytes())),
                w => return Err(corrupt(format!("unsupported element width {w}"))),
            }
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let meta_len = r.usize("metadata length")?;
        let meta_text = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|_| corrupt("metadata is not UTF-8"))?;
        let mut meta = Vec::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| corrupt(format!("bad metadata line '{line}'")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let count = r.usize("tensor count")?;
        let mut headers = Vec::new();
        for _ in 0..count {
            let name_len = r.usize("name length")?;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let ndim = r.usize("rank")?;
            if ndim > 8 {
                return Err(corrupt(format!("tensor '{name}' has rank {ndim}")));
            }
            let shape = (0..ndim).map(|_| r.usize("dimension")).collect::<Result<Vec<_>, _>>()?;
            let offset = r.usize("offset")?;
            let width = r.take(1, "width")?[0];
            if width != 4 && width != 8 {
                return Err(corrupt(format!("tensor '{name}' has width {width}")));
            }
            headers.push((name, shape, offset, width));
        }
        let payload_len = r.usize("payload length")?;
        let payload = r.take(payload_len, "payload")?;
        if r.pos != buf.len() {
            return Err(corrupt("trailing bytes after payload"));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape, offset, width) in headers {
            let elems = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt(format!("tensor '{name}' is too large")))?;
            let bytes = elems
                .checked_mul(width as usize)
                .and_then(|n| offset.checked_add(n).map(|end| (n, end)))
                .filter(|&(_, end)| end <= payload.len())
                .ok_or_else(|| corrupt(format!("tensor '{name}' runs past the payload")))?;
            let raw = &payload[offset..bytes.1];
            let values = match width {
                4 => raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
                _ => raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
            };
            tensors.push(StoredTensor { name, shape, width, values });
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<(), NnError> {
        let bytes = self.to_bytes()?;
        let io = |source| NnError::Io { path: path.to_path_buf(), source };
        let tmp = path.with_extension("aflb.tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self, NnError> {
        let bytes = fs::read(path).map_err(|source| NnError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the architecture recorded under `model.*`.
    pub fn model_spec(&self) -> Result<ModelSpec, NnError> {
        let name = self.get("model.name").ok_or_else(|| corrupt("missing model.name"))?;
        let input_size = self
            .get("model.input_size")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt("missing or bad model.input_size"))?;
        let layers = self
            .get_all("model.layer")
            .map(LayerSpec::decode)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| corrupt(e.to_string()))?;
        let spec = ModelSpec { name: name.to_string(), input_size, layers };
        spec.validate().map_err(|e| corrupt(e.to_string()))?;
        Ok(spec)
    }
}

fn parse_meta<V: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<V, NnError> {
    ckpt.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt(format!("missing or bad {key}")))
}

/// Serializes a model, optional optimizer state and free-form metadata.
pub fn checkpoint_of<T: Scalar>(
    model: &Model<T>,
    adam: Option<&AdamState>,
    extra: &[(String, String)],
) -> Checkpoint {
    let mut ck = Checkpoint::default();
    for line in model.spec.encode().lines() {
        let (k, v) = line.split_once(" = ").expect("spec lines are key = value");
        ck.push_meta(k, v);
    }
    ck.push_meta("scalar", T::NAME);
    for p in model.params() {
        ck.tensors.push(StoredTensor {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            width: T::WIDTH as u8,
            values: p.value.data().iter().map(|v| v.as_f64()).collect(),
        });
        if !p.trainable() {
            ck.push_meta("frozen", &p.name);
        }
    }
    if let Some(s) = adam {
        ck.push_meta("optimizer", "adam");
        ck.push_meta("adam.step", s.step);
        ck.push_meta("adam.lr", s.lr);
        ck.push_meta("adam.beta1", s.beta1);
        ck.push_meta("adam.beta2", s.beta2);
        ck.push_meta("adam.eps", s.eps);
        for m in &s.moments {
            for (kind, values) in [("m", &m.m), ("v", &m.v)] {
                ck.tensors.push(StoredTensor {
                    name: format!("adam.{kind}.{}", m.name),
                    shape: vec![values.len()],
                    width: 8,
                    values: values.clone(),
                });
            }
        }
    }
    ck.meta.extend(extra.iter().cloned());
    ck
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    adam: Option<&AdamState>,
    extra: &[(String, String)],
) -> Result<(), NnError> {
    checkpoint_of(model, adam, extra).write(path)
}

#[derive(Debug)]
pub struct LoadedCheckpoint<T> {
    pub model: Model<T>,
    pub adam: Option<AdamState>,
    pub raw: Checkpoint,
}

/// Restores a model (and optimizer, when present) from a parsed checkpoint.
pub fn restore<T: Scalar>(ck: Checkpoint) -> Result<LoadedCheckpoint<T>, NnError> {
    let spec = ck.model_spec()?;
    let mut model = Model::<T>::new(spec, 0)?;
    let frozen: Vec<String> = ck.get_all("frozen").map(str::to_string).collect();
    for p in model.params_mut() {
        let stored = ck
            .tensor(&p.name)
            .ok_or_else(|| corrupt(format!("missing tensor '{}'", p.name)))?;
        if stored.shape != p.value.shape() {
            return Err(corrupt(format!(
                "tensor '{}' has shape {:?}, model expects {:?}",
                p.name,
                stored.shape,
                p.value.shape()
            )));
        }
        for (d, &v) in p.value.data_mut().iter_mut().zip(&stored.values) {
            *d = T::from_f64_lossy(v);
        }
        if frozen.contains(&p.name) {
            p.value.set_requires_grad(false);
        }
    }
    let adam = match ck.get("optimizer") {
        Some("adam") => {
            let mut s = AdamState::new(parse_meta(&ck, "adam.lr")?);
            s.step = parse_meta(&ck, "adam.step")?;
            s.beta1 = parse_meta(&ck, "adam.beta1")?;
            s.beta2 = parse_meta(&ck, "adam.beta2")?;
            s.eps = parse_meta(&ck, "adam.eps")?;
            if s.step > 0 {
                for p in model.params() {
                    let get = |kind: &str| {
                        ck.tensor(&format!("adam.{kind}.{}", p.name))
                            .filter(|t| t.values.len() == p.value.len())
                            .map(|t| t.values.clone())
                            .ok_or_else(|| corrupt(format!("missing optimizer state for '{}'", p.name)))
                    };
                    s.moments.push(Moments { name: p.name.clone(), m: get("m")?, v: get("v")? });
                }
            }
            Some(s)
        }
        Some(other) => return Err(corrupt(format!("unknown optimizer '{other}'"))),
        None => None,
    };
    Ok(LoadedCheckpoint { model, adam, raw: ck })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<LoadedCheckpoint<T>, NnError> {
    restore(Checkpoint::read(path)?)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WarmStartReport {
    /// Parameters copied from the checkpoint.
    pub copied: Vec<String>,
    /// Matching names whose shapes differ; left at their initial values.
    pub shape_mismatch: Vec<String>,
    /// Parameters frozen after copying.
    pub frozen: usize,
}

/// Copies every parameter whose name starts with one of `prefixes` (all of
/// them when `prefixes` is empty) from `ckpt` into `model`.
pub fn warm_start<T: Scalar>(
    model: &mut Model<T>,
    ckpt: &Checkpoint,
    prefixes: &[String],
    freeze: bool,
) -> WarmStartReport {
    let mut report = WarmStartReport::default();
    let selected = |name: &str| prefixes.is_empty() || prefixes.iter().any(|p| name.starts_with(p.as_str()));
    for p in model.params_mut() {
        if !selected(&p.name) {
            continue;
        }
        let Some(stored) = ckpt.tensor(&p.name) else { continue };
        if stored.shape != p.value.shape() {
            report.shape_mismatch.push(p.name.clone());
            continue;
        }
        for (d, &v) in p.value.data_mut().iter_mut().zip(&stored.values) {
            *d = T::from_f64_lossy(v);
        }
        report.copied.push(p.name.clone());
        if freeze {
            p.value.set_requires_grad(false);
            report.frozen += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push_meta("epoch", 3);
        ck.push_meta("note", "a = b");
        ck.tensors.push(StoredTensor { name: "a".into(), shape: vec![2, 2], width: 4, values: vec![0.5, -1.0, 2.0, 0.25] });
        ck.tensors.push(StoredTensor { name: "b".into(), shape: vec![3], width: 8, values: vec![0.1, 1e-300, -7.0] });
        ck
    }

    #[test]
    fn byte_round_trip() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.get("note"), Some("a = b"));
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(NnError::CorruptCheckpoint(_))));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let spec = ModelSpec::preset("vgg-mini-gru").unwrap();
        let model = Model::<f32>::new(spec, 5).unwrap();
        let ck = checkpoint_of(&model, None, &[]);
        let back = restore::<f32>(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.model.spec, model.spec);
        for (a, b) in model.params().iter().zip(back.model.params()) {
            assert_eq!(a.name, b.name);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.value.data()), bits(b.value.data()));
        }
        assert!(back.adam.is_none());
    }

    #[test]
    fn warm_start_copies_prefix_and_reports_mismatch() {
        let src = Model::<f64>::new(ModelSpec::preset("vgg-mini").unwrap(), 1).unwrap();
        let ck = checkpoint_of(&src, None, &[]);
        let mut dst = Model::<f64>::new(ModelSpec::preset("vgg-mini-gru").unwrap(), 2).unwrap();
        let report = warm_start(&mut dst, &ck, &["conv".to_string()], true);
        assert!(!report.copied.is_empty());
        assert_eq!(report.frozen, report.copied.len());
        let w = |m: &Model<f64>| m.params().iter().find(|p| p.name == "conv1.weight").unwrap().value.data().to_vec();
        assert_eq!(w(&dst), w(&src));
        let all = warm_start(&mut dst, &ck, &[], false);
        assert!(all.shape_mismatch.contains(&"head.weight".to_string()) || all.copied.contains(&"head.weight".to_string()));
    }
}
