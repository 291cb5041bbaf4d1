//! Synthetic learnable datasets: each frame's red channel encodes valence
//! and its green channel encodes arousal, both drifting smoothly over time.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotation::{write_manifest, ManifestRecord};
use crate::dataio::DataError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub videos: usize,
    pub frames: usize,
    pub image_size: usize,
    /// Half-width of the uniform per-pixel noise, in 8-bit units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { videos: 40, frames: 160, image_size: 16, noise: 16.0, seed: 7 }
    }
}

/// Labels of one synthetic video: independent slow sinusoids per dimension.
pub fn synth_labels(rng: &mut ChaCha8Rng, frames: usize) -> Vec<[f64; 2]> {
    let mut wave = || {
        let amp = rng.random_range(0.4..0.9);
        let period = rng.random_range(60.0..200.0);
        let phase = rng.random_range(0.0..TAU);
        let offset = rng.random_range(-0.1..0.1);
        move |t: usize| (offset + amp * (TAU * t as f64 / period + phase).sin()).clamp(-1.0, 1.0)
    };
    let (v, a) = (wave(), wave());
    (0..frames).map(|t| [v(t), a(t)]).collect()
}

/// The frame for labels `(valence, arousal)`.
pub fn synth_frame(rng: &mut ChaCha8Rng, size: usize, label: [f64; 2], noise: f64) -> image::RgbImage {
    let mut img = image::RgbImage::new(size as u32, size as u32);
    for px in img.pixels_mut() {
        let mut jitter = || if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
        let r = 128.0 + 96.0 * label[0] + jitter();
        let g = 128.0 + 96.0 * label[1] + jitter();
        let b = 128.0 + jitter() * 4.0;
        *px = image::Rgb([r, g, b].map(|c| c.round().clamp(0.0, 255.0) as u8));
    }
    img
}

/// Writes `<root>/vidNNN/NNNNNN.png` frames and `<root>/manifest.csv`;
/// returns the manifest path. The manifest's paths are relative to `root`.
pub fn write_synthetic_dataset(root: &Path, spec: &SynthSpec) -> Result<PathBuf, DataError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.videos * spec.frames);
    for v in 0..spec.videos {
        let video = format!("vid{v:03}");
        let dir = root.join(&video);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        for (t, label) in synth_labels(&mut rng, spec.frames).into_iter().enumerate() {
            let rel = PathBuf::from(&video).join(format!("{:06}.png", t + 1));
            let img = synth_frame(&mut rng, spec.image_size, label, spec.noise);
            let path = root.join(&rel);
            img.save(&path).map_err(|e| DataError::Io {
                path: path.clone(),
                source: std::io::Error::other(e.to_string()),
            })?;
            records.push(ManifestRecord {
                video_id: video.clone(),
                frame_path: rel,
                valence: (label[0] * 1e6).round() / 1e6,
                arousal: (label[1] * 1e6).round() / 1e6,
            });
        }
    }
    let manifest = root.join("manifest.csv");
    fs::write(&manifest, write_manifest(&records)).map_err(io(&manifest))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_smooth_and_in_range() {
        let labels = synth_labels(&mut ChaCha8Rng::seed_from_u64(1), 200);
        for w in labels.windows(2) {
            for d in 0..2 {
                assert!(w[0][d].abs() <= 1.0);
                assert!((w[0][d] - w[1][d]).abs() < 0.1);
            }
        }
    }

    #[test]
    fn frame_channels_encode_labels() {
        let img = synth_frame(&mut ChaCha8Rng::seed_from_u64(2), 4, [0.5, -0.25], 0.0);
        assert_eq!(img.get_pixel(1, 2).0, [176, 104, 128]);
    }
}
