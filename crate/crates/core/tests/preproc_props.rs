mod common;

use affectlab::preproc::{
    align_transform, compute_stats, crop_align, normalize_pixels, stats_of_images, whiten, AlignSpec, PixelImage,
    PreprocChain, PreprocError,
};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn random_image(r: &mut rand_chacha::ChaCha8Rng, w: usize, h: usize) -> PixelImage {
    let base: [f64; 3] = [r.random_range(40.0..200.0), r.random_range(40.0..200.0), r.random_range(40.0..200.0)];
    PixelImage::from_fn(w, h, |_, _, ch| (base[ch] + r.random_range(-40.0..40.0)).round())
}

/// Two-pass population moments over every value of `images`, for channel
/// `ch` or all channels when `None`.
fn two_pass(images: &[PixelImage], ch: Option<usize>) -> (f64, f64) {
    let vals: Vec<f64> = images
        .iter()
        .flat_map(|img| img.data().chunks_exact(3).flat_map(move |px| (0..3).filter(move |&c| ch.is_none_or(|k| k == c)).map(move |c| px[c])))
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    (mean, (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[test]
fn normalize_examples() {
    let img = PixelImage::new(3, 1, vec![0.0, 0.0, 0.0, 128.0, 128.0, 128.0, 255.0, 255.0, 255.0]).unwrap();
    let out = normalize_pixels(&img);
    assert_eq!(out.data(), &[-1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.9921875, 0.9921875, 0.9921875]);
}

#[test]
fn streaming_stats_match_two_pass() {
    let mut r = rng(21);
    let images: Vec<PixelImage> = (0..9).map(|i| random_image(&mut r, 5 + i, 7)).collect();
    let global = stats_of_images(&images, false).unwrap();
    let (m, s) = two_pass(&images, None);
    assert!(rel_close(global.mean[0], m, 1e-9) && rel_close(global.std[0], s, 1e-9));
    let per = stats_of_images(&images, true).unwrap();
    for ch in 0..3 {
        let (m, s) = two_pass(&images, Some(ch));
        assert!(rel_close(per.mean[ch], m, 1e-9) && rel_close(per.std[ch], s, 1e-9));
    }
}

#[test]
fn stats_from_files_match_in_memory() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(5);
    let images: Vec<PixelImage> = (0..4).map(|_| random_image(&mut r, 6, 6)).collect();
    let paths: Vec<_> = images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let p = dir.path().join(format!("{i}.png"));
            img.to_rgb8().save(&p).unwrap();
            p
        })
        .collect();
    let from_disk = compute_stats(&paths, true).unwrap();
    let in_memory = stats_of_images(&images, true).unwrap();
    for ch in 0..3 {
        assert!(rel_close(from_disk.mean[ch], in_memory.mean[ch], 1e-12));
        assert!(rel_close(from_disk.std[ch], in_memory.std[ch], 1e-12));
    }
}

#[test]
fn whitened_training_set_is_standardized() {
    let mut r = rng(8);
    let images: Vec<PixelImage> = (0..12).map(|_| random_image(&mut r, 10, 10)).collect();
    for channelwise in [false, true] {
        let stats = stats_of_images(&images, channelwise).unwrap();
        let white: Vec<PixelImage> = images.iter().map(|i| whiten(i, &stats).unwrap()).collect();
        let after = stats_of_images(&white, channelwise).unwrap();
        for (m, s) in after.mean.iter().zip(&after.std) {
            assert!(m.abs() < 1e-3 && (s - 1.0).abs() < 1e-3, "mean {m} std {s}");
        }
    }
    let flat = PixelImage::from_fn(3, 3, |_, _, _| 7.0);
    let stats = stats_of_images([&flat], false).unwrap();
    assert!(matches!(whiten(&flat, &stats), Err(PreprocError::ZeroStd(_))));
}

/// Intensity centroid of channel 0 inside a disc.
fn centroid(img: &PixelImage, at: (f64, f64), radius: f64) -> (f64, f64) {
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            if (x as f64 - at.0).hypot(y as f64 - at.1) <= radius {
                let w = img.get(x, y, 0);
                sx += w * x as f64;
                sy += w * y as f64;
                sw += w;
            }
        }
    }
    (sx / sw, sy / sw)
}

#[test]
fn eyes_land_on_targets() {
    let mut r = rng(99);
    for _ in 0..100 {
        let (w, h) = (160usize, 140usize);
        let centre = (r.random_range(60.0..100.0), r.random_range(55.0..85.0));
        let dist = r.random_range(30.0..70.0);
        let angle: f64 = r.random_range(-0.6..0.6);
        let half = (angle.cos() * dist / 2.0, angle.sin() * dist / 2.0);
        let left = (centre.0 - half.0, centre.1 - half.1);
        let right = (centre.0 + half.0, centre.1 + half.1);
        let sigma = 3.0;
        let blob = |x: usize, y: usize, c: (f64, f64)| {
            (-((x as f64 - c.0).powi(2) + (y as f64 - c.1).powi(2)) / (2.0 * sigma * sigma)).exp()
        };
        let img = PixelImage::from_fn(w, h, |x, y, _| 255.0 * (blob(x, y, left) + blob(x, y, right)));
        let spec = AlignSpec::new(left, right);
        let out = crop_align(&img, &spec).unwrap();
        assert_eq!((out.width(), out.height()), (112, 112));
        let t = align_transform(&spec).unwrap();
        let radius = 4.0 * sigma * t.scale();
        let s = 112.0;
        for (eye, target) in [(left, spec.target_left), (right, spec.target_right)] {
            let expected = (target.0 * s, target.1 * s);
            let mapped = t.apply(eye);
            assert!((mapped.0 - expected.0).hypot(mapped.1 - expected.1) < 1e-9);
            let found = centroid(&out, expected, radius);
            let err = (found.0 - expected.0).hypot(found.1 - expected.1);
            assert!(err < 0.5, "eye error {err:.3} px");
        }
    }
}

#[test]
fn crop_rejects_bad_eyes() {
    let img = PixelImage::zeros(20, 20);
    assert!(matches!(crop_align(&img, &AlignSpec::new((5.0, 5.0), (5.0, 5.0))), Err(PreprocError::CoincidentEyes)));
    assert!(matches!(crop_align(&img, &AlignSpec::new((5.0, 5.0), (25.0, 5.0))), Err(PreprocError::EyeOutOfBounds(..))));
}

#[test]
fn chain_text_round_trip() {
    for text in ["normalize", "crop_align,whiten", "none", "crop_align,mean_subtract"] {
        let chain: PreprocChain = text.parse().unwrap();
        assert_eq!(chain.to_string(), text);
    }
    assert!("normalize,whiten".parse::<PreprocChain>().is_err());
    assert!("whiten,crop_align".parse::<PreprocChain>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn crop_commutes_with_integer_translation(dx in -15i32..15, dy in -15i32..15, seed in any::<u64>()) {
        let mut r = rng(seed);
        let phase: Vec<f64> = (0..6).map(|_| r.random_range(0.0..6.0)).collect();
        let field = |x: f64, y: f64, ch: usize| 128.0 + 60.0 * (x * 0.11 + phase[ch]).sin() + 50.0 * (y * 0.07 + phase[ch + 3]).cos();
        let img = PixelImage::from_fn(220, 220, |x, y, ch| field(x as f64, y as f64, ch));
        let moved = PixelImage::from_fn(220, 220, |x, y, ch| field(x as f64 - dx as f64, y as f64 - dy as f64, ch));
        let (l, rt) = ((90.0 + r.random_range(-5.0..5.0), 100.0), (135.0, 104.0 + r.random_range(-5.0..5.0)));
        let shift = |p: (f64, f64)| (p.0 + dx as f64, p.1 + dy as f64);
        let a = crop_align(&img, &AlignSpec::new(l, rt)).unwrap();
        let b = crop_align(&moved, &AlignSpec::new(shift(l), shift(rt))).unwrap();
        let worst = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(worst < 1e-6, "max pixel gap {}", worst);
    }
}
