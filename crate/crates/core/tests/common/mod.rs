//! Oracles shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use affectlab::annotation::ManifestRecord;
use affectlab::nn::activation::{relu, relu_backward};
use affectlab::nn::conv::{conv2d_backward, conv2d_forward};
use affectlab::nn::gru::{gru_cell_backward, gru_cell_forward, GruWeights};
use affectlab::nn::linear::{fc_backward, fc_forward};
use affectlab::nn::pool::{maxpool_backward, maxpool_forward};
use affectlab::nn::residual::{residual_block_backward, residual_block_forward, ResidualWeights};
use affectlab::nn::{loss_1mccc_with, LayerSpec, LossStats, Model, ModelSpec, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const GRADIENT_SEEDS: u64 = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

/// Tensor-level relative error: worst entry gap over the largest magnitude
/// on either side.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let gap = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(1e-12, f64::max);
    gap / scale
}

/// Central differences of `f` with respect to every entry of `at`.
pub fn numeric_grad(at: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = at.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Central differences that drop coordinates where the step straddles a
/// ReLU or max-pool kink: there the estimate at `FD_STEP` disagrees with
/// one at a hundredth of it. Returns the kept indices and their estimates.
pub fn smooth_numeric_grad(at: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> (Vec<usize>, Vec<f64>) {
    let mut x = at.to_vec();
    let mut central = |x: &mut Vec<f64>, i: usize, h: f64| {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(x);
        x[i] = orig - h;
        let down = f(x);
        x[i] = orig;
        (up - down) / (2.0 * h)
    };
    let mut kept = (Vec::new(), Vec::new());
    for i in 0..x.len() {
        let coarse = central(&mut x, i, FD_STEP);
        let fine = central(&mut x, i, FD_STEP / 100.0);
        if (coarse - fine).abs() <= 1e-6 * coarse.abs().max(fine.abs()).max(1e-2) {
            kept.0.push(i);
            kept.1.push(coarse);
        }
    }
    kept
}

fn rel_err_at(analytic: &[f64], kept: &(Vec<usize>, Vec<f64>)) -> f64 {
    let picked: Vec<f64> = kept.0.iter().map(|&i| analytic[i]).collect();
    rel_err(&picked, &kept.1)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn check_fc(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rows, fan_in, fan_out) = (3, 5, 4);
    let x = uniform(&mut r, rows * fan_in, -1.0, 1.0);
    let w = uniform(&mut r, fan_in * fan_out, -1.0, 1.0);
    let b = uniform(&mut r, fan_out, -1.0, 1.0);
    let probe = uniform(&mut r, rows * fan_out, -1.0, 1.0);
    let loss = |x: &[f64], w: &[f64], b: &[f64]| {
        let y = fc_forward(
            &tensor(vec![rows, fan_in], x.to_vec()),
            &tensor(vec![fan_in, fan_out], w.to_vec()),
            &tensor(vec![fan_out], b.to_vec()),
        )
        .unwrap();
        dot(y.data(), &probe)
    };
    let g = fc_backward(
        &tensor(vec![rows, fan_in], x.clone()),
        &tensor(vec![fan_in, fan_out], w.clone()),
        &tensor(vec![fan_out], b.clone()),
        &probe,
    )
    .unwrap();
    [
        rel_err(&g.input, &numeric_grad(&x, |v| loss(v, &w, &b))),
        rel_err(&g.weight, &numeric_grad(&w, |v| loss(&x, v, &b))),
        rel_err(&g.bias, &numeric_grad(&b, |v| loss(&x, &w, v))),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

pub fn check_conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    // alternate between padded stride 1 and unpadded stride 2
    let (size, stride, pad) = if seed.is_multiple_of(2) { (5, 1, 1) } else { (7, 2, 0) };
    let (batch, c, f, k) = (2, 2, 3, 3);
    let xs = vec![batch, size, size, c];
    let ks = vec![k, k, c, f];
    let x = uniform(&mut r, xs.iter().product(), -1.0, 1.0);
    let kern = uniform(&mut r, ks.iter().product(), -1.0, 1.0);
    let b = uniform(&mut r, f, -1.0, 1.0);
    let out = conv2d_forward(&tensor(xs.clone(), x.clone()), &tensor(ks.clone(), kern.clone()), &tensor(vec![f], b.clone()), stride, pad)
        .unwrap();
    let probe = uniform(&mut r, out.0.len(), -1.0, 1.0);
    let loss = |x: &[f64], k: &[f64], b: &[f64]| {
        let (y, _) = conv2d_forward(
            &tensor(xs.clone(), x.to_vec()),
            &tensor(ks.clone(), k.to_vec()),
            &tensor(vec![f], b.to_vec()),
            stride,
            pad,
        )
        .unwrap();
        dot(y.data(), &probe)
    };
    let g = conv2d_backward(&out.1, &tensor(ks.clone(), kern.clone()), &probe, true);
    [
        rel_err(&g.input, &numeric_grad(&x, |v| loss(v, &kern, &b))),
        rel_err(&g.kernel, &numeric_grad(&kern, |v| loss(&x, v, &b))),
        rel_err(&g.bias, &numeric_grad(&b, |v| loss(&x, &kern, v))),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

pub fn check_maxpool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = vec![2, 6, 6, 2];
    let n: usize = shape.iter().product();
    // distinct values spaced far apart relative to the step keep argmax stable
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    vals.shuffle(&mut r);
    let (window, stride) = if seed.is_multiple_of(2) { (2, 2) } else { (3, 1) };
    let (y, cache) = maxpool_forward(&tensor(shape.clone(), vals.clone()), window, stride).unwrap();
    let probe = uniform(&mut r, y.len(), -1.0, 1.0);
    let analytic = maxpool_backward(&cache, &probe);
    let numeric = numeric_grad(&vals, |v| {
        let (y, _) = maxpool_forward(&tensor(shape.clone(), v.to_vec()), window, stride).unwrap();
        dot(y.data(), &probe)
    });
    rel_err(&analytic, &numeric)
}

pub fn check_relu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x: Vec<f64> = (0..40)
        .map(|_| {
            let m = r.random_range(0.01..2.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let probe = uniform(&mut r, x.len(), -1.0, 1.0);
    let analytic = relu_backward(&x, &probe);
    rel_err(&analytic, &numeric_grad(&x, |v| dot(&relu(v), &probe)))
}

pub fn check_gru_cell(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rows, fan_in, hid) = (2, 4, 3);
    let x = uniform(&mut r, rows * fan_in, -1.0, 1.0);
    let h = uniform(&mut r, rows * hid, -1.0, 1.0);
    let mut params: Vec<Vec<f64>> = Vec::new();
    for _ in 0..3 {
        params.push(uniform(&mut r, fan_in * hid, -0.8, 0.8));
    }
    for _ in 0..3 {
        params.push(uniform(&mut r, hid * hid, -0.8, 0.8));
    }
    for _ in 0..3 {
        params.push(uniform(&mut r, hid, -0.5, 0.5));
    }
    let probe = uniform(&mut r, rows * hid, -1.0, 1.0);
    let view = |p: &[Vec<f64>]| -> Vec<Vec<f64>> { p.to_vec() };
    let weights = |p: &[Vec<f64>]| {
        let p = view(p);
        move |f: &dyn Fn(&GruWeights<'_, f64>) -> f64| {
            f(&GruWeights {
                input_size: fan_in,
                hidden: hid,
                w_z: &p[0],
                w_r: &p[1],
                w_h: &p[2],
                u_z: &p[3],
                u_r: &p[4],
                u_h: &p[5],
                b_z: &p[6],
                b_r: &p[7],
                b_h: &p[8],
            })
        }
    };
    let loss = |x: &[f64], h: &[f64], p: &[Vec<f64>]| {
        weights(p)(&|w| dot(&gru_cell_forward(x, h, w).unwrap().h, &probe))
    };
    let p = params.clone();
    let w = GruWeights {
        input_size: fan_in,
        hidden: hid,
        w_z: &p[0],
        w_r: &p[1],
        w_h: &p[2],
        u_z: &p[3],
        u_r: &p[4],
        u_h: &p[5],
        b_z: &p[6],
        b_r: &p[7],
        b_h: &p[8],
    };
    let step = gru_cell_forward(&x, &h, &w).unwrap();
    let g = gru_cell_backward(&x, &h, &step, &probe, &w);
    let analytic = [&g.w_z, &g.w_r, &g.w_h, &g.u_z, &g.u_r, &g.u_h, &g.b_z, &g.b_r, &g.b_h];
    let mut worst = rel_err(&g.x, &numeric_grad(&x, |v| loss(v, &h, &params)));
    worst = worst.max(rel_err(&g.h_prev, &numeric_grad(&h, |v| loss(&x, v, &params))));
    for (i, a) in analytic.iter().enumerate() {
        let numeric = numeric_grad(&params[i], |v| {
            let mut p = params.clone();
            p[i] = v.to_vec();
            loss(&x, &h, &p)
        });
        worst = worst.max(rel_err(a, &numeric));
    }
    worst
}

pub fn check_residual_block(seed: u64) -> f64 {
    let mut r = rng(seed);
    // even seeds: identity skip; odd seeds: strided projection with a channel change
    let (size, stride, c_in, c_out) = if seed.is_multiple_of(2) { (4, 1, 3, 3) } else { (5, 2, 2, 3) };
    let xs = vec![2, size, size, c_in];
    let shapes = [vec![3, 3, c_in, c_out], vec![3, 3, c_out, c_out], vec![1, 1, c_in, c_out]];
    let x = uniform(&mut r, xs.iter().product(), -1.0, 1.0);
    let mut p: Vec<Vec<f64>> = Vec::new();
    for s in &shapes {
        p.push(uniform(&mut r, s.iter().product(), -0.5, 0.5));
        p.push(uniform(&mut r, c_out, -0.2, 0.2));
    }
    let with_proj = stride != 1 || c_in != c_out;
    let run = |x: &[f64], p: &[Vec<f64>]| {
        let ts: Vec<Tensor<f64>> = shapes
            .iter()
            .enumerate()
            .flat_map(|(i, s)| [tensor(s.clone(), p[2 * i].clone()), tensor(vec![c_out], p[2 * i + 1].clone())])
            .collect();
        let w = ResidualWeights {
            stride,
            conv_a: (&ts[0], &ts[1]),
            conv_b: (&ts[2], &ts[3]),
            projection: with_proj.then_some((&ts[4], &ts[5])),
        };
        let (y, cache) = residual_block_forward(&tensor(xs.clone(), x.to_vec()), &w).unwrap();
        (y, cache, ts)
    };
    let (y, cache, ts) = run(&x, &p);
    let probe = uniform(&mut r, y.len(), -1.0, 1.0);
    let w = ResidualWeights {
        stride,
        conv_a: (&ts[0], &ts[1]),
        conv_b: (&ts[2], &ts[3]),
        projection: with_proj.then_some((&ts[4], &ts[5])),
    };
    let g = residual_block_backward(&cache, &w, &probe);
    let loss = |x: &[f64], p: &[Vec<f64>]| dot(run(x, p).0.data(), &probe);
    let mut worst = rel_err(&g.input, &numeric_grad(&x, |v| loss(v, &p)));
    let mut analytic = vec![g.conv_a.0, g.conv_a.1, g.conv_b.0, g.conv_b.1];
    if let Some((k, b)) = g.projection {
        analytic.push(k);
        analytic.push(b);
    }
    for (i, a) in analytic.iter().enumerate() {
        let numeric = numeric_grad(&p[i], |v| {
            let mut q = p.clone();
            q[i] = v.to_vec();
            loss(&x, &q)
        });
        worst = worst.max(rel_err(a, &numeric));
    }
    worst
}

pub fn check_loss(seed: u64, stats: LossStats) -> f64 {
    let mut r = rng(seed);
    let (n, l) = (2, 5);
    let target = uniform(&mut r, n * l * 2, -1.0, 1.0);
    let pred = uniform(&mut r, n * l * 2, -1.0, 1.0);
    let t = tensor(vec![n, l, 2], target);
    let (_, grad) = loss_1mccc_with(&tensor(vec![n, l, 2], pred.clone()), &t, stats).unwrap();
    let numeric = numeric_grad(&pred, |v| loss_1mccc_with(&tensor(vec![n, l, 2], v.to_vec()), &t, stats).unwrap().0);
    rel_err(grad.data(), &numeric)
}

/// A tiny CNN+GRU used for whole-model gradient checks.
pub fn tiny_spec() -> ModelSpec {
    ModelSpec {
        name: "tiny".into(),
        input_size: 6,
        layers: vec![
            LayerSpec::Conv2d { in_channels: 3, out_channels: 2, kernel_h: 3, kernel_w: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::ResidualBlock { in_channels: 2, out_channels: 3, stride: 1 },
            LayerSpec::Flatten,
            LayerSpec::Fc { in_features: 27, out_features: 4 },
            LayerSpec::Gru { input_size: 4, hidden_size: 3, num_layers: 2 },
            LayerSpec::OutputHead { in_features: 3, out_features: 2 },
        ],
    }
}

/// Model backward against central differences of the loss over every
/// parameter and the input.
pub fn check_model(seed: u64) -> f64 {
    let mut r = rng(seed);
    let spec = tiny_spec();
    let (n, l, s) = (2, 3, spec.input_size);
    let mut model = Model::<f64>::new(spec, seed).unwrap();
    let x = tensor(vec![n, l, s, s, 3], uniform(&mut r, n * l * s * s * 3, -1.0, 1.0));
    let y = tensor(vec![n, l, 2], uniform(&mut r, n * l * 2, -1.0, 1.0));
    let (out, tape) = model.forward_train(&x).unwrap();
    let (_, grad) = loss_1mccc_with(&out, &y, LossStats::Joint).unwrap();
    model.zero_grad();
    let input_grad = model.backward(tape, grad.data()).unwrap();
    let loss_of = |m: &Model<f64>, x: &Tensor<f64>| loss_1mccc_with(&m.forward_sequence(x).unwrap(), &y, LossStats::Joint).unwrap().0;
    let (mut total, mut dropped) = (0, 0);
    let mut tally = |len: usize, kept: &(Vec<usize>, Vec<f64>)| {
        total += len;
        dropped += len - kept.0.len();
    };
    let kept = smooth_numeric_grad(x.data(), |v| loss_of(&model, &tensor(x.shape().to_vec(), v.to_vec())));
    tally(input_grad.len(), &kept);
    let mut worst = rel_err_at(&input_grad, &kept);
    let count = model.params().len();
    for pi in 0..count {
        let analytic = model.params()[pi].value.grad().unwrap().to_vec();
        let base = model.params()[pi].value.data().to_vec();
        let mut probe = model.clone();
        let numeric = smooth_numeric_grad(&base, |v| {
            probe.params_mut()[pi].value.data_mut().copy_from_slice(v);
            loss_of(&probe, &x)
        });
        tally(analytic.len(), &numeric);
        worst = worst.max(rel_err_at(&analytic, &numeric));
    }
    assert!(dropped * 50 <= total, "kink filter dropped {dropped} of {total} coordinates");
    worst
}

/// Direct-formula metric oracles.
pub fn oracle_ccc(p: &[f64], t: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mt = t.iter().sum::<f64>() / n;
    let vp = p.iter().map(|v| (v - mp).powi(2)).sum::<f64>() / n;
    let vt = t.iter().map(|v| (v - mt).powi(2)).sum::<f64>() / n;
    let cov = p.iter().zip(t).map(|(a, b)| (a - mp) * (b - mt)).sum::<f64>() / n;
    2.0 * cov / (vp + vt + (mp - mt).powi(2))
}

pub fn oracle_pearson(p: &[f64], t: &[f64]) -> f64 {
    let n = p.len() as f64;
    let (sp, st) = (p.iter().sum::<f64>(), t.iter().sum::<f64>());
    let spp = p.iter().map(|v| v * v).sum::<f64>();
    let stt = t.iter().map(|v| v * v).sum::<f64>();
    let spt = p.iter().zip(t).map(|(a, b)| a * b).sum::<f64>();
    (n * spt - sp * st) / ((n * spp - sp * sp).sqrt() * (n * stt - st * st).sqrt())
}

pub fn oracle_mse(p: &[f64], t: &[f64]) -> f64 {
    p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300) || (a - b).abs() < 1e-15
}

/// Six-loop convolution with zero padding, NHWC / `[kh, kw, C, F]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(x: &[f64], dims: [usize; 4], k: &[f64], kd: [usize; 4], b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [bn, h, w, c] = dims;
    let [kh, kw, _, f] = kd;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; bn * oh * ow * f];
    for n in 0..bn {
        for oy in 0..oh {
            for ox in 0..ow {
                for fo in 0..f {
                    let mut acc = b[fo];
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (oy * stride + dy) as isize - pad as isize;
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                acc += x[((n * h + iy as usize) * w + ix as usize) * c + ci]
                                    * k[((dy * kw + dx) * c + ci) * f + fo];
                            }
                        }
                    }
                    out[((n * oh + oy) * ow + ox) * f + fo] = acc;
                }
            }
        }
    }
    out
}

pub fn naive_fc(x: &[f64], rows: usize, fan_in: usize, w: &[f64], fan_out: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * fan_out];
    for r in 0..rows {
        for j in 0..fan_out {
            out[r * fan_out + j] = b[j] + (0..fan_in).map(|i| x[r * fan_in + i] * w[i * fan_out + j]).sum::<f64>();
        }
    }
    out
}

/// Whether `counts` (batches per video) can be dealt into groups of the
/// given sizes with no video repeated inside a group. Exhaustive search.
pub fn distinct_grouping_exists(counts: &[usize], sizes: &[usize]) -> bool {
    fn place(counts: &mut [usize], slots: &mut [usize], used: &mut [Vec<bool>], video: usize) -> bool {
        if video == counts.len() {
            return true;
        }
        if counts[video] == 0 {
            return place(counts, slots, used, video + 1);
        }
        for g in 0..slots.len() {
            if slots[g] > 0 && !used[g][video] {
                slots[g] -= 1;
                used[g][video] = true;
                counts[video] -= 1;
                if place(counts, slots, used, video) {
                    return true;
                }
                counts[video] += 1;
                used[g][video] = false;
                slots[g] += 1;
            }
        }
        false
    }
    let mut counts = counts.to_vec();
    let mut slots = sizes.to_vec();
    let mut used = vec![vec![false; counts.len()]; sizes.len()];
    place(&mut counts, &mut slots, &mut used, 0)
}

/// In-memory manifest with the given frame counts per video.
pub fn records_with(sizes: &[usize]) -> Vec<ManifestRecord> {
    sizes
        .iter()
        .enumerate()
        .flat_map(|(v, &n)| {
            (0..n).map(move |i| ManifestRecord {
                video_id: format!("v{v:03}"),
                frame_path: PathBuf::from(format!("v{v:03}/{:06}.png", i + 1)),
                valence: ((i * 7 + v) % 11) as f64 / 11.0,
                arousal: -(((i * 3 + v) % 5) as f64) / 5.0,
            })
        })
        .collect()
}

pub fn video_counts(groups: &[usize], video_of: impl Fn(usize) -> String) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for &g in groups {
        *out.entry(video_of(g)).or_insert(0) += 1;
    }
    out
}

/// Training config over a freshly written synthetic dataset in `root`.
pub fn synthetic_config(root: &std::path::Path, videos: usize, frames: usize) -> affectlab::train::TrainConfig {
    use affectlab::synth::{write_synthetic_dataset, SynthSpec};
    let data = root.join("data");
    let spec = SynthSpec { videos, frames, ..SynthSpec::default() };
    let manifest = write_synthetic_dataset(&data, &spec).unwrap();
    affectlab::train::TrainConfig {
        model: "vgg-mini-gru".into(),
        seq_len: 10,
        group_size: 2,
        lr: 1e-3,
        epochs: Some(3),
        checkpoint_every: 2,
        patience: 100,
        seed: 17,
        manifest: Some(manifest),
        frames_root: data,
        out_dir: root.join("run"),
        cache_images: true,
        ..Default::default()
    }
}
