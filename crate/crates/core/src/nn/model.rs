//! Model instances built from a [`ModelSpec`]: parameter storage, the
//! sequence forward pass and exact backward propagation.
//!
//! Activations flow as `[n·l, ...]` with rows ordered sequence-major, so the
//! convolutional part treats every frame independently and the GRU walks each
//! sequence in time order from a zero state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::{c, Scalar};

use super::activation::{relu, relu_backward};
use super::conv::{conv2d_backward, conv2d_forward, ConvCache};
use super::gru::{gru_cell_backward, gru_cell_forward, GruStep, GruWeights};
use super::linear::{fc_backward, fc_forward};
use super::pool::{maxpool_backward, maxpool_forward, PoolCache};
use super::residual::{residual_block_backward, residual_block_forward, ResidualCache, ResidualWeights};
use super::spec::{needs_projection, FrameShape, LayerSpec, ModelSpec};
use super::{NnError, Tensor};

/// A named trainable array. `value.requires_grad()` doubles as the trainable flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let mut p = Self { name, value };
        p.value.set_requires_grad(true);
        p
    }

    pub fn trainable(&self) -> bool {
        self.value.requires_grad()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug, Clone)]
pub struct GruCell<T> {
    pub input_size: usize,
    pub hidden: usize,
    /// `w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h`
    pub params: [Param<T>; 9],
}

impl<T: Scalar> GruCell<T> {
    pub fn weights(&self) -> GruWeights<'_, T> {
        let p = &self.params;
        GruWeights {
            input_size: self.input_size,
            hidden: self.hidden,
            w_z: p[0].value.data(),
            w_r: p[1].value.data(),
            w_h: p[2].value.data(),
            u_z: p[3].value.data(),
            u_r: p[4].value.data(),
            u_h: p[5].value.data(),
            b_z: p[6].value.data(),
            b_r: p[7].value.data(),
            b_h: p[8].value.data(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub stride: usize,
    pub conv_a: Conv2d<T>,
    pub conv_b: Conv2d<T>,
    pub projection: Option<Conv2d<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn weights(&self) -> ResidualWeights<'_, T> {
        ResidualWeights {
            stride: self.stride,
            conv_a: (&self.conv_a.weight.value, &self.conv_a.bias.value),
            conv_b: (&self.conv_b.weight.value, &self.conv_b.bias.value),
            projection: self.projection.as_ref().map(|p| (&p.weight.value, &p.bias.value)),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    MaxPool { window: usize, stride: usize },
    Relu,
    Flatten,
    Fc(Linear<T>),
    Gru(Vec<GruCell<T>>),
    Residual(ResidualBlock<T>),
    OutputHead(Linear<T>),
}

/// Per-layer state recorded by a training forward pass.
enum Cache<T> {
    Conv(ConvCache<T>),
    Pool(PoolCache),
    Relu(Vec<T>),
    Flatten,
    Linear(Tensor<T>),
    Gru(Vec<GruLayerCache<T>>),
    Residual(Box<ResidualCache<T>>),
}

struct GruLayerCache<T> {
    input: Vec<T>,
    /// Hidden state entering each step, `[l][n·hidden]`.
    h_prev: Vec<Vec<T>>,
    steps: Vec<GruStep<T>>,
}

/// Everything `backward` needs from `forward_train`.
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
    n: usize,
    l: usize,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub layers: Vec<Layer<T>>,
}

fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| c(rng.random_range(-bound..bound)))
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| c(rng.random_range(-bound..bound)))
}

fn new_conv<T: Scalar>(
    rng: &mut ChaCha8Rng,
    name: &str,
    in_c: usize,
    out_c: usize,
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
) -> Conv2d<T> {
    Conv2d {
        weight: Param::new(format!("{name}.weight"), he_uniform(rng, vec![kh, kw, in_c, out_c], kh * kw * in_c)),
        bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![out_c])),
        stride,
        padding,
    }
}

fn new_linear<T: Scalar>(rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Linear<T> {
    Linear {
        weight: Param::new(format!("{name}.weight"), he_uniform(rng, vec![fan_in, fan_out], fan_in)),
        bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![fan_out])),
    }
}

/// Update-gate bias at initialization; negative values favour carrying state.
const GRU_UPDATE_BIAS: f64 = -1.0;

fn new_gru_cell<T: Scalar>(rng: &mut ChaCha8Rng, name: &str, input_size: usize, hidden: usize) -> GruCell<T> {
    let bound = 1.0 / (hidden as f64).sqrt();
    let mut w = |suffix: &str, rows: usize| {
        Param::new(format!("{name}.{suffix}"), uniform(rng, vec![rows, hidden], bound))
    };
    let (w_z, w_r, w_h) = (w("w_z", input_size), w("w_r", input_size), w("w_h", input_size));
    let (u_z, u_r, u_h) = (w("u_z", hidden), w("u_r", hidden), w("u_h", hidden));
    let bias = |suffix: &str, v: f64| {
        Param::new(format!("{name}.{suffix}"), Tensor::from_fn(vec![hidden], |_| c(v)))
    };
    GruCell {
        input_size,
        hidden,
        params: [
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            bias("b_z", GRU_UPDATE_BIAS),
            bias("b_r", 0.0),
            bias("b_h", 0.0),
        ],
    }
}

fn conv_params<T>(conv: &Conv2d<T>) -> [&Param<T>; 2] {
    [&conv.weight, &conv.bias]
}

fn conv_params_mut<T>(conv: &mut Conv2d<T>) -> [&mut Param<T>; 2] {
    [&mut conv.weight, &mut conv.bias]
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model. Parameters are named per layer kind
    /// (`conv1`, `fc1`, `res1`, `gru.l0`, `head`) so stacks sharing a CNN
    /// prefix share parameter names.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut n_conv, mut n_fc, mut n_res) = (0, 0, 0);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            let built = match *layer {
                LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, padding } => {
                    n_conv += 1;
                    let name = format!("conv{n_conv}");
                    Layer::Conv2d(new_conv(&mut rng, &name, in_channels, out_channels, (kernel_h, kernel_w), stride, padding))
                }
                LayerSpec::MaxPool { window, stride } => Layer::MaxPool { window, stride },
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Fc { in_features, out_features } => {
                    n_fc += 1;
                    Layer::Fc(new_linear(&mut rng, &format!("fc{n_fc}"), in_features, out_features))
                }
                LayerSpec::Gru { input_size, hidden_size, num_layers } => Layer::Gru(
                    (0..num_layers)
                        .map(|i| {
                            let fan_in = if i == 0 { input_size } else { hidden_size };
                            new_gru_cell(&mut rng, &format!("gru.l{i}"), fan_in, hidden_size)
                        })
                        .collect(),
                ),
                LayerSpec::ResidualBlock { in_channels, out_channels, stride } => {
                    n_res += 1;
                    let name = format!("res{n_res}");
                    let conv_a = new_conv(&mut rng, &format!("{name}.a"), in_channels, out_channels, (3, 3), stride, 1);
                    let conv_b = new_conv(&mut rng, &format!("{name}.b"), out_channels, out_channels, (3, 3), 1, 1);
                    let projection = needs_projection(in_channels, out_channels, stride)
                        .then(|| new_conv(&mut rng, &format!("{name}.proj"), in_channels, out_channels, (1, 1), stride, 0));
                    Layer::Residual(ResidualBlock { stride, conv_a, conv_b, projection })
                }
                LayerSpec::OutputHead { in_features, out_features } => {
                    Layer::OutputHead(new_linear(&mut rng, "head", in_features, out_features))
                }
            };
            layers.push(built);
        }
        Ok(Self { spec, layers })
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv2d(conv) => out.extend(conv_params(conv)),
                Layer::Fc(lin) | Layer::OutputHead(lin) => out.extend([&lin.weight, &lin.bias]),
                Layer::Gru(cells) => out.extend(cells.iter().flat_map(|c| c.params.iter())),
                Layer::Residual(block) => {
                    out.extend(conv_params(&block.conv_a));
                    out.extend(conv_params(&block.conv_b));
                    if let Some(p) = &block.projection {
                        out.extend(conv_params(p));
                    }
                }
                Layer::MaxPool { .. } | Layer::Relu | Layer::Flatten => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d(conv) => out.extend(conv_params_mut(conv)),
                Layer::Fc(lin) | Layer::OutputHead(lin) => out.extend([&mut lin.weight, &mut lin.bias]),
                Layer::Gru(cells) => out.extend(cells.iter_mut().flat_map(|c| c.params.iter_mut())),
                Layer::Residual(block) => {
                    out.extend(conv_params_mut(&mut block.conv_a));
                    out.extend(conv_params_mut(&mut block.conv_b));
                    if let Some(p) = &mut block.projection {
                        out.extend(conv_params_mut(p));
                    }
                }
                Layer::MaxPool { .. } | Layer::Relu | Layer::Flatten => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.value.zero_grad();
        }
    }

    /// Marks every parameter whose name starts with one of `prefixes` as
    /// frozen; returns how many were frozen.
    pub fn freeze(&mut self, prefixes: &[String]) -> usize {
        let mut count = 0;
        for p in self.params_mut() {
            if prefixes.iter().any(|pre| p.name.starts_with(pre.as_str())) {
                p.value.set_requires_grad(false);
                count += 1;
            }
        }
        count
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize), NnError> {
        let s = self.spec.input_size;
        if x.shape().len() != 5 || x.shape()[2..] != [s, s, 3] {
            return Err(NnError::Shape(format!(
                "model '{}' expects input [n, l, {s}, {s}, 3], got {:?}",
                self.spec.name,
                x.shape()
            )));
        }
        Ok((x.shape()[0], x.shape()[1]))
    }

    /// Inference pass: `[n, l, S, S, 3]` → `[n, l, 2]`.
    pub fn forward_sequence(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (n, l) = self.check_input(x)?;
        let (out, _) = self.run(x.clone(), n, l, false)?;
        out.reshape(vec![n, l, 2])
    }

    /// Forward pass that records what [`Model::backward`] needs.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>), NnError> {
        let (n, l) = self.check_input(x)?;
        let (out, caches) = self.run(x.clone(), n, l, true)?;
        Ok((out.reshape(vec![n, l, 2])?, Tape { caches, n, l }))
    }

    fn run(&self, x: Tensor<T>, n: usize, l: usize, record: bool) -> Result<(Tensor<T>, Vec<Cache<T>>), NnError> {
        let s = self.spec.input_size;
        let mut act = x.reshape(vec![n * l, s, s, 3])?;
        let mut caches = Vec::with_capacity(if record { self.layers.len() } else { 0 });
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::Conv2d(conv) => {
                    let (y, cache) = conv2d_forward(&act, &conv.weight.value, &conv.bias.value, conv.stride, conv.padding)?;
                    (y, record.then_some(Cache::Conv(cache)))
                }
                Layer::MaxPool { window, stride } => {
                    let (y, cache) = maxpool_forward(&act, *window, *stride)?;
                    (y, record.then_some(Cache::Pool(cache)))
                }
                Layer::Relu => {
                    let y = Tensor::new(act.shape().to_vec(), relu(act.data()))?;
                    (y, record.then(|| Cache::Relu(act.data().to_vec())))
                }
                Layer::Flatten => {
                    let shape = act.shape().to_vec();
                    let rows = shape[0];
                    let width = act.len() / rows.max(1);
                    (act.reshape(vec![rows, width])?, record.then_some(Cache::Flatten))
                }
                Layer::Fc(lin) | Layer::OutputHead(lin) => {
                    let y = fc_forward(&act, &lin.weight.value, &lin.bias.value)?;
                    (y, record.then_some(Cache::Linear(act)))
                }
                Layer::Gru(cells) => {
                    let (y, cache) = gru_forward(cells, act, n, l, record)?;
                    (y, cache.map(Cache::Gru))
                }
                Layer::Residual(block) => {
                    let (y, cache) = residual_block_forward(&act, &block.weights())?;
                    (y, record.then(|| Cache::Residual(Box::new(cache))))
                }
            };
            act = next;
            if let Some(cache) = cache {
                caches.push(cache);
            }
        }
        Ok((act, caches))
    }

    /// Accumulates parameter gradients for `grad_out = ∂L/∂output` (`[n, l, 2]`)
    /// and returns the gradient with respect to the model input.
    pub fn backward(&mut self, tape: Tape<T>, grad_out: &[T]) -> Result<Vec<T>, NnError> {
        let Tape { caches, n, l } = tape;
        if caches.len() != self.layers.len() || grad_out.len() != n * l * 2 {
            return Err(NnError::Shape("backward: tape does not match this model".into()));
        }
        let mut grad = grad_out.to_vec();
        for (layer, cache) in self.layers.iter_mut().zip(caches).rev() {
            grad = match (layer, cache) {
                (Layer::Conv2d(conv), Cache::Conv(cache)) => {
                    let g = conv2d_backward(&cache, &conv.weight.value, &grad, true);
                    conv.weight.value.accumulate_grad(&g.kernel);
                    conv.bias.value.accumulate_grad(&g.bias);
                    g.input
                }
                (Layer::MaxPool { .. }, Cache::Pool(cache)) => maxpool_backward(&cache, &grad),
                (Layer::Relu, Cache::Relu(input)) => relu_backward(&input, &grad),
                (Layer::Flatten, Cache::Flatten) => grad,
                (Layer::Fc(lin), Cache::Linear(input)) | (Layer::OutputHead(lin), Cache::Linear(input)) => {
                    let g = fc_backward(&input, &lin.weight.value, &lin.bias.value, &grad)?;
                    lin.weight.value.accumulate_grad(&g.weight);
                    lin.bias.value.accumulate_grad(&g.bias);
                    g.input
                }
                (Layer::Gru(cells), Cache::Gru(cache)) => gru_backward(cells, cache, &grad, n, l),
                (Layer::Residual(block), Cache::Residual(cache)) => {
                    let g = residual_block_backward(&cache, &block.weights(), &grad);
                    block.conv_a.weight.value.accumulate_grad(&g.conv_a.0);
                    block.conv_a.bias.value.accumulate_grad(&g.conv_a.1);
                    block.conv_b.weight.value.accumulate_grad(&g.conv_b.0);
                    block.conv_b.bias.value.accumulate_grad(&g.conv_b.1);
                    if let (Some(p), Some((k, b))) = (&mut block.projection, g.projection) {
                        p.weight.value.accumulate_grad(&k);
                        p.bias.value.accumulate_grad(&b);
                    }
                    g.input
                }
                _ => return Err(NnError::Shape("backward: cache kind does not match layer".into())),
            };
        }
        Ok(grad)
    }

    /// Shape of the per-frame activation after each layer.
    pub fn frame_shapes(&self) -> Result<Vec<FrameShape>, NnError> {
        self.spec.infer_shapes()
    }
}

fn gather_step<T: Scalar>(act: &[T], n: usize, l: usize, t: usize, width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * width);
    for seq in 0..n {
        let row = seq * l + t;
        out.extend_from_slice(&act[row * width..(row + 1) * width]);
    }
    out
}

fn scatter_step<T: Scalar>(dst: &mut [T], src: &[T], n: usize, l: usize, t: usize, width: usize) {
    for seq in 0..n {
        let row = seq * l + t;
        dst[row * width..(row + 1) * width].copy_from_slice(&src[seq * width..(seq + 1) * width]);
    }
}

fn gru_forward<T: Scalar>(
    cells: &[GruCell<T>],
    input: Tensor<T>,
    n: usize,
    l: usize,
    record: bool,
) -> Result<(Tensor<T>, Option<Vec<GruLayerCache<T>>>), NnError> {
    let mut act = input.into_data();
    let mut caches = Vec::new();
    for cell in cells {
        let weights = cell.weights();
        let (fan_in, hid) = (cell.input_size, cell.hidden);
        if act.len() != n * l * fan_in {
            return Err(NnError::Shape(format!("gru expects {fan_in} features per frame")));
        }
        let mut out = vec![T::zero(); n * l * hid];
        let mut h = vec![T::zero(); n * hid];
        let mut h_prev_all = Vec::new();
        let mut steps = Vec::new();
        for t in 0..l {
            let x_t = gather_step(&act, n, l, t, fan_in);
            let step = gru_cell_forward(&x_t, &h, &weights)?;
            scatter_step(&mut out, &step.h, n, l, t, hid);
            let next_h = step.h.clone();
            if record {
                h_prev_all.push(std::mem::replace(&mut h, next_h));
                steps.push(step);
            } else {
                h = next_h;
            }
        }
        if record {
            caches.push(GruLayerCache { input: std::mem::take(&mut act), h_prev: h_prev_all, steps });
        }
        act = out;
    }
    let hid = cells.last().map_or(0, |c| c.hidden);
    Ok((Tensor::new(vec![n * l, hid], act)?, record.then_some(caches)))
}

fn gru_backward<T: Scalar>(
    cells: &mut [GruCell<T>],
    caches: Vec<GruLayerCache<T>>,
    grad_out: &[T],
    n: usize,
    l: usize,
) -> Vec<T> {
    let mut grad = grad_out.to_vec();
    for (cell, cache) in cells.iter_mut().zip(caches).rev() {
        let (fan_in, hid) = (cell.input_size, cell.hidden);
        let mut d_input = vec![T::zero(); n * l * fan_in];
        let mut param_grads: Vec<Vec<T>> = cell.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        let mut d_h_next = vec![T::zero(); n * hid];
        {
            let weights = cell.weights();
            for t in (0..l).rev() {
                let mut d_h = gather_step(&grad, n, l, t, hid);
                for (d, &v) in d_h.iter_mut().zip(&d_h_next) {
                    *d += v;
                }
                let x_t = gather_step(&cache.input, n, l, t, fan_in);
                let g = gru_cell_backward(&x_t, &cache.h_prev[t], &cache.steps[t], &d_h, &weights);
                scatter_step(&mut d_input, &g.x, n, l, t, fan_in);
                for (acc, part) in param_grads
                    .iter_mut()
                    .zip([&g.w_z, &g.w_r, &g.w_h, &g.u_z, &g.u_r, &g.u_h, &g.b_z, &g.b_r, &g.b_h])
                {
                    for (a, &v) in acc.iter_mut().zip(part.iter()) {
                        *a += v;
                    }
                }
                d_h_next = g.h_prev;
            }
        }
        for (p, g) in cell.params.iter_mut().zip(&param_grads) {
            p.value.accumulate_grad(g);
        }
        grad = d_input;
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini() -> Model<f64> {
        Model::new(ModelSpec::preset("vgg-mini-gru").unwrap(), 3).unwrap()
    }

    fn input(n: usize, l: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![n, l, 16, 16, 3], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_frame_output_shape() {
        let y = mini().forward_sequence(&input(1, 1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
    }

    #[test]
    fn rejects_wrong_input_size() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 8, 8, 3]);
        assert!(mini().forward_sequence(&x).is_err());
    }

    #[test]
    fn parameter_names_are_unique_and_stable() {
        let m = mini();
        let names: Vec<_> = m.params().iter().map(|p| p.name.clone()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names[0], "conv1.weight");
        assert!(names.contains(&"gru.l1.u_h".to_string()));
        assert_eq!(names.last().unwrap(), "head.bias");
        let r = Model::<f64>::new(ModelSpec::preset("resnet-mini-gru").unwrap(), 0).unwrap();
        assert!(r.params().iter().any(|p| p.name == "res2.proj.weight"));
        assert!(!r.params().iter().any(|p| p.name == "res1.proj.weight"));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = mini();
        let b = mini();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.value.data(), pb.value.data());
        }
        let other = Model::<f64>::new(ModelSpec::preset("vgg-mini-gru").unwrap(), 4).unwrap();
        assert_ne!(a.params()[0].value.data(), other.params()[0].value.data());
    }

    #[test]
    fn gru_update_bias_initialized_negative() {
        let m = mini();
        let b_z = m.params().into_iter().find(|p| p.name == "gru.l0.b_z").unwrap();
        assert!(b_z.value.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn freeze_by_prefix() {
        let mut m = mini();
        let frozen = m.freeze(&["conv".to_string()]);
        assert_eq!(frozen, 8);
        assert!(m.params().iter().filter(|p| p.name.starts_with("conv")).all(|p| !p.trainable()));
        assert!(m.params().iter().filter(|p| p.name.starts_with("gru")).all(|p| p.trainable()));
    }
}
