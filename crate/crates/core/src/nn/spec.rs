//! Declarative layer stacks, shape propagation and the built-in presets.

use std::fmt;

use super::conv::conv_output_size;
use super::pool::pool_output_size;
use super::NnError;

/// Number of regression outputs: valence and arousal.
pub const OUTPUT_DIM: usize = 2;

pub const DEFAULT_GRU_HIDDEN: usize = 128;
pub const DEFAULT_GRU_LAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel_h: usize, kernel_w: usize, stride: usize, padding: usize },
    MaxPool { window: usize, stride: usize },
    Relu,
    Flatten,
    Fc { in_features: usize, out_features: usize },
    Gru { input_size: usize, hidden_size: usize, num_layers: usize },
    ResidualBlock { in_channels: usize, out_channels: usize, stride: usize },
    OutputHead { in_features: usize, out_features: usize },
}

/// Per-frame activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameShape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl FrameShape {
    pub fn len(&self) -> usize {
        match *self {
            FrameShape::Spatial { h, w, c } => h * w * c,
            FrameShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            FrameShape::Spatial { h, w, c } => vec![h, w, c],
            FrameShape::Flat(n) => vec![n],
        }
    }
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Fc { .. } => "fc",
            LayerSpec::Gru { .. } => "gru",
            LayerSpec::ResidualBlock { .. } => "residual",
            LayerSpec::OutputHead { .. } => "head",
        }
    }

    /// Output shape given the input shape.
    pub fn propagate(&self, input: FrameShape) -> Result<FrameShape, NnError> {
        let mismatch = |what: &str| {
            NnError::Spec(format!("{} expects {what} input, got {input:?}", self.kind()))
        };
        match (*self, input) {
            (
                LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, padding },
                FrameShape::Spatial { h, w, c },
            ) => {
                if c != in_channels {
                    return Err(NnError::Spec(format!("conv2d in_channels {in_channels} but input has {c}")));
                }
                if out_channels == 0 {
                    return Err(NnError::Spec("conv2d out_channels must be positive".into()));
                }
                Ok(FrameShape::Spatial {
                    h: conv_output_size(h, kernel_h, stride, padding)?,
                    w: conv_output_size(w, kernel_w, stride, padding)?,
                    c: out_channels,
                })
            }
            (LayerSpec::Conv2d { .. }, _) => Err(mismatch("spatial")),
            (LayerSpec::MaxPool { window, stride }, FrameShape::Spatial { h, w, c }) => Ok(FrameShape::Spatial {
                h: pool_output_size(h, window, stride)?,
                w: pool_output_size(w, window, stride)?,
                c,
            }),
            (LayerSpec::MaxPool { .. }, _) => Err(mismatch("spatial")),
            (LayerSpec::Relu, s) => Ok(s),
            (LayerSpec::Flatten, s) => Ok(FrameShape::Flat(s.len())),
            (LayerSpec::Fc { in_features, out_features }, FrameShape::Flat(n))
            | (LayerSpec::OutputHead { in_features, out_features }, FrameShape::Flat(n)) => {
                if n != in_features || out_features == 0 {
                    return Err(NnError::Spec(format!(
                        "{} in_features {in_features}/out {out_features} but input has {n}",
                        self.kind()
                    )));
                }
                Ok(FrameShape::Flat(out_features))
            }
            (LayerSpec::Fc { .. }, _) | (LayerSpec::OutputHead { .. }, _) => Err(mismatch("flat")),
            (LayerSpec::Gru { input_size, hidden_size, num_layers }, FrameShape::Flat(n)) => {
                if n != input_size || hidden_size == 0 || num_layers == 0 {
                    return Err(NnError::Spec(format!(
                        "gru input {input_size} hidden {hidden_size} layers {num_layers} on input {n}"
                    )));
                }
                Ok(FrameShape::Flat(hidden_size))
            }
            (LayerSpec::Gru { .. }, _) => Err(mismatch("flat")),
            (LayerSpec::ResidualBlock { in_channels, out_channels, stride }, FrameShape::Spatial { h, w, c }) => {
                if c != in_channels || out_channels == 0 {
                    return Err(NnError::Spec(format!("residual in_channels {in_channels} but input has {c}")));
                }
                let oh = conv_output_size(h, 3, stride, 1)?;
                let ow = conv_output_size(w, 3, stride, 1)?;
                if needs_projection(in_channels, out_channels, stride) {
                    let ph = conv_output_size(h, 1, stride, 0)?;
                    let pw = conv_output_size(w, 1, stride, 0)?;
                    if (ph, pw) != (oh, ow) {
                        return Err(NnError::Spec(format!(
                            "residual projection output {ph}x{pw} differs from block output {oh}x{ow}"
                        )));
                    }
                }
                Ok(FrameShape::Spatial { h: oh, w: ow, c: out_channels })
            }
            (LayerSpec::ResidualBlock { .. }, _) => Err(mismatch("spatial")),
        }
    }

    /// Canonical `kind key=value ...` form used in checkpoint metadata.
    pub fn encode(&self) -> String {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, padding } => format!(
                "conv2d in={in_channels} out={out_channels} kh={kernel_h} kw={kernel_w} stride={stride} pad={padding}"
            ),
            LayerSpec::MaxPool { window, stride } => format!("maxpool window={window} stride={stride}"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::Fc { in_features, out_features } => format!("fc in={in_features} out={out_features}"),
            LayerSpec::Gru { input_size, hidden_size, num_layers } => {
                format!("gru in={input_size} hidden={hidden_size} layers={num_layers}")
            }
            LayerSpec::ResidualBlock { in_channels, out_channels, stride } => {
                format!("residual in={in_channels} out={out_channels} stride={stride}")
            }
            LayerSpec::OutputHead { in_features, out_features } => {
                format!("head in={in_features} out={out_features}")
            }
        }
    }

    pub fn decode(text: &str) -> Result<Self, NnError> {
        let mut parts = text.split_whitespace();
        let kind = parts.next().ok_or_else(|| NnError::Spec("empty layer line".into()))?;
        let mut kv = std::collections::HashMap::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| NnError::Spec(format!("bad layer field '{p}'")))?;
            let v: usize = v.parse().map_err(|_| NnError::Spec(format!("bad number in '{p}'")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| NnError::Spec(format!("{kind}: missing field '{k}'")))
        };
        let spec = match kind {
            "conv2d" => LayerSpec::Conv2d {
                in_channels: get("in")?,
                out_channels: get("out")?,
                kernel_h: get("kh")?,
                kernel_w: get("kw")?,
                stride: get("stride")?,
                padding: get("pad")?,
            },
            "maxpool" => LayerSpec::MaxPool { window: get("window")?, stride: get("stride")? },
            "relu" => LayerSpec::Relu,
            "flatten" => LayerSpec::Flatten,
            "fc" => LayerSpec::Fc { in_features: get("in")?, out_features: get("out")? },
            "gru" => LayerSpec::Gru {
                input_size: get("in")?,
                hidden_size: get("hidden")?,
                num_layers: get("layers")?,
            },
            "residual" => LayerSpec::ResidualBlock {
                in_channels: get("in")?,
                out_channels: get("out")?,
                stride: get("stride")?,
            },
            "head" => LayerSpec::OutputHead { in_features: get("in")?, out_features: get("out")? },
            other => return Err(NnError::Spec(format!("unknown layer kind '{other}'"))),
        };
        Ok(spec)
    }
}

pub(crate) fn needs_projection(in_channels: usize, out_channels: usize, stride: usize) -> bool {
    in_channels != out_channels || stride != 1
}

/// A named stack of layers over square RGB frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: String,
    pub input_size: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn input_shape(&self) -> FrameShape {
        FrameShape::Spatial { h: self.input_size, w: self.input_size, c: 3 }
    }

    /// Shape after every layer; validates the whole stack.
    pub fn infer_shapes(&self) -> Result<Vec<FrameShape>, NnError> {
        if self.layers.is_empty() {
            return Err(NnError::Spec("model has no layers".into()));
        }
        let gru_count = self.layers.iter().filter(|l| matches!(l, LayerSpec::Gru { .. })).count();
        if gru_count > 1 {
            return Err(NnError::Spec("at most one gru layer is supported".into()));
        }
        match self.layers.last() {
            Some(LayerSpec::OutputHead { out_features: OUTPUT_DIM, .. }) => {}
            _ => {
                return Err(NnError::Spec(format!(
                    "the last layer must be an output head with {OUTPUT_DIM} outputs"
                )))
            }
        }
        if self.layers[..self.layers.len() - 1]
            .iter()
            .any(|l| matches!(l, LayerSpec::OutputHead { .. }))
        {
            return Err(NnError::Spec("output head must be the last layer".into()));
        }
        let mut shape = self.input_shape();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .propagate(shape)
                .map_err(|e| NnError::Spec(format!("layer {i} ({}): {e}", layer.kind())))?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        self.infer_shapes().map(|_| ())
    }

    /// Output shape of the convolutional stack: the last spatial shape.
    pub fn conv_output_shape(&self) -> Result<FrameShape, NnError> {
        let shapes = self.infer_shapes()?;
        shapes
            .into_iter()
            .rev()
            .find(|s| matches!(s, FrameShape::Spatial { .. }))
            .ok_or_else(|| NnError::Spec("model has no spatial layers".into()))
    }

    pub fn output_dim(&self) -> Result<usize, NnError> {
        Ok(self.infer_shapes()?.last().map_or(0, FrameShape::len))
    }

    pub fn has_sequence_head(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Gru { .. }))
    }

    pub fn preset_names() -> &'static [&'static str] {
        &[
            "vgg16-gru",
            "alexnet-gru",
            "resnet-gru",
            "vgg16",
            "alexnet",
            "resnet",
            "vgg-mini-gru",
            "alexnet-mini-gru",
            "resnet-mini-gru",
            "vgg-mini",
            "alexnet-mini",
            "resnet-mini",
        ]
    }

    /// Preset at its default input size (96 for full models, 16 for minis).
    pub fn preset(name: &str) -> Result<Self, NnError> {
        let size = if name.contains("mini") { 16 } else { 96 };
        Self::preset_with_input(name, size)
    }

    pub fn preset_with_input(name: &str, input_size: usize) -> Result<Self, NnError> {
        let (base, gru) = match name.strip_suffix("-gru") {
            Some(base) => (base, true),
            None => (name, false),
        };
        let mut b = StackBuilder::new(input_size);
        match base {
            "vgg16" => {
                for (i, &(channels, convs)) in [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)].iter().enumerate() {
                    for _ in 0..convs {
                        b.conv(channels, 3, 1, 1).relu();
                    }
                    if i < 4 {
                        b.pool(2, 2);
                    } else {
                        b.pool(3, 1);
                    }
                }
                b.flatten().fc(4096).relu();
                b.recurrent_head(gru, DEFAULT_GRU_HIDDEN);
            }
            "alexnet" => {
                b.conv(96, 11, 3, 1).relu().pool(3, 2);
                b.conv(256, 5, 1, 2).relu().pool(3, 2);
                b.conv(384, 3, 1, 1).relu();
                b.conv(384, 3, 1, 1).relu();
                b.conv(256, 3, 1, 1).relu().pool(3, 1);
                b.flatten().fc(4096).relu().fc(4096).relu();
                b.recurrent_head(gru, DEFAULT_GRU_HIDDEN);
            }
            "resnet" => {
                b.conv(64, 7, 1, 3).relu().pool(2, 2);
                for channels in [64, 128, 256, 512] {
                    b.residual(channels, 1).relu();
                    b.residual(channels, 1).relu();
                    b.pool(2, 2);
                }
                b.flatten();
                b.recurrent_head(gru, DEFAULT_GRU_HIDDEN);
            }
            "vgg-mini" => {
                b.conv(8, 3, 1, 1).relu().conv(8, 3, 1, 1).relu().pool(2, 2);
                b.conv(16, 3, 1, 1).relu().conv(16, 3, 1, 1).relu().pool(2, 2);
                b.flatten().fc(32).relu();
                b.recurrent_head(gru, 32);
            }
            "alexnet-mini" => {
                b.conv(8, 5, 1, 2).relu().pool(2, 2);
                b.conv(16, 3, 1, 1).relu().pool(2, 2);
                b.conv(16, 3, 1, 1).relu();
                b.flatten().fc(32).relu().fc(32).relu();
                b.recurrent_head(gru, 32);
            }
            "resnet-mini" => {
                b.conv(8, 3, 1, 1).relu();
                b.residual(8, 1).relu().pool(2, 2);
                b.residual(16, 1).relu().pool(2, 2);
                b.flatten();
                b.recurrent_head(gru, 32);
            }
            _ => {
                return Err(NnError::Spec(format!(
                    "unknown preset '{name}' (known: {})",
                    Self::preset_names().join(", ")
                )))
            }
        }
        let spec = ModelSpec { name: name.to_string(), input_size, layers: b.finish()? };
        spec.validate()?;
        Ok(spec)
    }

    /// `key = value` metadata lines.
    pub fn encode(&self) -> String {
        let mut out = format!("model.name = {}\nmodel.input_size = {}\n", self.name, self.input_size);
        for layer in &self.layers {
            out.push_str("model.layer = ");
            out.push_str(&layer.encode());
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} (input {}x{}x3)", self.name, self.input_size, self.input_size)?;
        let shapes = self.infer_shapes().map_err(|_| fmt::Error)?;
        for (layer, shape) in self.layers.iter().zip(shapes) {
            writeln!(f, "  {:<60} -> {:?}", layer.encode(), shape.dims())?;
        }
        Ok(())
    }
}

/// Appends layers while tracking the running shape so channel and feature
/// counts are filled in automatically.
struct StackBuilder {
    shape: FrameShape,
    layers: Vec<LayerSpec>,
    error: Option<NnError>,
}

impl StackBuilder {
    fn new(input_size: usize) -> Self {
        Self {
            shape: FrameShape::Spatial { h: input_size, w: input_size, c: 3 },
            layers: Vec::new(),
            error: None,
        }
    }

    fn push(&mut self, layer: LayerSpec) -> &mut Self {
        if self.error.is_none() {
            match layer.propagate(self.shape) {
                Ok(s) => {
                    self.shape = s;
                    self.layers.push(layer);
                }
                Err(e) => self.error = Some(e),
            }
        }
        self
    }

    fn channels(&self) -> usize {
        match self.shape {
            FrameShape::Spatial { c, .. } => c,
            FrameShape::Flat(n) => n,
        }
    }

    fn conv(&mut self, out: usize, k: usize, stride: usize, padding: usize) -> &mut Self {
        let in_channels = self.channels();
        self.push(LayerSpec::Conv2d { in_channels, out_channels: out, kernel_h: k, kernel_w: k, stride, padding })
    }

    fn relu(&mut self) -> &mut Self {
        self.push(LayerSpec::Relu)
    }

    fn pool(&mut self, window: usize, stride: usize) -> &mut Self {
        self.push(LayerSpec::MaxPool { window, stride })
    }

    fn flatten(&mut self) -> &mut Self {
        self.push(LayerSpec::Flatten)
    }

    fn fc(&mut self, out: usize) -> &mut Self {
        let in_features = self.shape.len();
        self.push(LayerSpec::Fc { in_features, out_features: out })
    }

    fn residual(&mut self, out: usize, stride: usize) -> &mut Self {
        let in_channels = self.channels();
        self.push(LayerSpec::ResidualBlock { in_channels, out_channels: out, stride })
    }

    fn recurrent_head(&mut self, gru: bool, hidden: usize) -> &mut Self {
        if gru {
            let input_size = self.shape.len();
            self.push(LayerSpec::Gru { input_size, hidden_size: hidden, num_layers: DEFAULT_GRU_LAYERS });
        }
        let in_features = self.shape.len();
        self.push(LayerSpec::OutputHead { in_features, out_features: OUTPUT_DIM })
    }

    fn finish(self) -> Result<Vec<LayerSpec>, NnError> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.layers),
        }
    }
}
