//! Architecture description: an ordered list of layers with optional
//! residual skip edges, and a line-oriented text form.
//!
//! Text grammar, one item per line (`#` starts a comment):
//!
//! ```text
//! input 1x28x28
//! <id> dense in=<n> out=<n> [bias=true|false] [act=<activation>]
//! <id> conv2d in=<c> out=<c> k=<n> [stride=1] [pad=0] [bias=true|false] [act=<activation>]
//! <id> batchnorm c=<n> [eps=1e-5] [act=<activation>]
//! <id> pool max|avg|global [size=<n>]
//! <id> flatten
//! <id> residual_begin tag=<tag>
//! <id> residual_end tag=<tag> [act=<activation>]
//! ```
//!
//! Activation keywords: `relu`, `leakyrelu`, `leakyrelu(<slope>)`, `prelu`,
//! `gelu`, `silu`, `identity`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rectifiers::ActivationKind;

pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    /// Non-overlapping `size`×`size` max pooling.
    Max,
    /// Non-overlapping `size`×`size` average pooling.
    Avg,
    /// Average over the whole feature map, output `C×1×1`.
    Global,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
    },
    Pool {
        kind: PoolKind,
        size: usize,
    },
    Flatten,
    ResidualBegin {
        tag: String,
    },
    ResidualEnd {
        tag: String,
    },
}

impl LayerKind {
    /// Dense, Conv2d and BatchNorm (at inference) are affine maps.
    pub fn is_affine(&self) -> bool {
        matches!(
            self,
            LayerKind::Dense { .. } | LayerKind::Conv2d { .. } | LayerKind::BatchNorm { .. }
        )
    }

    fn accepts_activation(&self) -> bool {
        self.is_affine() || matches!(self, LayerKind::ResidualEnd { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Pool { .. } => "pool",
            LayerKind::Flatten => "flatten",
            LayerKind::ResidualBegin { .. } => "residual_begin",
            LayerKind::ResidualEnd { .. } => "residual_end",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub activation: Option<ActivationKind>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind, activation: Option<ActivationKind>) -> Self {
        LayerSpec {
            id: id.into(),
            kind,
            activation,
        }
    }

    pub fn dense(id: &str, inputs: usize, outputs: usize, act: Option<ActivationKind>) -> Self {
        Self::new(
            id,
            LayerKind::Dense {
                inputs,
                outputs,
                bias: true,
            },
            act,
        )
    }

    pub fn conv(
        id: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        act: Option<ActivationKind>,
    ) -> Self {
        Self::new(
            id,
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride: 1,
                padding,
                bias: true,
            },
            act,
        )
    }

    /// True when the layer carries a rectifier (anything but identity/none).
    pub fn has_rectifier(&self) -> bool {
        self.activation.is_some_and(ActivationKind::is_rectifier)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// Per-sample input shape, without the batch axis.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        NetworkSpec {
            input_shape,
            layers,
        }
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    /// Ids of rectifier-activated layers in forward order. The final layer
    /// (the output layer) is never eligible.
    pub fn eligible_layers(&self) -> Vec<String> {
        let last = self.layers.len().saturating_sub(1);
        self.layers
            .iter()
            .enumerate()
            .filter(|(i, l)| *i != last && l.has_rectifier())
            .map(|(_, l)| l.id.clone())
            .collect()
    }

    /// Checks ids, residual pairing and shape compatibility; returns the
    /// per-sample output shape of every layer.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::shape(
                "input",
                format!("invalid input shape {:?}", self.input_shape),
            ));
        }
        if self.layers.is_empty() {
            return Err(Error::shape("network", "no layers"));
        }
        let mut seen = HashSet::new();
        let mut open: Vec<(String, Vec<usize>)> = Vec::new();
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let id = layer.id.as_str();
            if id.is_empty() || id.contains(char::is_whitespace) || id.contains('/') {
                return Err(Error::shape(id, "layer ids must be non-empty without spaces or '/'"));
            }
            if !seen.insert(id) {
                return Err(Error::shape(id, "duplicate layer id"));
            }
            if layer.activation.is_some() && !layer.kind.accepts_activation() {
                return Err(Error::shape(id, format!("{} takes no activation", layer.kind.name())));
            }
            if let Some(ActivationKind::LeakyReLU { slope }) = layer.activation {
                if !(slope > 0.0 && slope < 1.0) {
                    return Err(Error::shape(id, format!("leakyrelu slope {slope} outside (0, 1)")));
                }
            }
            shape = match &layer.kind {
                LayerKind::Dense {
                    inputs, outputs, ..
                } => {
                    if shape != [*inputs] {
                        return Err(Error::shape(
                            id,
                            format!("dense expects [{inputs}], got {shape:?}"),
                        ));
                    }
                    if *outputs == 0 {
                        return Err(Error::shape(id, "zero outputs"));
                    }
                    vec![*outputs]
                }
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if shape.len() != 3 || shape[0] != *in_channels {
                        return Err(Error::shape(
                            id,
                            format!("conv2d expects [{in_channels}, H, W], got {shape:?}"),
                        ));
                    }
                    if *kernel == 0 || *stride == 0 || *out_channels == 0 {
                        return Err(Error::shape(id, "kernel, stride and channels must be positive"));
                    }
                    let (h, w) = (shape[1] + 2 * padding, shape[2] + 2 * padding);
                    if h < *kernel || w < *kernel {
                        return Err(Error::shape(
                            id,
                            format!("kernel {kernel} larger than padded input {h}x{w}"),
                        ));
                    }
                    vec![
                        *out_channels,
                        (h - kernel) / stride + 1,
                        (w - kernel) / stride + 1,
                    ]
                }
                LayerKind::BatchNorm { channels, eps } => {
                    if shape[0] != *channels || !(shape.len() == 1 || shape.len() == 3) {
                        return Err(Error::shape(
                            id,
                            format!("batchnorm over {channels} channels got {shape:?}"),
                        ));
                    }
                    if !(*eps >= 0.0) {
                        return Err(Error::shape(id, "negative eps"));
                    }
                    shape
                }
                LayerKind::Pool { kind, size } => {
                    if shape.len() != 3 {
                        return Err(Error::shape(id, format!("pool expects [C, H, W], got {shape:?}")));
                    }
                    match kind {
                        PoolKind::Global => vec![shape[0], 1, 1],
                        _ => {
                            if *size == 0 || shape[1] < *size || shape[2] < *size {
                                return Err(Error::shape(
                                    id,
                                    format!("pool size {size} does not fit {shape:?}"),
                                ));
                            }
                            vec![shape[0], shape[1] / size, shape[2] / size]
                        }
                    }
                }
                LayerKind::Flatten => vec![shape.iter().product()],
                LayerKind::ResidualBegin { tag } => {
                    if open.iter().any(|(t, _)| t == tag) {
                        return Err(Error::shape(id, format!("residual tag `{tag}` already open")));
                    }
                    open.push((tag.clone(), shape.clone()));
                    shape
                }
                LayerKind::ResidualEnd { tag } => match open.pop() {
                    Some((t, skip)) if &t == tag => {
                        if skip != shape {
                            return Err(Error::shape(
                                id,
                                format!("residual `{tag}` joins {skip:?} with {shape:?}"),
                            ));
                        }
                        shape
                    }
                    Some((t, _)) => {
                        return Err(Error::shape(
                            id,
                            format!("residual_end `{tag}` closes open block `{t}`"),
                        ))
                    }
                    None => {
                        return Err(Error::shape(id, format!("residual_end `{tag}` without begin")))
                    }
                },
            };
            shapes.push(shape.clone());
        }
        if let Some((tag, _)) = open.pop() {
            return Err(Error::shape("network", format!("residual `{tag}` never closed")));
        }
        if shape.len() != 1 {
            return Err(Error::shape(
                self.layers.last().map_or("network", |l| l.id.as_str()),
                format!("output must be a logits vector, got {shape:?}"),
            ));
        }
        Ok(shapes)
    }

    /// Number of output classes (size of the final layer's output).
    pub fn classes(&self) -> Result<usize> {
        Ok(self.validate()?.last().map_or(0, |s| s[0]))
    }

    /// Parameter shapes declared by each layer, keyed by parameter name.
    pub fn param_shapes(&self, layer: &LayerSpec) -> BTreeMap<&'static str, Vec<usize>> {
        let mut out = BTreeMap::new();
        match &layer.kind {
            LayerKind::Dense {
                inputs,
                outputs,
                bias,
            } => {
                out.insert("weight", vec![*outputs, *inputs]);
                if *bias {
                    out.insert("bias", vec![*outputs]);
                }
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                out.insert("weight", vec![*out_channels, *in_channels, *kernel, *kernel]);
                if *bias {
                    out.insert("bias", vec![*out_channels]);
                }
            }
            LayerKind::BatchNorm { channels, .. } => {
                for name in ["gamma", "beta", "running_mean", "running_var"] {
                    out.insert(name, vec![*channels]);
                }
            }
            _ => {}
        }
        if layer.activation == Some(ActivationKind::PReLU) {
            out.insert("slope", vec![1]);
        }
        out
    }

    /// Parses the text form described in the module docs.
    pub fn parse(text: &str) -> Result<Self> {
        text.parse()
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.id, self.kind.name())?;
        match &self.kind {
            LayerKind::Dense {
                inputs,
                outputs,
                bias,
            } => write!(f, " in={inputs} out={outputs} bias={bias}")?,
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
            } => write!(
                f,
                " in={in_channels} out={out_channels} k={kernel} stride={stride} pad={padding} bias={bias}"
            )?,
            LayerKind::BatchNorm { channels, eps } => write!(f, " c={channels} eps={eps}")?,
            LayerKind::Pool { kind, size } => {
                let k = match kind {
                    PoolKind::Max => "max",
                    PoolKind::Avg => "avg",
                    PoolKind::Global => "global",
                };
                write!(f, " {k} size={size}")?
            }
            LayerKind::Flatten => {}
            LayerKind::ResidualBegin { tag } | LayerKind::ResidualEnd { tag } => {
                write!(f, " tag={tag}")?
            }
        }
        if let Some(act) = self.activation {
            write!(f, " act={act}")?;
        }
        Ok(())
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.input_shape.iter().map(ToString::to_string).collect();
        writeln!(f, "input {}", dims.join("x"))?;
        for layer in &self.layers {
            writeln!(f, "{layer}")?;
        }
        Ok(())
    }
}

/// Parses `1x28x28` or `2` into a shape.
pub fn parse_shape(text: &str) -> Option<Vec<usize>> {
    text.split('x')
        .map(|d| d.trim().parse::<usize>().ok().filter(|&v| v > 0))
        .collect()
}

fn parse_layer_line(line: &str, lineno: usize) -> Result<LayerSpec> {
    let err = |reason: String| Error::Spec {
        line: lineno,
        reason,
    };
    let mut tokens = line.split_whitespace();
    let id = tokens.next().ok_or_else(|| err("empty line".into()))?;
    let kind = tokens.next().ok_or_else(|| err(format!("layer `{id}` has no kind")))?;
    let mut positional = Vec::new();
    let mut keys: BTreeMap<&str, &str> = BTreeMap::new();
    for tok in tokens {
        match tok.split_once('=') {
            Some((k, v)) => {
                if keys.insert(k, v).is_some() {
                    return Err(err(format!("duplicate key `{k}`")));
                }
            }
            None => positional.push(tok),
        }
    }
    let mut take = |k: &str| keys.remove(k);
    let usize_key = |v: Option<&str>, k: &str, default: Option<usize>| -> Result<usize> {
        match v {
            Some(v) => v.parse().map_err(|_| err(format!("bad integer for `{k}`: `{v}`"))),
            None => default.ok_or_else(|| err(format!("missing `{k}=`"))),
        }
    };
    let bool_key = |v: Option<&str>| -> Result<bool> {
        match v {
            None | Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(err(format!("bad bool `{v}`"))),
        }
    };
    let activation = match take("act") {
        Some(a) => Some(a.parse::<ActivationKind>().map_err(err)?),
        None => None,
    };
    let kind = match kind {
        "dense" => LayerKind::Dense {
            inputs: usize_key(take("in"), "in", None)?,
            outputs: usize_key(take("out"), "out", None)?,
            bias: bool_key(take("bias"))?,
        },
        "conv2d" => LayerKind::Conv2d {
            in_channels: usize_key(take("in"), "in", None)?,
            out_channels: usize_key(take("out"), "out", None)?,
            kernel: usize_key(take("k"), "k", None)?,
            stride: usize_key(take("stride"), "stride", Some(1))?,
            padding: usize_key(take("pad"), "pad", Some(0))?,
            bias: bool_key(take("bias"))?,
        },
        "batchnorm" => LayerKind::BatchNorm {
            channels: usize_key(take("c"), "c", None)?,
            eps: match take("eps") {
                Some(v) => v.parse().map_err(|_| err(format!("bad eps `{v}`")))?,
                None => DEFAULT_BN_EPS,
            },
        },
        "pool" => {
            let kind = match positional.pop() {
                Some("max") => PoolKind::Max,
                Some("avg") => PoolKind::Avg,
                Some("global") => PoolKind::Global,
                other => return Err(err(format!("bad pool kind {other:?}"))),
            };
            LayerKind::Pool {
                kind,
                size: usize_key(take("size"), "size", Some(2))?,
            }
        }
        "flatten" => LayerKind::Flatten,
        "residual_begin" | "residual_end" => {
            let tag = take("tag")
                .ok_or_else(|| err("missing `tag=`".into()))?
                .to_string();
            if kind == "residual_begin" {
                LayerKind::ResidualBegin { tag }
            } else {
                LayerKind::ResidualEnd { tag }
            }
        }
        other => return Err(err(format!("unknown layer kind `{other}`"))),
    };
    if let Some(extra) = positional.first() {
        return Err(err(format!("unexpected token `{extra}`")));
    }
    if let Some(k) = keys.keys().next() {
        return Err(err(format!("unknown key `{k}`")));
    }
    Ok(LayerSpec {
        id: id.to_string(),
        kind,
        activation,
    })
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_layer_line(s, 1)
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut input_shape = None;
        let mut layers = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("input ") {
                let shape = parse_shape(rest.trim()).ok_or_else(|| Error::Spec {
                    line: i + 1,
                    reason: format!("bad input shape `{rest}`"),
                })?;
                input_shape = Some(shape);
                continue;
            }
            layers.push(parse_layer_line(line, i + 1)?);
        }
        let input_shape = input_shape.ok_or_else(|| Error::Spec {
            line: 0,
            reason: "missing `input` line".into(),
        })?;
        let spec = NetworkSpec {
            input_shape,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }
}
