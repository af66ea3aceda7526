//! Named architectures, sized from the dataset's sample shape and class count.
//!
//! * `mlp-d<D>-w<W>`: `D` hidden dense layers of width `W`.
//! * `smallconv-c<N>`: `N` 3×3 conv layers (8 then 16 channels) with one
//!   max-pool, global average pooling and a dense head.
//! * `resnet-mini`: conv stem and two residual blocks of conv + batch-norm.

use crate::engine::{LayerKind, LayerSpec, NetworkSpec, PoolKind, DEFAULT_BN_EPS};
use crate::error::{Error, Result};
use crate::rectifiers::ActivationKind;

pub fn architecture(name: &str, input_shape: &[usize], classes: usize, act: ActivationKind) -> Result<NetworkSpec> {
    let bad = |m: String| Error::Config(format!("architecture `{name}`: {m}"));
    if let Some(rest) = name.strip_prefix("mlp-d") {
        let (d, w) = rest
            .split_once("-w")
            .and_then(|(d, w)| Some((d.parse::<usize>().ok()?, w.parse::<usize>().ok()?)))
            .ok_or_else(|| bad("expected mlp-d<depth>-w<width>".into()))?;
        if d == 0 || w == 0 {
            return Err(bad("depth and width must be positive".into()));
        }
        return Ok(mlp(input_shape, d, w, classes, act));
    }
    if let Some(rest) = name.strip_prefix("smallconv-c") {
        let n: usize = rest.parse().map_err(|_| bad("expected smallconv-c<layers>".into()))?;
        let spec = small_conv(input_shape, n, classes, act)?;
        spec.validate()?;
        return Ok(spec);
    }
    if name == "resnet-mini" {
        let spec = resnet_mini(input_shape, classes, act)?;
        spec.validate()?;
        return Ok(spec);
    }
    Err(bad("unknown preset".into()))
}

/// Dense network `input → hidden × depth → classes`; hidden layers are
/// named `fc1..fcD`, the head `out`.
pub fn mlp(input_shape: &[usize], depth: usize, width: usize, classes: usize, act: ActivationKind) -> NetworkSpec {
    let features: usize = input_shape.iter().product();
    let mut layers = Vec::new();
    let mut input = vec![features];
    if input_shape.len() > 1 {
        layers.push(LayerSpec::new("flat", LayerKind::Flatten, None));
    } else {
        input = input_shape.to_vec();
    }
    let mut fan_in = input[0];
    for i in 1..=depth {
        layers.push(LayerSpec::dense(&format!("fc{i}"), fan_in, width, Some(act)));
        fan_in = width;
    }
    layers.push(LayerSpec::dense("out", fan_in, classes, None));
    NetworkSpec::new(input_shape.to_vec(), layers)
}

fn image_channels(input_shape: &[usize]) -> Result<usize> {
    match input_shape {
        [c, _, _] => Ok(*c),
        other => Err(Error::Config(format!("conv presets need C×H×W inputs, got {other:?}"))),
    }
}

fn small_conv(input_shape: &[usize], n: usize, classes: usize, act: ActivationKind) -> Result<NetworkSpec> {
    let mut c = image_channels(input_shape)?;
    if n == 0 {
        return Err(Error::Config("smallconv needs at least one conv layer".into()));
    }
    let mut layers = Vec::new();
    for i in 1..=n {
        let out = if i <= n.div_ceil(2) { 8 } else { 16 };
        layers.push(LayerSpec::conv(&format!("conv{i}"), c, out, 3, 1, Some(act)));
        c = out;
        if i == n.div_ceil(2) {
            layers.push(LayerSpec::new("pool", LayerKind::Pool { kind: PoolKind::Max, size: 2 }, None));
        }
    }
    layers.push(LayerSpec::new("gap", LayerKind::Pool { kind: PoolKind::Global, size: 1 }, None));
    layers.push(LayerSpec::new("flat", LayerKind::Flatten, None));
    layers.push(LayerSpec::dense("out", c, classes, None));
    Ok(NetworkSpec::new(input_shape.to_vec(), layers))
}

fn bn(id: &str, channels: usize, act: Option<ActivationKind>) -> LayerSpec {
    LayerSpec::new(
        id,
        LayerKind::BatchNorm {
            channels,
            eps: DEFAULT_BN_EPS,
        },
        act,
    )
}

fn resnet_mini(input_shape: &[usize], classes: usize, act: ActivationKind) -> Result<NetworkSpec> {
    let c = image_channels(input_shape)?;
    let width = 8;
    let mut layers = vec![
        LayerSpec::conv("stem", c, width, 3, 1, None),
        bn("stem_bn", width, Some(act)),
    ];
    for b in 1..=2 {
        let tag = format!("block{b}");
        layers.push(LayerSpec::new(format!("{tag}_in"), LayerKind::ResidualBegin { tag: tag.clone() }, None));
        layers.push(LayerSpec::conv(&format!("{tag}_conv1"), width, width, 3, 1, None));
        layers.push(bn(&format!("{tag}_bn1"), width, Some(act)));
        layers.push(LayerSpec::conv(&format!("{tag}_conv2"), width, width, 3, 1, None));
        layers.push(bn(&format!("{tag}_bn2"), width, None));
        layers.push(LayerSpec::new(format!("{tag}_out"), LayerKind::ResidualEnd { tag }, Some(act)));
    }
    layers.push(LayerSpec::new("gap", LayerKind::Pool { kind: PoolKind::Global, size: 1 }, None));
    layers.push(LayerSpec::new("flat", LayerKind::Flatten, None));
    layers.push(LayerSpec::dense("out", width, classes, None));
    Ok(NetworkSpec::new(input_shape.to_vec(), layers))
}
