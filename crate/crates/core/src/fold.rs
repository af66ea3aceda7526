//! Folding chains of activation-free affine layers into single layers.
//!
//! A chain is a maximal run of Dense, Conv2d and BatchNorm layers where
//! every layer but the last has no activation (or the identity). Pool,
//! Flatten and residual markers end a chain. Batch norm folds with its
//! frozen running statistics, so the folded network matches the original
//! in [`Mode::Eval`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost;
use crate::engine::{bn_affine, LayerKind, LayerSpec, Mode, Network, NetworkSpec, ParamMap};
use crate::error::{Error, Result};
use crate::rectifiers::ActivationKind;
use crate::tensor::Tensor;

/// Inputs drawn when measuring how far a folded network drifts.
pub const EQUIVALENCE_SAMPLES: usize = 100;
pub const EQUIVALENCE_SEED: u64 = 0xf01d;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionPolicy {
    #[default]
    Always,
    /// Skip chains whose replacement would cost more FLOPs.
    OnlyIfCheaper,
}

impl fmt::Display for FusionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionPolicy::Always => "always",
            FusionPolicy::OnlyIfCheaper => "only-if-cheaper",
        })
    }
}

impl FromStr for FusionPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "always" => Ok(FusionPolicy::Always),
            "only-if-cheaper" => Ok(FusionPolicy::OnlyIfCheaper),
            _ => Err(Error::Config(format!("unknown fusion policy `{s}`"))),
        }
    }
}

/// `y = W x + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMap {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

/// Cross-correlation with kernel `[out, in, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvMap {
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

/// `y[c] = scale[c]·x[c] + shift[c]`, which is what batch norm computes at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMap {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl ChannelMap {
    pub fn from_batchnorm(gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Self {
        let scale: Vec<f64> = gamma.iter().zip(var).map(|(g, v)| g / (v + eps).sqrt()).collect();
        let shift = beta.iter().zip(mean).zip(&scale).map(|((b, m), s)| b - m * s).collect();
        ChannelMap { scale, shift }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AffineMap {
    Dense(DenseMap),
    Conv(ConvMap),
    Channel(ChannelMap),
}

/// Which side of its neighbor a batch norm sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnSide {
    Before,
    After,
}

fn mismatch(what: &str, a: usize, b: usize) -> Error {
    Error::NotFoldable(format!("{what}: {a} vs {b}"))
}

/// `w = w2·w1`, `b = w2·b1 + b2`.
pub fn fold_dense(first: &DenseMap, second: &DenseMap) -> Result<DenseMap> {
    let (o1, i1) = (first.weight.shape()[0], first.weight.shape()[1]);
    let (o2, i2) = (second.weight.shape()[0], second.weight.shape()[1]);
    if o1 != i2 {
        return Err(mismatch("inner dimensions", o1, i2));
    }
    let (w1, w2) = (first.weight.data(), second.weight.data());
    let mut w = vec![0.0; o2 * i1];
    let mut b = second.bias.clone();
    for r in 0..o2 {
        for k in 0..o1 {
            let a = w2[r * o1 + k];
            for c in 0..i1 {
                w[r * i1 + c] += a * w1[k * i1 + c];
            }
            b[r] += a * first.bias[k];
        }
    }
    Ok(DenseMap {
        weight: Tensor::new(vec![o2, i1], w)?,
        bias: b,
    })
}

/// Composes two convolutions into one with kernel size `k1 + k2 − 1`.
///
/// Needs stride 1 on both sides. The second layer must not pad: its zero
/// border would sit where the fused layer sees the first layer's response
/// to padding, so the two would disagree near the edges.
pub fn fold_conv(first: &ConvMap, second: &ConvMap) -> Result<ConvMap> {
    if first.stride != 1 || second.stride != 1 {
        return Err(Error::NotFoldable(format!(
            "conv strides {} and {}; only stride 1 folds",
            first.stride, second.stride
        )));
    }
    if second.padding != 0 {
        return Err(Error::NotFoldable(format!(
            "second conv pads by {}; only an unpadded second conv folds exactly",
            second.padding
        )));
    }
    let s1 = first.weight.shape();
    let s2 = second.weight.shape();
    let (mid, cin, k1) = (s1[0], s1[1], s1[2]);
    let (cout, k2) = (s2[0], s2[2]);
    if s2[1] != mid {
        return Err(mismatch("channels", mid, s2[1]));
    }
    let k = k1 + k2 - 1;
    let (w1, w2) = (first.weight.data(), second.weight.data());
    let mut w = vec![0.0; cout * cin * k * k];
    let mut b = second.bias.clone();
    for o in 0..cout {
        for c in 0..mid {
            for u in 0..k2 {
                for v in 0..k2 {
                    let a = w2[((o * mid + c) * k2 + u) * k2 + v];
                    if a == 0.0 {
                        continue;
                    }
                    b[o] += a * first.bias[c];
                    for i in 0..cin {
                        for p in 0..k1 {
                            let src = ((c * cin + i) * k1 + p) * k1;
                            let dst = ((o * cin + i) * k + u + p) * k + v;
                            for q in 0..k1 {
                                w[dst + q] += a * w1[src + q];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvMap {
        weight: Tensor::new(vec![cout, cin, k, k], w)?,
        bias: b,
        stride: 1,
        padding: first.padding,
    })
}

/// Merges a per-channel affine map into a neighboring Dense or Conv2d.
pub fn fold_batchnorm(bn: &ChannelMap, neighbor: &AffineMap, side: BnSide) -> Result<AffineMap> {
    let bn = AffineMap::Channel(bn.clone());
    match side {
        BnSide::Before => compose(&bn, neighbor),
        BnSide::After => compose(neighbor, &bn),
    }
}

/// The affine map equal to applying `first` and then `second`.
pub fn compose(first: &AffineMap, second: &AffineMap) -> Result<AffineMap> {
    use AffineMap::*;
    Ok(match (first, second) {
        (Dense(a), Dense(b)) => Dense(fold_dense(a, b)?),
        (Conv(a), Conv(b)) => Conv(fold_conv(a, b)?),
        (Channel(a), Channel(b)) => {
            if a.scale.len() != b.scale.len() {
                return Err(mismatch("channels", a.scale.len(), b.scale.len()));
            }
            Channel(ChannelMap {
                scale: a.scale.iter().zip(&b.scale).map(|(x, y)| x * y).collect(),
                shift: a.shift.iter().zip(&b.scale).zip(&b.shift).map(|((t, s), u)| s * t + u).collect(),
            })
        }
        (Dense(d), Channel(c)) => {
            let (o, i) = (d.weight.shape()[0], d.weight.shape()[1]);
            if o != c.scale.len() {
                return Err(mismatch("channels", o, c.scale.len()));
            }
            let mut w = d.weight.clone();
            scale_rows(w.data_mut(), &c.scale, i);
            Dense(DenseMap {
                weight: w,
                bias: (0..o).map(|r| c.scale[r] * d.bias[r] + c.shift[r]).collect(),
            })
        }
        (Conv(k), Channel(c)) => {
            let s = k.weight.shape();
            if s[0] != c.scale.len() {
                return Err(mismatch("channels", s[0], c.scale.len()));
            }
            let per_out = s[1] * s[2] * s[3];
            let mut w = k.weight.clone();
            scale_rows(w.data_mut(), &c.scale, per_out);
            Conv(ConvMap {
                weight: w,
                bias: (0..s[0]).map(|r| c.scale[r] * k.bias[r] + c.shift[r]).collect(),
                ..k.clone()
            })
        }
        (Channel(c), Dense(d)) => {
            let (o, i) = (d.weight.shape()[0], d.weight.shape()[1]);
            if i != c.scale.len() {
                return Err(mismatch("channels", c.scale.len(), i));
            }
            let (w, b) = scale_inputs(d.weight.data(), &d.bias, c, o, i, 1);
            Dense(DenseMap {
                weight: Tensor::new(vec![o, i], w)?,
                bias: b,
            })
        }
        (Channel(c), Conv(k)) => {
            if k.padding != 0 {
                return Err(Error::NotFoldable(format!(
                    "batch norm before a conv padded by {}; the shift would leak into the border",
                    k.padding
                )));
            }
            let s = k.weight.shape();
            if s[1] != c.scale.len() {
                return Err(mismatch("channels", c.scale.len(), s[1]));
            }
            let (w, b) = scale_inputs(k.weight.data(), &k.bias, c, s[0], s[1], s[2] * s[3]);
            Conv(ConvMap {
                weight: Tensor::new(s.to_vec(), w)?,
                bias: b,
                ..k.clone()
            })
        }
        (Dense(_), Conv(_)) | (Conv(_), Dense(_)) => {
            return Err(Error::NotFoldable("dense and conv are not adjacent without a flatten".into()))
        }
    })
}

fn scale_rows(w: &mut [f64], scale: &[f64], row: usize) {
    for (r, chunk) in w.chunks_mut(row).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= scale[r]);
    }
}

/// Weights `[out, in, taps]` acting on `scale·x + shift`.
fn scale_inputs(w: &[f64], bias: &[f64], c: &ChannelMap, out: usize, inp: usize, taps: usize) -> (Vec<f64>, Vec<f64>) {
    let mut w = w.to_vec();
    let mut b = bias.to_vec();
    for (o, bo) in b.iter_mut().enumerate().take(out) {
        for i in 0..inp {
            let base = (o * inp + i) * taps;
            for v in &mut w[base..base + taps] {
                *bo += *v * c.shift[i];
                *v *= c.scale[i];
            }
        }
    }
    (w, b)
}

/// Reads the inference-time affine map of an affine layer.
pub fn affine_of(net: &Network, layer: &LayerSpec) -> Result<AffineMap> {
    let p = net
        .layer_params(&layer.id)
        .ok_or_else(|| Error::UnknownLayer(layer.id.clone()))?;
    let bias = |n: usize| p.get("bias").map_or_else(|| vec![0.0; n], |b| b.data().to_vec());
    Ok(match &layer.kind {
        LayerKind::Dense { outputs, .. } => AffineMap::Dense(DenseMap {
            weight: p["weight"].clone(),
            bias: bias(*outputs),
        }),
        LayerKind::Conv2d {
            out_channels,
            stride,
            padding,
            ..
        } => AffineMap::Conv(ConvMap {
            weight: p["weight"].clone(),
            bias: bias(*out_channels),
            stride: *stride,
            padding: *padding,
        }),
        LayerKind::BatchNorm { eps, .. } => {
            let (scale, shift) = bn_affine(p, *eps);
            AffineMap::Channel(ChannelMap { scale, shift })
        }
        _ => return Err(Error::NotFoldable(format!("`{}` is not affine", layer.id))),
    })
}

/// Layer kind produced by folding, without touching parameters.
fn compose_kind(a: &LayerKind, b: &LayerKind) -> std::result::Result<LayerKind, String> {
    use LayerKind::*;
    let bias = |k: &LayerKind| match k {
        Dense { bias, .. } | Conv2d { bias, .. } => *bias,
        _ => true,
    };
    let with_bias = bias(a) || bias(b);
    match (a, b) {
        (Dense { inputs, .. }, Dense { outputs, .. }) => Ok(Dense {
            inputs: *inputs,
            outputs: *outputs,
            bias: with_bias,
        }),
        (BatchNorm { channels, .. }, BatchNorm { .. }) => Ok(BatchNorm {
            channels: *channels,
            eps: 0.0,
        }),
        (Dense { inputs, outputs, .. }, BatchNorm { .. }) => Ok(Dense {
            inputs: *inputs,
            outputs: *outputs,
            bias: true,
        }),
        (BatchNorm { .. }, Dense { inputs, outputs, .. }) => Ok(Dense {
            inputs: *inputs,
            outputs: *outputs,
            bias: true,
        }),
        (Conv2d { in_channels, out_channels, kernel, stride, padding, .. }, BatchNorm { .. }) => Ok(Conv2d {
            in_channels: *in_channels,
            out_channels: *out_channels,
            kernel: *kernel,
            stride: *stride,
            padding: *padding,
            bias: true,
        }),
        (BatchNorm { .. }, Conv2d { in_channels, out_channels, kernel, stride, padding, .. }) => {
            if *padding != 0 {
                return Err(format!("batch norm before a conv padded by {padding}"));
            }
            Ok(Conv2d {
                in_channels: *in_channels,
                out_channels: *out_channels,
                kernel: *kernel,
                stride: *stride,
                padding: 0,
                bias: true,
            })
        }
        (
            Conv2d { in_channels, kernel: k1, stride: s1, padding: p1, .. },
            Conv2d { out_channels, kernel: k2, stride: s2, padding: p2, .. },
        ) => {
            if *s1 != 1 || *s2 != 1 {
                return Err(format!("conv strides {s1} and {s2}; only stride 1 folds"));
            }
            if *p2 != 0 {
                return Err(format!("second conv pads by {p2}"));
            }
            Ok(Conv2d {
                in_channels: *in_channels,
                out_channels: *out_channels,
                kernel: k1 + k2 - 1,
                stride: 1,
                padding: *p1,
                bias: with_bias,
            })
        }
        _ => Err("dense and conv are not adjacent without a flatten".into()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldChain {
    pub layer_ids: Vec<String>,
    /// Position of the first layer in the unfolded network.
    pub start: usize,
    pub folded_id: String,
    /// Text form of the replacement layer, absent when the chain cannot fold.
    pub replacement: Option<String>,
    pub kernel_size: Option<usize>,
    pub flops_before: u64,
    pub flops_after: Option<u64>,
    pub blocked: Option<String>,
}

impl FoldChain {
    /// FLOPs after minus before; positive means the fold costs more.
    pub fn flops_delta(&self) -> Option<i64> {
        self.flops_after.map(|a| a as i64 - self.flops_before as i64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub chains: Vec<FoldChain>,
}

fn chain_link(layer: &LayerSpec) -> bool {
    matches!(layer.activation, None | Some(ActivationKind::Identity))
}

/// Finds every maximal run of two or more affine layers joined without activations.
pub fn plan_fold(spec: &NetworkSpec) -> Result<FoldPlan> {
    let shapes = spec.validate()?;
    let layers = &spec.layers;
    let input_of = |i: usize| if i == 0 { spec.input_shape.clone() } else { shapes[i - 1].clone() };
    let mut chains = Vec::new();
    let mut i = 0;
    while i < layers.len() {
        if !layers[i].kind.is_affine() {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < layers.len() && layers[j + 1].kind.is_affine() && chain_link(&layers[j]) {
            j += 1;
        }
        if j > i {
            let run = &layers[i..=j];
            let flops_before = run
                .iter()
                .enumerate()
                .map(|(o, l)| cost::layer_flops(l, &input_of(i + o), &shapes[i + o]))
                .sum();
            let folded_id = run.iter().map(|l| l.id.as_str()).collect::<Vec<_>>().join("+");
            let kind = run[1..]
                .iter()
                .try_fold(run[0].kind.clone(), |acc, l| compose_kind(&acc, &l.kind));
            let (replacement, kernel_size, flops_after, blocked) = match kind {
                Ok(kind) => {
                    let kernel = match &kind {
                        LayerKind::Conv2d { kernel, .. } => Some(*kernel),
                        _ => None,
                    };
                    let layer = LayerSpec::new(folded_id.clone(), kind, run[run.len() - 1].activation);
                    let after = cost::layer_flops(&layer, &input_of(i), &shapes[j]);
                    (Some(layer.to_string()), kernel, Some(after), None)
                }
                Err(reason) => (None, None, None, Some(reason)),
            };
            chains.push(FoldChain {
                layer_ids: run.iter().map(|l| l.id.clone()).collect(),
                start: i,
                folded_id,
                replacement,
                kernel_size,
                flops_before,
                flops_after,
                blocked,
            });
        }
        i = j + 1;
    }
    Ok(FoldPlan { chains })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainOutcome {
    pub layer_ids: Vec<String>,
    pub folded_id: String,
    pub kernel_size: Option<usize>,
    pub flops_before: u64,
    pub flops_after: Option<u64>,
    pub applied: bool,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub policy: FusionPolicy,
    pub chains: Vec<ChainOutcome>,
    pub warnings: Vec<String>,
    pub layers_before: usize,
    pub layers_after: usize,
    pub flops_before: u64,
    pub flops_after: u64,
    /// Largest absolute logit difference over random inputs, eval mode.
    pub equivalence_residual: f64,
    pub equivalence_samples: usize,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub network: Network,
    pub report: FoldReport,
}

fn to_layer(map: AffineMap, spec: LayerSpec, slope: Option<&Tensor>) -> Result<(LayerSpec, ParamMap)> {
    let mut p = ParamMap::new();
    let has_bias = matches!(spec.kind, LayerKind::Dense { bias: true, .. } | LayerKind::Conv2d { bias: true, .. });
    match map {
        AffineMap::Dense(DenseMap { weight, bias }) | AffineMap::Conv(ConvMap { weight, bias, .. }) => {
            p.insert("weight".into(), weight);
            if has_bias {
                let n = bias.len();
                p.insert("bias".into(), Tensor::new(vec![n], bias)?);
            }
        }
        AffineMap::Channel(ChannelMap { scale, shift }) => {
            let n = scale.len();
            p.insert("gamma".into(), Tensor::new(vec![n], scale)?);
            p.insert("beta".into(), Tensor::new(vec![n], shift)?);
            p.insert("running_mean".into(), Tensor::zeros(&[n]));
            p.insert("running_var".into(), Tensor::full(&[n], 1.0));
        }
    }
    if let Some(s) = slope {
        p.insert("slope".into(), s.clone());
    }
    Ok((spec, p))
}

/// Folds the chains of `plan` into `net`. Chains that cannot fold, or that
/// the policy rejects, are left as they are and noted in the report.
pub fn apply_fold(net: &Network, plan: &FoldPlan, policy: FusionPolicy) -> Result<FoldOutcome> {
    let spec = net.spec();
    let mut outcomes = Vec::new();
    let mut warnings = Vec::new();
    let mut replace: BTreeMap<usize, (usize, LayerSpec, ParamMap)> = BTreeMap::new();
    for chain in &plan.chains {
        let run: Vec<&LayerSpec> = chain
            .layer_ids
            .iter()
            .map(|id| spec.layer(id).ok_or_else(|| Error::UnknownLayer(id.clone())))
            .collect::<Result<_>>()?;
        if spec.position(&chain.layer_ids[0]) != Some(chain.start) {
            return Err(Error::Config(format!("fold plan does not match network at `{}`", chain.folded_id)));
        }
        let mut outcome = ChainOutcome {
            layer_ids: chain.layer_ids.clone(),
            folded_id: chain.folded_id.clone(),
            kernel_size: chain.kernel_size,
            flops_before: chain.flops_before,
            flops_after: chain.flops_after,
            applied: false,
            reason: chain.blocked.clone(),
        };
        if policy == FusionPolicy::OnlyIfCheaper && chain.flops_delta().is_some_and(|d| d > 0) {
            outcome.reason = Some(format!("fold adds {} FLOPs", chain.flops_delta().unwrap_or(0)));
        }
        if outcome.reason.is_none() {
            let folded = run[1..]
                .iter()
                .try_fold(affine_of(net, run[0])?, |acc, l| compose(&acc, &affine_of(net, l)?));
            match folded {
                Ok(map) => {
                    let text = chain.replacement.as_deref().ok_or_else(|| {
                        Error::Config(format!("chain `{}` has no replacement", chain.folded_id))
                    })?;
                    let layer: LayerSpec = text.parse()?;
                    let last = run[run.len() - 1];
                    let slope = net.layer_params(&last.id).and_then(|p| p.get("slope"));
                    let (layer, params) = to_layer(map, layer, slope)?;
                    replace.insert(chain.start, (run.len(), layer, params));
                    outcome.applied = true;
                }
                Err(Error::NotFoldable(reason)) => outcome.reason = Some(reason),
                Err(e) => return Err(e),
            }
        }
        if let Some(reason) = &outcome.reason {
            warnings.push(format!("chain `{}` left unfused: {reason}", chain.folded_id));
        }
        outcomes.push(outcome);
    }

    let mut layers = Vec::new();
    let mut params = BTreeMap::new();
    let mut i = 0;
    while i < spec.layers.len() {
        if let Some((len, layer, p)) = replace.remove(&i) {
            params.insert(layer.id.clone(), p);
            layers.push(layer);
            i += len;
        } else {
            let l = &spec.layers[i];
            params.insert(l.id.clone(), net.layer_params(&l.id).cloned().unwrap_or_default());
            layers.push(l.clone());
            i += 1;
        }
    }
    let folded = Network::from_parts(NetworkSpec::new(spec.input_shape.clone(), layers), params)?;
    let before = cost::count_spec(spec)?;
    let after = cost::count_spec(folded.spec())?;
    let residual = equivalence_residual(net, &folded, EQUIVALENCE_SAMPLES, EQUIVALENCE_SEED)?;
    Ok(FoldOutcome {
        report: FoldReport {
            policy,
            chains: outcomes,
            warnings,
            layers_before: net.depth(),
            layers_after: folded.depth(),
            flops_before: before.total_flops,
            flops_after: after.total_flops,
            equivalence_residual: residual,
            equivalence_samples: EQUIVALENCE_SAMPLES,
        },
        network: folded,
    })
}

/// Plans and applies every fold under `policy`.
pub fn fold_network(net: &Network, policy: FusionPolicy) -> Result<FoldOutcome> {
    apply_fold(net, &plan_fold(net.spec())?, policy)
}

/// Max absolute logit difference between two networks on inputs uniform in [-1, 1].
pub fn equivalence_residual(a: &Network, b: &Network, samples: usize, seed: u64) -> Result<f64> {
    if a.input_shape() != b.input_shape() {
        return Err(Error::LayerMismatch {
            expected: format!("{:?}", a.input_shape()),
            got: format!("{:?}", b.input_shape()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![samples];
    shape.extend_from_slice(a.input_shape());
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect())?;
    let (ya, yb) = (a.logits(&x, Mode::Eval)?, b.logits(&x, Mode::Eval)?);
    if ya.shape() != yb.shape() {
        return Err(Error::shape("output", "folded network changed the logit shape"));
    }
    Ok(ya.max_abs_diff(&yb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ops;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    fn run(map: &AffineMap, x: &Tensor) -> Tensor {
        match map {
            AffineMap::Dense(d) => ops::dense_forward(x, &d.weight, Some(&t1(&d.bias))),
            AffineMap::Conv(c) => ops::conv2d_forward(x, &c.weight, Some(&t1(&c.bias)), c.stride, c.padding),
            AffineMap::Channel(c) => ops::channel_affine(x, &c.scale, &c.shift),
        }
    }

    fn rand_dense(o: usize, i: usize, rng: &mut ChaCha8Rng) -> DenseMap {
        DenseMap {
            weight: rand_tensor(&[o, i], rng),
            bias: rand_vec(o, rng),
        }
    }

    fn rand_conv(o: usize, i: usize, k: usize, pad: usize, rng: &mut ChaCha8Rng) -> ConvMap {
        ConvMap {
            weight: rand_tensor(&[o, i, k, k], rng),
            bias: rand_vec(o, rng),
            stride: 1,
            padding: pad,
        }
    }

    fn eye(n: usize, v: f64) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        (0..n).for_each(|i| t.data_mut()[i * n + i] = v);
        t
    }

    fn residual(a: &AffineMap, b: &AffineMap, x: &Tensor) -> f64 {
        let seq = run(b, &run(a, x));
        run(&compose(a, b).unwrap(), x).max_abs_diff(&seq)
    }

    #[test]
    fn identity_absorbs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w2 = rand_dense(2, 3, &mut rng);
        let id = DenseMap {
            weight: eye(3, 1.0),
            bias: vec![0.0; 3],
        };
        assert_eq!(fold_dense(&id, &w2).unwrap(), w2);
    }

    #[test]
    fn scaled_identities() {
        let a = DenseMap {
            weight: eye(3, 2.0),
            bias: vec![1.0; 3],
        };
        let b = DenseMap {
            weight: eye(3, 3.0),
            bias: vec![0.0; 3],
        };
        let f = fold_dense(&a, &b).unwrap();
        assert_eq!(f.weight, eye(3, 6.0));
        assert_eq!(f.bias, vec![3.0; 3]);
    }

    #[test]
    fn dense_pair_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = AffineMap::Dense(rand_dense(4, 3, &mut rng));
        let b = AffineMap::Dense(rand_dense(5, 4, &mut rng));
        let x = rand_tensor(&[100, 3], &mut rng);
        assert!(residual(&a, &b, &x) <= 1e-12);
    }

    #[test]
    fn dense_inner_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_dense(4, 3, &mut rng);
        let b = rand_dense(5, 3, &mut rng);
        assert!(matches!(fold_dense(&a, &b), Err(Error::NotFoldable(_))));
    }

    #[test]
    fn three_by_three_twice_is_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = fold_conv(&rand_conv(2, 2, 3, 0, &mut rng), &rand_conv(2, 2, 3, 0, &mut rng)).unwrap();
        assert_eq!(f.weight.shape(), &[2, 2, 5, 5]);
    }

    #[test]
    fn dirac_pads_second_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0;
        let first = ConvMap {
            weight: delta,
            bias: vec![0.0],
            stride: 1,
            padding: 0,
        };
        let second = rand_conv(1, 1, 3, 0, &mut rng);
        let f = fold_conv(&first, &second).unwrap();
        let k = f.weight.data();
        for s in 0..5 {
            for t in 0..5 {
                let want = if (1..4).contains(&s) && (1..4).contains(&t) {
                    second.weight.data()[(s - 1) * 3 + t - 1]
                } else {
                    0.0
                };
                assert_eq!(k[s * 5 + t], want);
            }
        }
        assert_eq!(f.bias, second.bias);
    }

    #[test]
    fn conv_pair_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&[4, 2, 8, 8], &mut rng);
        for pad1 in [0, 1, 2] {
            let a = AffineMap::Conv(rand_conv(2, 2, 3, pad1, &mut rng));
            let b = AffineMap::Conv(rand_conv(2, 2, 3, 0, &mut rng));
            assert!(residual(&a, &b, &x) <= 1e-10, "pad1 {pad1}");
        }
    }

    #[test]
    fn unsupported_conv_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_conv(1, 1, 3, 0, &mut rng);
        let strided = ConvMap {
            stride: 2,
            ..rand_conv(1, 1, 3, 0, &mut rng)
        };
        let padded = rand_conv(1, 1, 3, 1, &mut rng);
        assert!(matches!(fold_conv(&a, &strided), Err(Error::NotFoldable(_))));
        assert!(matches!(fold_conv(&strided, &a), Err(Error::NotFoldable(_))));
        assert!(matches!(fold_conv(&a, &padded), Err(Error::NotFoldable(_))));
    }

    #[test]
    fn identity_batchnorm_leaves_neighbor() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bn = ChannelMap::from_batchnorm(&[1.0; 3], &[0.0; 3], &[0.0; 3], &[1.0; 3], 0.0);
        let d = AffineMap::Dense(rand_dense(3, 3, &mut rng));
        assert_eq!(fold_batchnorm(&bn, &d, BnSide::Before).unwrap(), d);
        assert_eq!(fold_batchnorm(&bn, &d, BnSide::After).unwrap(), d);
    }

    #[test]
    fn batchnorm_both_sides_of_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bn = ChannelMap::from_batchnorm(&[2.0; 4], &[3.0; 4], &[0.0; 4], &[1.0; 4], 0.0);
        let x = rand_tensor(&[50, 4], &mut rng);
        let before = AffineMap::Dense(rand_dense(2, 4, &mut rng));
        let after = AffineMap::Dense(rand_dense(4, 4, &mut rng));
        let b = AffineMap::Channel(bn.clone());
        let seq = run(&before, &run(&b, &x));
        let merged = fold_batchnorm(&bn, &before, BnSide::Before).unwrap();
        assert!(run(&merged, &x).max_abs_diff(&seq) <= 1e-12);
        let seq = run(&b, &run(&after, &x));
        let merged = fold_batchnorm(&bn, &after, BnSide::After).unwrap();
        assert!(run(&merged, &x).max_abs_diff(&seq) <= 1e-12);
    }

    #[test]
    fn random_batchnorm_and_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let var: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..2.0)).collect();
        let bn = ChannelMap::from_batchnorm(&rand_vec(3, &mut rng), &rand_vec(3, &mut rng), &rand_vec(3, &mut rng), &var, 1e-5);
        let x = rand_tensor(&[50, 3, 7, 7], &mut rng);
        let b = AffineMap::Channel(bn);
        let conv_in = AffineMap::Conv(rand_conv(2, 3, 3, 0, &mut rng));
        let conv_out = AffineMap::Conv(rand_conv(3, 3, 3, 1, &mut rng));
        assert!(residual(&b, &conv_in, &x) <= 1e-10);
        assert!(residual(&conv_out, &b, &x) <= 1e-10);
        let padded = AffineMap::Conv(rand_conv(2, 3, 3, 1, &mut rng));
        assert!(matches!(compose(&b, &padded), Err(Error::NotFoldable(_))));
    }

    fn net(text: &str) -> Network {
        Network::new(text.parse().unwrap(), 3).unwrap()
    }

    #[test]
    fn no_identity_no_chain() {
        let n = net("input 2\na dense in=2 out=4 act=relu\nb dense in=4 out=2\n");
        assert!(plan_fold(n.spec()).unwrap().chains.is_empty());
        let out = fold_network(&n, FusionPolicy::Always).unwrap();
        assert_eq!(out.network.spec(), n.spec());
        assert_eq!(out.report.equivalence_residual, 0.0);
    }

    #[test]
    fn dense_identity_dense() {
        let n = net("input 2\na dense in=2 out=4 act=identity\nb dense in=4 out=3 act=relu\nc dense in=3 out=2\n");
        let plan = plan_fold(n.spec()).unwrap();
        assert_eq!(plan.chains.len(), 1);
        assert_eq!(plan.chains[0].layer_ids, vec!["a", "b"]);
        let out = apply_fold(&n, &plan, FusionPolicy::Always).unwrap();
        let ids: Vec<&str> = out.network.spec().layers.iter().map(|l| l.id.as_str()).collect();
        assert_eq!(ids, vec!["a+b", "c"]);
        assert_eq!(out.network.spec().layers[0].activation, Some(ActivationKind::ReLU));
        assert!(out.report.equivalence_residual <= 1e-10);
    }

    #[test]
    fn conv_chain_predicts_five() {
        let n = net("input 2x9x9\na conv2d in=2 out=3 k=3 act=identity\nb conv2d in=3 out=2 k=3 act=relu\nf flatten\nfc dense in=50 out=2\n");
        let plan = plan_fold(n.spec()).unwrap();
        assert_eq!(plan.chains[0].kernel_size, Some(5));
        let out = apply_fold(&n, &plan, FusionPolicy::Always).unwrap();
        assert!(out.report.equivalence_residual <= 1e-10);
        assert_eq!(out.report.layers_after, 3);
    }

    #[test]
    fn predicted_flops_match_folded_count() {
        let n = net("input 2x9x9\nbn batchnorm c=2\na conv2d in=2 out=3 k=3 act=identity\nabn batchnorm c=3\nb conv2d in=3 out=3 k=3 act=relu\nf flatten\nfc dense in=75 out=2\n");
        let plan = plan_fold(n.spec()).unwrap();
        assert_eq!(plan.chains.len(), 1);
        let chain = &plan.chains[0];
        assert_eq!(chain.blocked, None);
        let out = apply_fold(&n, &plan, FusionPolicy::Always).unwrap();
        assert!(out.report.equivalence_residual <= 1e-10, "{}", out.report.equivalence_residual);
        let folded = cost::count_spec(out.network.spec()).unwrap();
        assert_eq!(folded.per_layer[0].flops, chain.flops_after.unwrap());
        // 2·(5·5·2)·3·25 + 3·25 bias adds + 75 relus.
        assert_eq!(chain.flops_after, Some(2 * 50 * 3 * 25 + 75 + 75));
    }

    #[test]
    fn blocked_chain_is_reported_not_altered() {
        let n = net("input 1x6x6\na conv2d in=1 out=1 k=3 pad=1\nb conv2d in=1 out=1 k=3 pad=1 act=relu\nf flatten\nfc dense in=36 out=2\n");
        let out = fold_network(&n, FusionPolicy::Always).unwrap();
        assert_eq!(out.network.spec(), n.spec());
        assert!(!out.report.chains[0].applied);
        assert_eq!(out.report.warnings.len(), 1);
    }

    #[test]
    fn only_if_cheaper_skips_costlier_conv_fold() {
        let n = net("input 8x8x8\na conv2d in=8 out=1 k=3\nb conv2d in=1 out=8 k=3 act=relu\nf flatten\nfc dense in=128 out=2\n");
        let plan = plan_fold(n.spec()).unwrap();
        assert!(plan.chains[0].flops_delta().unwrap() > 0);
        let out = apply_fold(&n, &plan, FusionPolicy::OnlyIfCheaper).unwrap();
        assert_eq!(out.report.layers_after, out.report.layers_before);
        let out = apply_fold(&n, &plan, FusionPolicy::Always).unwrap();
        assert_eq!(out.report.layers_after, out.report.layers_before - 1);
    }

    #[test]
    fn residual_and_pool_break_chains() {
        let n = net("input 2\na dense in=2 out=2\nr residual_begin tag=s\nb dense in=2 out=2\nc dense in=2 out=2\ne residual_end tag=s\nd dense in=2 out=2\n");
        let plan = plan_fold(n.spec()).unwrap();
        let runs: Vec<Vec<String>> = plan.chains.iter().map(|c| c.layer_ids.clone()).collect();
        assert_eq!(runs, vec![vec!["b".to_string(), "c".to_string()]]);
        let out = apply_fold(&n, &plan, FusionPolicy::Always).unwrap();
        assert!(out.report.equivalence_residual <= 1e-10);
    }

    #[test]
    fn prelu_slope_survives() {
        let n = net("input 2\na dense in=2 out=3\nb dense in=3 out=3 act=prelu\nc dense in=3 out=2\n");
        let out = fold_network(&n, FusionPolicy::Always).unwrap();
        assert!(out.network.layer_params("a+b").unwrap().contains_key("slope"));
        assert!(out.report.equivalence_residual <= 1e-12);
    }

    #[test]
    fn policy_keywords() {
        for p in [FusionPolicy::Always, FusionPolicy::OnlyIfCheaper] {
            assert_eq!(p.to_string().parse::<FusionPolicy>().unwrap(), p);
        }
        assert!("sometimes".parse::<FusionPolicy>().is_err());
    }

    proptest! {
        #[test]
        fn kernel_size_law(k1 in prop::sample::select(vec![1usize, 3, 5]), k2 in prop::sample::select(vec![1usize, 3, 5]), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = AffineMap::Conv(rand_conv(2, 1, k1, 0, &mut rng));
            let b = AffineMap::Conv(rand_conv(1, 2, k2, 0, &mut rng));
            let x = rand_tensor(&[2, 1, 10, 10], &mut rng);
            match compose(&a, &b).unwrap() {
                AffineMap::Conv(c) => prop_assert_eq!(c.weight.shape()[2], k1 + k2 - 1),
                _ => prop_assert!(false),
            }
            prop_assert!(residual(&a, &b, &x) <= 1e-10);
        }
    }
}
