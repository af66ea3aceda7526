//! FLOPs, parameter counts and activation depth.
//!
//! Conventions (one multiply-accumulate is 2 FLOPs):
//!
//! | layer                | FLOPs                                          |
//! |----------------------|------------------------------------------------|
//! | Dense `m → n`        | `2·m·n`, plus `n` with bias                    |
//! | Conv2d               | `2·k²·C_in·C_out·H_out·W_out`, plus `C_out·H_out·W_out` with bias |
//! | BatchNorm (inference)| 2 per element                                  |
//! | rectifier            | 1 per element; identity is free                |
//! | max/avg pool         | 1 per input element read                       |
//! | residual join        | 1 per element                                  |
//! | flatten, residual fork | 0                                            |

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::engine::{LayerKind, LayerSpec, Mode, Network, NetworkSpec, PoolKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FLOPS_PER_MAC: u64 = 2;
pub const CONVENTION: &str = "1 MAC = 2 FLOPs";
pub const MIN_TIMING_REPEATS: usize = 30;
pub const TIMING_WARMUP: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer_id: String,
    pub kind: String,
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_layer: Vec<LayerCost>,
    pub total_flops: u64,
    pub total_params: u64,
    /// Layers whose activation is still a rectifier.
    pub critical_path_depth: usize,
    pub layer_count: usize,
    pub convention: String,
}

fn prod(s: &[usize]) -> u64 {
    s.iter().map(|&d| d as u64).product()
}

/// FLOPs of one layer, including its activation, for a single sample.
pub fn layer_flops(layer: &LayerSpec, input: &[usize], output: &[usize]) -> u64 {
    let out_elems = prod(output);
    let op = match &layer.kind {
        LayerKind::Dense {
            inputs,
            outputs,
            bias,
        } => {
            let (m, n) = (*inputs as u64, *outputs as u64);
            FLOPS_PER_MAC * m * n + if *bias { n } else { 0 }
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            bias,
            ..
        } => {
            let k = *kernel as u64;
            let spatial = prod(&output[1..]);
            FLOPS_PER_MAC * k * k * (*in_channels as u64) * (*out_channels as u64) * spatial
                + if *bias { *out_channels as u64 * spatial } else { 0 }
        }
        LayerKind::BatchNorm { .. } => 2 * out_elems,
        LayerKind::Pool { kind, size } => match kind {
            PoolKind::Global => prod(input),
            _ => out_elems * (*size as u64) * (*size as u64),
        },
        LayerKind::Flatten | LayerKind::ResidualBegin { .. } => 0,
        LayerKind::ResidualEnd { .. } => out_elems,
    };
    let act = if layer.has_rectifier() { out_elems } else { 0 };
    op + act
}

/// Trainable parameter count declared by a layer.
pub fn layer_params(spec: &NetworkSpec, layer: &LayerSpec) -> u64 {
    spec.param_shapes(layer)
        .iter()
        .filter(|(name, _)| !crate::engine::BUFFER_NAMES.contains(name))
        .map(|(_, s)| prod(s))
        .sum()
}

/// Cost of a network description (no parameters needed).
pub fn count_spec(spec: &NetworkSpec) -> Result<CostReport> {
    let shapes = spec.validate()?;
    let mut input = spec.input_shape.clone();
    let mut per_layer = Vec::with_capacity(spec.layers.len());
    for (layer, out) in spec.layers.iter().zip(&shapes) {
        per_layer.push(LayerCost {
            layer_id: layer.id.clone(),
            kind: layer.kind.name().to_string(),
            flops: layer_flops(layer, &input, out),
            params: layer_params(spec, layer),
        });
        input = out.clone();
    }
    Ok(CostReport {
        total_flops: per_layer.iter().map(|l| l.flops).sum(),
        total_params: per_layer.iter().map(|l| l.params).sum(),
        critical_path_depth: spec.layers.iter().filter(|l| l.has_rectifier()).count(),
        layer_count: spec.layers.len(),
        per_layer,
        convention: CONVENTION.to_string(),
    })
}

/// Per-sample cost of `net`. `input_shape` is the sample shape, optionally
/// with a leading batch dimension of 1.
pub fn count_flops(net: &Network, input_shape: &[usize]) -> Result<CostReport> {
    let sample = match input_shape {
        [1, rest @ ..] if rest == net.input_shape() => rest,
        s => s,
    };
    if sample != net.input_shape() {
        return Err(Error::shape(
            "input",
            format!("cost input {input_shape:?} vs network input {:?}", net.input_shape()),
        ));
    }
    count_spec(net.spec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub repeats: usize,
    pub warmup: usize,
    pub batch: usize,
}

/// Wall-clock inference time on the calling thread. `input_shape` includes
/// the batch dimension when it has one more axis than the network input.
pub fn timing_harness(net: &Network, input_shape: &[usize], repeats: usize) -> Result<TimingReport> {
    if repeats < MIN_TIMING_REPEATS {
        return Err(Error::Config(format!(
            "timing needs at least {MIN_TIMING_REPEATS} repeats, got {repeats}"
        )));
    }
    let shape: Vec<usize> = if input_shape.len() == net.input_shape().len() {
        std::iter::once(1).chain(input_shape.iter().copied()).collect()
    } else {
        input_shape.to_vec()
    };
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape.clone(), (0..n).map(|i| ((i % 17) as f64 - 8.0) / 8.0).collect())?;
    for _ in 0..TIMING_WARMUP {
        std::hint::black_box(net.logits(&x, Mode::Eval)?);
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(net.logits(&x, Mode::Eval)?);
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    samples.sort_by(f64::total_cmp);
    let pick = |q: f64| samples[((samples.len() - 1) as f64 * q).round() as usize];
    Ok(TimingReport {
        median_ms: pick(0.5),
        p10_ms: pick(0.1),
        p90_ms: pick(0.9),
        repeats,
        warmup: TIMING_WARMUP,
        batch: shape[0],
    })
}

impl CostReport {
    /// `layer_id,kind,flops,params` rows followed by a total row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_id,kind,flops,params\n");
        for l in &self.per_layer {
            out.push_str(&format!("{},{},{},{}\n", l.layer_id, l.kind, l.flops, l.params));
        }
        out.push_str(&format!("total,,{},{}\n", self.total_flops, self.total_params));
        out
    }
}
