//! Activation-state entropy of rectifier layers.
//!
//! Each neuron's state on an input is the sign of its pre-activation:
//! ON (+1), OFF (−1) or the zero state (0). Zero states are counted but
//! excluded from the ON probability `p = n_on / (n_on + n_off)` (`p = 0`
//! when no ON/OFF state was seen). A neuron's entropy is the binary entropy
//! of `p` in bits; a layer's entropy is the mean over its neurons. For
//! convolutional maps every spatial position counts as one observation of
//! its channel.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::engine::{Network, EVAL_BATCH};
use crate::error::{Error, Result};
use crate::rectifiers::ActivationKind;
use crate::tensor::Tensor;

/// Sign of `z` as a state: `+1`, `−1` or `0` (exact zero only).
pub fn classify_state(z: f64) -> i8 {
    if z > 0.0 {
        1
    } else if z < 0.0 {
        -1
    } else {
        0
    }
}

/// What the state is read from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateRule {
    /// `sgn(z)` on the pre-activation.
    #[default]
    PreActivation,
    /// `sgn(ψ(z))` on the output; ReLU negatives then land in the zero state.
    Output,
}

/// Per-neuron ON/OFF/zero counts for one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateAccumulator {
    pub layer_id: String,
    pub n_on: Vec<u64>,
    pub n_off: Vec<u64>,
    pub n_zero: Vec<u64>,
    pub samples_seen: u64,
    /// Observations per neuron per sample (spatial positions for conv maps).
    pub positions: u64,
}

impl StateAccumulator {
    pub fn new(layer_id: impl Into<String>, neurons: usize) -> Self {
        StateAccumulator {
            layer_id: layer_id.into(),
            n_on: vec![0; neurons],
            n_off: vec![0; neurons],
            n_zero: vec![0; neurons],
            samples_seen: 0,
            positions: 0,
        }
    }

    pub fn neurons(&self) -> usize {
        self.n_on.len()
    }

    /// Counts the states in a `[N, F]` or `[N, C, H, W]` pre-activation batch.
    pub fn accumulate(&mut self, layer_id: &str, preact: &Tensor) -> Result<()> {
        self.accumulate_with(layer_id, preact, classify_state)
    }

    fn accumulate_with(&mut self, layer_id: &str, preact: &Tensor, state: impl Fn(f64) -> i8) -> Result<()> {
        if layer_id != self.layer_id {
            return Err(Error::LayerMismatch {
                expected: self.layer_id.clone(),
                got: layer_id.to_string(),
            });
        }
        if preact.rank() < 2 || preact.shape()[1] != self.neurons() {
            return Err(Error::shape(
                layer_id,
                format!("expected [N, {}, ...], got {:?}", self.neurons(), preact.shape()),
            ));
        }
        let n = preact.batch();
        if n == 0 {
            return Ok(());
        }
        let c = self.neurons();
        let m: usize = preact.shape()[2..].iter().product();
        if self.samples_seen > 0 && self.positions != m as u64 {
            return Err(Error::shape(layer_id, "spatial size changed between batches"));
        }
        let d = preact.data();
        for b in 0..n {
            for ch in 0..c {
                for &z in &d[(b * c + ch) * m..(b * c + ch + 1) * m] {
                    match state(z) {
                        1 => self.n_on[ch] += 1,
                        -1 => self.n_off[ch] += 1,
                        _ => self.n_zero[ch] += 1,
                    }
                }
            }
        }
        self.samples_seen += n as u64;
        self.positions = m as u64;
        Ok(())
    }

    /// Adds another shard's counts for the same layer.
    pub fn merge(&mut self, other: &StateAccumulator) -> Result<()> {
        if other.layer_id != self.layer_id || other.neurons() != self.neurons() {
            return Err(Error::LayerMismatch {
                expected: self.layer_id.clone(),
                got: other.layer_id.clone(),
            });
        }
        if self.samples_seen > 0 && other.samples_seen > 0 && self.positions != other.positions {
            return Err(Error::shape(&self.layer_id, "merging different spatial sizes"));
        }
        for i in 0..self.neurons() {
            self.n_on[i] += other.n_on[i];
            self.n_off[i] += other.n_off[i];
            self.n_zero[i] += other.n_zero[i];
        }
        if other.samples_seen > 0 {
            self.positions = other.positions;
        }
        self.samples_seen += other.samples_seen;
        Ok(())
    }

    pub fn on_probability(&self, neuron: usize) -> f64 {
        on_probability(self.n_on[neuron], self.n_off[neuron])
    }

    pub fn neuron_entropies(&self) -> Vec<f64> {
        (0..self.neurons())
            .map(|i| neuron_entropy(self.on_probability(i)))
            .collect()
    }

    pub fn layer_entropy(&self) -> f64 {
        mean(&self.neuron_entropies())
    }
}

/// ON probability from counts; the zero state is not part of either count.
pub fn on_probability(n_on: u64, n_off: u64) -> f64 {
    let s = n_on + n_off;
    if s == 0 {
        0.0
    } else {
        n_on as f64 / s as f64
    }
}

/// Binary entropy in bits, with `0·log2(0) = 0`.
pub fn neuron_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntropy {
    pub layer_id: String,
    #[serde(rename = "H_layer")]
    pub h_layer: f64,
    pub neurons: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub dataset_id: String,
    /// Eligible layers in forward order.
    pub layers: Vec<LayerEntropy>,
    /// Layer ids by ascending layer entropy; ties keep forward order.
    pub order: Vec<String>,
}

impl EntropyReport {
    pub fn layer(&self, id: &str) -> Option<&LayerEntropy> {
        self.layers.iter().find(|l| l.layer_id == id)
    }

    pub fn per_layer(&self, id: &str) -> Option<f64> {
        self.layer(id).map(|l| l.h_layer)
    }

    pub fn per_neuron(&self, id: &str, neuron: usize) -> Option<f64> {
        self.layer(id).and_then(|l| l.neurons.get(neuron).copied())
    }

    pub fn min_entropy(&self) -> Option<f64> {
        self.order.first().and_then(|id| self.per_layer(id))
    }

    /// `layer_id,H,rank` rows, rank 0 being the lowest entropy.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_id,H,rank\n");
        for l in &self.layers {
            let rank = self.order.iter().position(|id| *id == l.layer_id).unwrap_or(0);
            out.push_str(&format!("{},{},{}\n", l.layer_id, l.h_layer, rank));
        }
        out
    }

    /// Builds a report from finished accumulators given in forward order.
    pub fn from_accumulators(dataset_id: &str, accs: &[StateAccumulator]) -> Self {
        let layers: Vec<LayerEntropy> = accs
            .iter()
            .map(|a| {
                let neurons = a.neuron_entropies();
                LayerEntropy {
                    layer_id: a.layer_id.clone(),
                    h_layer: mean(&neurons),
                    neurons,
                }
            })
            .collect();
        let mut ranked: Vec<&LayerEntropy> = layers.iter().collect();
        // stable: equal entropies keep forward order
        ranked.sort_by(|a, b| a.h_layer.partial_cmp(&b.h_layer).unwrap_or(Ordering::Equal));
        let order = ranked.iter().map(|l| l.layer_id.clone()).collect();
        EntropyReport {
            dataset_id: dataset_id.to_string(),
            layers,
            order,
        }
    }
}

/// One pass over `data` collecting state counts for every eligible layer.
pub fn accumulate_states(net: &Network, data: &DatasetSplit, rule: StateRule) -> Result<Vec<StateAccumulator>> {
    let eligible = net.eligible_layers();
    if eligible.is_empty() {
        return Err(Error::NotEligible("network has no eligible layers".into()));
    }
    data.require_non_empty("entropy probe set")?;
    let mut accs: Vec<StateAccumulator> = eligible
        .iter()
        .map(|id| {
            let pos = net.spec().position(id).expect("eligible layer exists");
            StateAccumulator::new(id.clone(), net.output_shapes()[pos][0])
        })
        .collect();
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let out = net.forward(&data.inputs.select(&idx), true)?;
        let preacts = out.preacts.expect("requested pre-activations");
        for acc in &mut accs {
            let z = &preacts[&acc.layer_id];
            let id = acc.layer_id.clone();
            match rule {
                StateRule::PreActivation => acc.accumulate(&id, z)?,
                StateRule::Output => {
                    let act = net
                        .layer_spec(&id)
                        .and_then(|l| l.activation)
                        .unwrap_or(ActivationKind::Identity);
                    let slope = net
                        .layer_params(&id)
                        .and_then(|m| m.get("slope"))
                        .map_or(crate::rectifiers::PRELU_INIT_SLOPE, |t| t.data()[0]);
                    acc.accumulate_with(&id, z, |v| classify_state(act.eval(v, slope)))?
                }
            }
        }
        start = end;
    }
    Ok(accs)
}

/// Entropy of every eligible layer of `net` over `data`.
pub fn profile(net: &Network, data: &DatasetSplit, dataset_id: &str) -> Result<EntropyReport> {
    profile_with(net, data, dataset_id, StateRule::PreActivation)
}

pub fn profile_with(net: &Network, data: &DatasetSplit, dataset_id: &str, rule: StateRule) -> Result<EntropyReport> {
    let accs = accumulate_states(net, data, rule)?;
    Ok(EntropyReport::from_accumulators(dataset_id, &accs))
}
