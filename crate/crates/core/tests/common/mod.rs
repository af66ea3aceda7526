//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use easier_core::config::ExperimentConfig;
use easier_core::data::Dataset;
use easier_core::easier::{run_easier_with, EasierConfig, EasierRunState, RunObserver};
use easier_core::easier::IterationRecord;
use easier_core::engine::LayerKind;
use easier_core::rectifiers::PRELU_INIT_SLOPE;
use easier_core::{Network, Result, Tensor, TrainPolicy};
use std::path::PathBuf;

/// Per-layer neuron entropies and their mean, computed the slow way.
pub struct OracleLayer {
    pub id: String,
    pub neurons: Vec<f64>,
    pub mean: f64,
}

/// Runs a dense-only network by hand, keeps every pre-activation, then
/// counts signs, turns counts into ON probabilities and takes binary
/// entropies. Nothing here goes through the profiler.
pub fn brute_force_entropy(net: &Network, inputs: &Tensor) -> Vec<OracleLayer> {
    let n = inputs.batch();
    let mut act: Vec<Vec<f64>> = (0..n).map(|s| inputs.item(s).to_vec()).collect();
    let mut out = Vec::new();
    for layer in &net.spec().layers {
        let LayerKind::Dense { inputs: fan_in, outputs, .. } = layer.kind else {
            panic!("oracle handles dense layers only, got {}", layer.kind.name());
        };
        let p = net.layer_params(&layer.id).unwrap();
        let w = p["weight"].data();
        let b = p.get("bias").map(|b| b.data().to_vec());
        let z: Vec<Vec<f64>> = act
            .iter()
            .map(|x| {
                (0..outputs)
                    .map(|o| {
                        let mut acc = 0.0;
                        for i in 0..fan_in {
                            acc += x[i] * w[o * fan_in + i];
                        }
                        acc + b.as_ref().map_or(0.0, |b| b[o])
                    })
                    .collect()
            })
            .collect();
        if net.eligible_layers().contains(&layer.id) {
            let neurons: Vec<f64> = (0..outputs)
                .map(|o| {
                    let on = z.iter().filter(|r| r[o] > 0.0).count() as f64;
                    let off = z.iter().filter(|r| r[o] < 0.0).count() as f64;
                    let p = if on + off == 0.0 { 0.0 } else { on / (on + off) };
                    if p == 0.0 || p == 1.0 {
                        // a neuron that never switches carries no information
                        0.0
                    } else {
                        let q = 1.0 - p;
                        -(p * p.log2() + q * q.log2())
                    }
                })
                .collect();
            let mean = neurons.iter().sum::<f64>() / outputs as f64;
            out.push(OracleLayer {
                id: layer.id.clone(),
                neurons,
                mean,
            });
        }
        let slope = p.get("slope").map_or(PRELU_INIT_SLOPE, |t| t.data()[0]);
        act = match layer.activation {
            Some(a) => z.iter().map(|r| r.iter().map(|&v| a.eval(v, slope)).collect()).collect(),
            None => z,
        };
    }
    out
}

/// Layer ids by ascending oracle entropy, ties in forward order.
pub fn oracle_order(layers: &[OracleLayer]) -> Vec<String> {
    let mut ranked: Vec<&OracleLayer> = layers.iter().collect();
    ranked.sort_by(|a, b| a.mean.total_cmp(&b.mean));
    ranked.iter().map(|l| l.id.clone()).collect()
}

pub fn shipped_config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// The spiral experiment as shipped, with optional overrides.
pub struct Spiral {
    pub data: Dataset,
    pub net: Network,
    pub policy: TrainPolicy,
    pub easier: EasierConfig,
}

pub fn spiral(overrides: &[&str]) -> Spiral {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let cfg = ExperimentConfig::load(&shipped_config("spiral.toml"), &overrides).unwrap();
    let data = cfg.dataset.load().unwrap();
    let net = cfg.build_network(&data).unwrap();
    Spiral {
        net,
        policy: cfg.policy.clone(),
        easier: cfg.easier().unwrap().clone(),
        data,
    }
}

/// Keeps every network the loop produces; index 0 is the dense model.
#[derive(Default)]
pub struct Keep {
    pub nets: Vec<Network>,
}

impl RunObserver for Keep {
    fn dense(&mut self, net: &Network, _val_acc: f64) -> Result<()> {
        self.nets.push(net.clone());
        Ok(())
    }

    fn iteration(&mut self, _record: &IterationRecord, net: &Network) -> Result<Option<String>> {
        self.nets.push(net.clone());
        Ok(None)
    }
}

pub struct SpiralRun {
    pub best: Network,
    pub state: EasierRunState,
    pub nets: Vec<Network>,
}

pub fn run_spiral(s: &Spiral) -> SpiralRun {
    let mut keep = Keep::default();
    let (best, state) = run_easier_with(s.net.clone(), &s.data, &s.policy, &s.easier, None, "spirals", &mut keep).unwrap();
    SpiralRun {
        best,
        state,
        nets: keep.nets,
    }
}

/// Checks that each iteration linearized the lowest-entropy layers of the
/// network it started from, according to the oracle.
pub fn choices_follow_oracle(s: &Spiral, run: &SpiralRun) -> std::result::Result<(), String> {
    for rec in &run.state.history {
        let before = &run.nets[rec.iteration - 1];
        let order = oracle_order(&brute_force_entropy(before, &s.data.train.inputs));
        let k = rec.linearized_layer_ids.len();
        if rec.linearized_layer_ids[..] != order[..k] {
            return Err(format!(
                "iteration {}: chose {:?}, oracle order {:?}",
                rec.iteration, rec.linearized_layer_ids, order
            ));
        }
    }
    Ok(())
}
