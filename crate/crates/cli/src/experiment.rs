//! Run directories: what `easier run` writes and `easier report` reads back.
//!
//! ```text
//! config.toml              resolved configuration
//! state.json               loop state and per-iteration records
//! history.csv              one row per iteration
//! history.svg              validation accuracy per iteration
//! checkpoint_iter<N>.ckpt  network after iteration N (0 = dense)
//! entropy_iter<N>.json     profile that chose the layers of iteration N
//! summary.json             derived from the files above
//! ```

use std::path::{Path, PathBuf};

use easier_core::config::ExperimentConfig;
use easier_core::cost::{count_spec, CostReport};
use easier_core::data::Dataset;
use easier_core::easier::{history_csv, run_easier_with, EasierRunState, IterationRecord, RunObserver, StopReason};
use easier_core::engine::checkpoint;
use easier_core::fold::{fold_network, FusionPolicy};
use easier_core::io::{write_atomic, write_json};
use easier_core::{evaluate, Error, Network, Result};
use serde::{Deserialize, Serialize};

use crate::svg::{line_chart, Series};

pub const CONFIG: &str = "config.toml";
pub const STATE: &str = "state.json";
pub const HISTORY: &str = "history.csv";
pub const HISTORY_SVG: &str = "history.svg";
pub const SUMMARY: &str = "summary.json";

pub fn checkpoint_name(iteration: usize) -> String {
    format!("checkpoint_iter{iteration}.ckpt")
}

pub fn entropy_name(iteration: usize) -> String {
    format!("entropy_iter{iteration}.json")
}

/// Loads the configured dataset, standardized when the config asks for it.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let data = cfg.dataset.load()?;
    cfg.augment.validate_for(data.train.sample_shape())?;
    if cfg.augment.normalize {
        data.normalized()
    } else {
        Ok(data)
    }
}

struct Writer<'a> {
    dir: &'a Path,
    quiet: bool,
}

impl RunObserver for Writer<'_> {
    fn dense(&mut self, net: &Network, val_acc: f64) -> Result<()> {
        if !self.quiet {
            eprintln!("dense model: val_acc {val_acc:.4}");
        }
        checkpoint::save(net, self.dir.join(checkpoint_name(0)))
    }

    fn iteration(&mut self, record: &IterationRecord, net: &Network) -> Result<Option<String>> {
        let name = checkpoint_name(record.iteration);
        checkpoint::save(net, self.dir.join(&name))?;
        write_json(&self.dir.join(entropy_name(record.iteration)), &record.entropy)?;
        if !self.quiet {
            eprintln!(
                "iteration {}: linearized {} (H_min {:.4}), val_acc {:.4}{}",
                record.iteration,
                record.linearized_layer_ids.join(", "),
                record.entropy_min,
                record.val_acc,
                if record.within_budget { "" } else { ", over budget" }
            );
        }
        Ok(Some(name))
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, quiet: bool) -> Result<RunSummary> {
    let easier = cfg.easier()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    write_atomic(&dir.join(CONFIG), cfg.to_toml()?.as_bytes())?;
    let data = load_data(cfg)?;
    let net = cfg.build_network(&data)?;
    let mut writer = Writer { dir, quiet };
    let augment = (cfg.augment.hflip || cfg.augment.shift_px > 0).then_some(&cfg.augment);
    let (_, state) = run_easier_with(net, &data, &cfg.policy, easier, augment, &cfg.dataset.id(), &mut writer)?;
    write_json(&dir.join(STATE), &state)?;
    write_atomic(&dir.join(HISTORY), history_csv(&state).as_bytes())?;
    let summary = summarize(dir)?;
    write_report(dir, &summary, &state)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostView {
    pub layers: usize,
    pub critical_path_depth: usize,
    pub total_flops: u64,
    pub total_params: u64,
}

impl From<&CostReport> for CostView {
    fn from(c: &CostReport) -> Self {
        CostView {
            layers: c.layer_count,
            critical_path_depth: c.critical_path_depth,
            total_flops: c.total_flops,
            total_params: c.total_params,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset_id: String,
    pub architecture: String,
    pub activation: String,
    pub delta: f64,
    pub layers_per_iteration: usize,
    pub dense_val_acc: f64,
    pub dense_test_acc: Option<f64>,
    pub iterations: usize,
    pub stop_reason: Option<StopReason>,
    pub best_iteration: usize,
    pub best_checkpoint: String,
    pub best_val_acc: f64,
    pub best_test_acc: Option<f64>,
    pub linearized_layers: Vec<String>,
    pub cost_dense: CostView,
    /// Best network with linearized activations, before folding.
    pub cost_linearized: CostView,
    /// Best network after folding every foldable chain.
    pub cost_folded: CostView,
    pub folded_chains: usize,
    pub fold_equivalence_residual: f64,
    pub cost_convention: String,
}

pub fn read_state(dir: &Path) -> Result<EasierRunState> {
    let path = dir.join(STATE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn test_acc(net: &Network, data: &Dataset) -> Result<Option<f64>> {
    if data.test.is_empty() {
        Ok(None)
    } else {
        evaluate(net, &data.test).map(Some)
    }
}

/// Rebuilds the summary from the artifacts in `dir`.
pub fn summarize(dir: &Path) -> Result<RunSummary> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG), &[])?;
    let easier = cfg.easier()?;
    let state = read_state(dir)?;
    let data = load_data(&cfg)?;
    let dense = checkpoint::load(dir.join(checkpoint_name(0)))?;
    let best_name = checkpoint_name(state.best_iteration);
    let best = checkpoint::load(dir.join(&best_name))?;
    let folded = fold_network(&best, FusionPolicy::Always)?;
    let linearized_layers = state
        .history
        .iter()
        .take(state.best_iteration)
        .flat_map(|r| r.linearized_layer_ids.iter().cloned())
        .collect();
    Ok(RunSummary {
        dataset_id: cfg.dataset.id(),
        architecture: cfg.architecture.preset.clone().unwrap_or_else(|| "inline".into()),
        activation: cfg.architecture.activation.clone(),
        delta: easier.delta,
        layers_per_iteration: easier.layers_per_iteration,
        dense_val_acc: state.dense_acc,
        dense_test_acc: test_acc(&dense, &data)?,
        iterations: state.iteration,
        stop_reason: state.stop_reason,
        best_iteration: state.best_iteration,
        best_checkpoint: best_name,
        best_val_acc: state.best_val_acc,
        best_test_acc: test_acc(&best, &data)?,
        linearized_layers,
        cost_dense: (&count_spec(dense.spec())?).into(),
        cost_linearized: (&count_spec(best.spec())?).into(),
        cost_folded: (&count_spec(folded.network.spec())?).into(),
        folded_chains: folded.report.chains.iter().filter(|c| c.applied).count(),
        fold_equivalence_residual: folded.report.equivalence_residual,
        cost_convention: easier_core::cost::CONVENTION.into(),
    })
}

/// Writes `summary.json` and the history chart.
pub fn write_report(dir: &Path, summary: &RunSummary, state: &EasierRunState) -> Result<()> {
    write_json(&dir.join(SUMMARY), summary)?;
    let mut acc = vec![(0.0, state.dense_acc)];
    acc.extend(state.history.iter().map(|r| (r.iteration as f64, r.val_acc)));
    let last = acc.last().map_or(0.0, |p| p.0);
    let floor = state.dense_acc - summary.delta;
    let svg = line_chart(
        "EASIER validation accuracy",
        "iteration",
        "val accuracy",
        &[
            Series { name: "val accuracy", points: acc, dashed: false },
            Series { name: "budget", points: vec![(0.0, floor), (last, floor)], dashed: true },
        ],
    );
    write_atomic(&dir.join(HISTORY_SVG), svg.as_bytes())
}

pub fn run_dir(cfg: &ExperimentConfig, override_dir: Option<PathBuf>) -> PathBuf {
    override_dir.unwrap_or_else(|| PathBuf::from(&cfg.output_dir))
}
