//! Iterative depth reduction: repeatedly linearize the lowest-entropy
//! rectifier layers, finetune, and stop once validation accuracy falls more
//! than `delta` below the fully trained model.

use serde::{Deserialize, Serialize};

use crate::data::{Augmentation, Dataset, DatasetSplit};
use crate::engine::{evaluate, train_with, Network, TrainPolicy};
use crate::entropy::{profile, EntropyReport};
use crate::error::{Error, Result};
use crate::rectifiers::ActivationKind;

/// Slack for comparing accuracy differences, which are ratios of counts
/// and pick up rounding when subtracted.
pub const ACCURACY_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EasierConfig {
    /// Tolerated validation accuracy drop, in accuracy points on `[0, 1]`.
    pub delta: f64,
    /// Layers linearized per iteration (1 is the base procedure).
    #[serde(default = "one")]
    pub layers_per_iteration: usize,
    /// Finetune schedule; the training policy is reused when absent.
    #[serde(default)]
    pub finetune_policy: Option<TrainPolicy>,
    #[serde(default)]
    pub max_iterations: Option<usize>,
}

fn one() -> usize {
    1
}

impl EasierConfig {
    pub fn new(delta: f64) -> Self {
        EasierConfig {
            delta,
            layers_per_iteration: 1,
            finetune_policy: None,
            max_iterations: None,
        }
    }

    pub fn validate(&self, eligible: usize) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta {} must be a finite value ≥ 0", self.delta)));
        }
        if self.layers_per_iteration == 0 || self.layers_per_iteration > eligible {
            return Err(Error::Config(format!(
                "layers_per_iteration {} must be in 1..={eligible}",
                self.layers_per_iteration
            )));
        }
        if let Some(p) = &self.finetune_policy {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    BudgetExceeded,
    NoEligibleLayers,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Layers linearized in this iteration, lowest entropy first.
    pub linearized_layer_ids: Vec<String>,
    pub removed_total: usize,
    pub val_acc: f64,
    pub entropy_min: f64,
    pub within_budget: bool,
    /// Where the observer stored this iteration's checkpoint, if anywhere.
    pub checkpoint: Option<String>,
    #[serde(skip)]
    pub entropy: EntropyReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EasierRunState {
    pub iteration: usize,
    pub dense_acc: f64,
    pub history: Vec<IterationRecord>,
    /// Iteration of the returned network; 0 is the dense model.
    pub best_iteration: usize,
    pub best_val_acc: f64,
    pub stop_reason: Option<StopReason>,
    /// The network that broke the budget, kept for inspection.
    #[serde(skip)]
    pub violating: Option<Network>,
}

impl EasierRunState {
    pub fn linearized_count(&self) -> usize {
        self.best_iteration
            .checked_sub(1)
            .and_then(|i| self.history.get(i))
            .map_or(0, |r| r.removed_total)
    }
}

/// Callbacks for persisting intermediate results.
pub trait RunObserver {
    fn dense(&mut self, _net: &Network, _val_acc: f64) -> Result<()> {
        Ok(())
    }

    /// Called after each finetune; the returned string is recorded as the
    /// iteration's checkpoint reference.
    fn iteration(&mut self, _record: &IterationRecord, _net: &Network) -> Result<Option<String>> {
        Ok(None)
    }
}

impl RunObserver for () {}

/// Replaces the activation of each listed layer with the identity. Parameters
/// are untouched except that a PReLU slope is dropped.
pub fn linearize(net: &Network, layer_ids: &[String]) -> Result<Network> {
    let mut out = net.clone();
    for id in layer_ids {
        if !out.eligible_layers().contains(id) {
            return Err(Error::NotEligible(id.clone()));
        }
        out.set_activation(id, Some(ActivationKind::Identity))?;
    }
    Ok(out)
}

/// Trains `w_init`, then linearizes and finetunes until the budget breaks,
/// no eligible layer remains, or the iteration cap is hit. Returns the last
/// network within budget.
pub fn run_easier(w_init: Network, data: &Dataset, policy: &TrainPolicy, cfg: &EasierConfig) -> Result<(Network, EasierRunState)> {
    run_easier_with(w_init, data, policy, cfg, None, "train", &mut ())
}

/// The `k`-layers-per-iteration variant.
pub fn run_easier_k(w_init: Network, data: &Dataset, policy: &TrainPolicy, cfg: &EasierConfig, k: usize) -> Result<(Network, EasierRunState)> {
    let cfg = EasierConfig {
        layers_per_iteration: k,
        ..cfg.clone()
    };
    run_easier(w_init, data, policy, &cfg)
}

pub fn run_easier_with(
    w_init: Network,
    data: &Dataset,
    policy: &TrainPolicy,
    cfg: &EasierConfig,
    augment: Option<&Augmentation>,
    dataset_id: &str,
    observer: &mut dyn RunObserver,
) -> Result<(Network, EasierRunState)> {
    cfg.validate(w_init.eligible_layers().len())?;
    policy.validate()?;
    let finetune = cfg.finetune_policy.as_ref().unwrap_or(policy);
    let (train_split, val) = (&data.train, &data.val);
    val.require_non_empty("validation split")?;

    let mut net = train_with(w_init, train_split, policy, augment)?;
    let dense_acc = evaluate(&net, val)?;
    observer.dense(&net, dense_acc)?;
    let mut best = net.clone();
    let mut state = EasierRunState {
        iteration: 0,
        dense_acc,
        history: Vec::new(),
        best_iteration: 0,
        best_val_acc: dense_acc,
        stop_reason: None,
        violating: None,
    };
    let mut removed_total = 0;
    loop {
        if net.eligible_layers().is_empty() {
            state.stop_reason = Some(StopReason::NoEligibleLayers);
            break;
        }
        if cfg.max_iterations.is_some_and(|m| state.iteration >= m) {
            state.stop_reason = Some(StopReason::MaxIterations);
            break;
        }
        let iteration = state.iteration + 1;
        let wrap = |e: Error| Error::Iteration {
            iteration,
            source: Box::new(e),
        };
        // entropy is always measured on the training split
        let report = profile(&net, train_split, dataset_id).map_err(wrap)?;
        let take = cfg.layers_per_iteration.min(report.order.len());
        let chosen = report.order[..take].to_vec();
        net = linearize(&net, &chosen).map_err(wrap)?;
        net = train_with(net, train_split, finetune, augment).map_err(wrap)?;
        let val_acc = evaluate(&net, val).map_err(wrap)?;
        removed_total += chosen.len();
        let within_budget = dense_acc - val_acc <= cfg.delta + ACCURACY_EPS;
        let mut record = IterationRecord {
            iteration,
            linearized_layer_ids: chosen,
            removed_total,
            val_acc,
            entropy_min: report.min_entropy().unwrap_or(0.0),
            within_budget,
            checkpoint: None,
            entropy: report,
        };
        record.checkpoint = observer.iteration(&record, &net)?;
        state.history.push(record);
        state.iteration = iteration;
        if within_budget {
            best = net.clone();
            state.best_iteration = iteration;
            state.best_val_acc = val_acc;
        } else {
            state.violating = Some(net);
            state.stop_reason = Some(StopReason::BudgetExceeded);
            break;
        }
    }
    Ok((best, state))
}

/// Cold-start comparison: linearize the given layers of the *initial*
/// network and train it from scratch under `policy`.
pub fn retrain_cold(
    w_init: &Network,
    linearized: &[String],
    train_split: &DatasetSplit,
    policy: &TrainPolicy,
) -> Result<Network> {
    let net = linearize(w_init, linearized)?;
    train_with(net, train_split, policy, None)
}

/// `iteration,removed_total,val_acc,chosen_layer_ids,entropy_min` rows.
pub fn history_csv(state: &EasierRunState) -> String {
    let mut out = String::from("iteration,removed_total,val_acc,chosen_layer_ids,entropy_min\n");
    for r in &state.history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iteration,
            r.removed_total,
            r.val_acc,
            r.linearized_layer_ids.join(";"),
            r.entropy_min
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::NetworkSpec;
    use crate::tensor::Tensor;

    fn mlp() -> Network {
        let spec: NetworkSpec = "input 2\na dense in=2 out=4 act=relu\nb dense in=4 out=4 act=relu\nout dense in=4 out=2 act=relu\n"
            .parse()
            .unwrap();
        Network::new(spec, 3).unwrap()
    }

    #[test]
    fn empty_linearization_is_a_no_op() {
        let net = mlp();
        assert_eq!(linearize(&net, &[]).unwrap(), net);
    }

    #[test]
    fn output_layer_cannot_be_linearized() {
        let err = linearize(&mlp(), &["out".to_string()]).unwrap_err();
        assert!(matches!(err, Error::NotEligible(id) if id == "out"));
    }

    #[test]
    fn linearized_layers_leave_eligibility() {
        let net = linearize(&mlp(), &["b".to_string()]).unwrap();
        assert_eq!(net.eligible_layers(), ["a"]);
        assert!(linearize(&net, &["b".to_string()]).is_err());
    }

    #[test]
    fn mixed_sign_layer_changes_outputs() {
        // neuron 0 sees z = x, neuron 1 sees z = -x; one of them is negative
        let spec: NetworkSpec =
            "input 1\nh dense in=1 out=2 act=relu\nout dense in=2 out=1\n".parse().unwrap();
        let mut params = std::collections::BTreeMap::new();
        let mut h = crate::engine::ParamMap::new();
        h.insert("weight".into(), Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap());
        h.insert("bias".into(), Tensor::zeros(&[2]));
        let mut o = crate::engine::ParamMap::new();
        o.insert("weight".into(), Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        o.insert("bias".into(), Tensor::zeros(&[1]));
        params.insert("h".to_string(), h);
        params.insert("out".to_string(), o);
        let net = Network::from_parts(spec, params).unwrap();
        let x = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let before = net.forward(&x, false).unwrap().logits;
        let after = linearize(&net, &["h".to_string()]).unwrap().forward(&x, false).unwrap().logits;
        assert_eq!(before.data(), &[2.0]);
        assert_eq!(after.data(), &[0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(EasierConfig::new(-0.1).validate(3).is_err());
        let mut cfg = EasierConfig::new(0.02);
        cfg.layers_per_iteration = 4;
        assert!(cfg.validate(3).is_err());
        cfg.layers_per_iteration = 3;
        assert!(cfg.validate(3).is_ok());
    }
}
