use crate::data::{Augmentation, BatchStream, DatasetSplit};
use crate::engine::network::{Mode, Network};
use crate::engine::optim::{Optimizer, TrainPolicy};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch size used for inference passes.
pub const EVAL_BATCH: usize = 256;

/// Trains `net` on `data` under `policy`. Zero epochs return the network
/// untouched.
pub fn train(net: Network, data: &DatasetSplit, policy: &TrainPolicy) -> Result<Network> {
    train_with(net, data, policy, None)
}

/// Like [`train`], with optional train-time augmentation.
pub fn train_with(
    mut net: Network,
    data: &DatasetSplit,
    policy: &TrainPolicy,
    augment: Option<&Augmentation>,
) -> Result<Network> {
    policy.validate()?;
    data.require_non_empty("training split")?;
    if data.sample_shape() != net.input_shape() {
        return Err(Error::shape(
            "input",
            format!(
                "dataset samples {:?} vs network input {:?}",
                data.sample_shape(),
                net.input_shape()
            ),
        ));
    }
    let mut opt = Optimizer::new(policy.optimizer.clone());
    for epoch in 0..policy.epochs {
        let lr = policy.lr_at(epoch);
        let batches = BatchStream::new(data, policy.batch_size, augment, policy.seed, epoch)?;
        for (step, (x, y)) in batches.enumerate() {
            let bp = net.backward(&x, &y).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::Divergence { epoch, step },
                other => other,
            })?;
            if !bp.loss.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            opt.step(&mut net, &bp.grads, lr);
            net.update_running_stats(&bp.batch_stats);
        }
    }
    Ok(net)
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(net: &Network, inputs: &Tensor) -> Result<Vec<usize>> {
    let n = inputs.batch();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let logits = net.logits(&inputs.select(&idx), Mode::Eval)?;
        out.extend((0..logits.batch()).map(|i| argmax(logits.item(i))));
        start = end;
    }
    Ok(out)
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(net: &Network, data: &DatasetSplit) -> Result<f64> {
    data.require_non_empty("evaluation split")?;
    let preds = predict(net, &data.inputs)?;
    let correct = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}
