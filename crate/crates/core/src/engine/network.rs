use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::ops;
use crate::engine::spec::{LayerKind, LayerSpec, NetworkSpec, PoolKind};
use crate::error::{Error, Result};
use crate::rectifiers::{self, ActivationKind, PRELU_INIT_SLOPE};
use crate::tensor::Tensor;

/// Named parameter tensors of one layer.
pub type ParamMap = BTreeMap<String, Tensor>;

/// Gradients keyed like [`Network::params`], trainable entries only.
pub type Grads = BTreeMap<String, ParamMap>;

/// Batch-norm buffers; everything else in a [`ParamMap`] is trainable.
pub const BUFFER_NAMES: [&str; 2] = ["running_mean", "running_var"];

/// Momentum of the batch-norm running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm layers.
    Train,
    /// Frozen running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: BTreeMap<String, ParamMap>,
    shapes: Vec<Vec<usize>>,
    eligible: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Pre-activation `z` of every eligible layer, when requested.
    pub preacts: Option<BTreeMap<String, Tensor>>,
}

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Backprop {
    pub loss: f64,
    pub grads: Grads,
    pub batch_stats: Vec<BatchStats>,
}

enum Aux {
    None,
    Bn { x_hat: Tensor, inv_std: Vec<f64> },
    MaxIdx(Vec<usize>),
}

struct Cache {
    input_shape: Vec<usize>,
    input: Option<Tensor>,
    preact: Option<Tensor>,
    aux: Aux,
}

struct Pass {
    logits: Tensor,
    caches: Vec<Cache>,
    preacts: Option<BTreeMap<String, Tensor>>,
    batch_stats: Vec<BatchStats>,
}

impl Network {
    /// Builds and initializes a network from one seeded stream.
    ///
    /// Weights are uniform in `±sqrt(6 / fan_in)` for layers followed by a
    /// rectifier and `±sqrt(3 / fan_in)` otherwise; biases start at zero,
    /// batch-norm at the identity, PReLU slopes at 0.25. Layers draw from the
    /// stream in forward order.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for layer in &spec.layers {
            let mut map = ParamMap::new();
            for (name, shape) in spec.param_shapes(layer) {
                let tensor = match name {
                    "weight" => {
                        let fan_in: usize = shape[1..].iter().product();
                        let gain = if layer.has_rectifier() { 6.0 } else { 3.0 };
                        let bound = (gain / fan_in as f64).sqrt();
                        let n: usize = shape.iter().product();
                        let data = (0..n)
                            .map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound)
                            .collect();
                        Tensor::new(shape, data)?
                    }
                    "gamma" | "running_var" => Tensor::full(&shape, 1.0),
                    "slope" => Tensor::full(&shape, PRELU_INIT_SLOPE),
                    _ => Tensor::zeros(&shape),
                };
                map.insert(name.to_string(), tensor);
            }
            params.insert(layer.id.clone(), map);
        }
        let eligible = spec.eligible_layers();
        Ok(Network {
            spec,
            params,
            shapes,
            eligible,
        })
    }

    /// Assembles a network from explicit parameters, checking every declared
    /// tensor is present with the declared shape.
    pub fn from_parts(spec: NetworkSpec, mut params: BTreeMap<String, ParamMap>) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut checked = BTreeMap::new();
        for layer in &spec.layers {
            let mut given = params.remove(&layer.id).unwrap_or_default();
            let mut map = ParamMap::new();
            for (name, shape) in spec.param_shapes(layer) {
                let t = given.remove(name).ok_or_else(|| {
                    Error::shape(&layer.id, format!("missing parameter `{name}`"))
                })?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape(
                        &layer.id,
                        format!("parameter `{name}` has shape {:?}, expected {shape:?}", t.shape()),
                    ));
                }
                map.insert(name.to_string(), t);
            }
            if let Some(extra) = given.keys().next() {
                return Err(Error::shape(&layer.id, format!("unexpected parameter `{extra}`")));
            }
            checked.insert(layer.id.clone(), map);
        }
        if let Some(extra) = params.keys().next() {
            return Err(Error::UnknownLayer(extra.clone()));
        }
        let eligible = spec.eligible_layers();
        Ok(Network {
            spec,
            params: checked,
            shapes,
            eligible,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &BTreeMap<String, ParamMap> {
        &self.params
    }

    pub fn layer_params(&self, id: &str) -> Option<&ParamMap> {
        self.params.get(id)
    }

    pub(crate) fn param_mut(&mut self, layer: &str, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(layer)?.get_mut(name)
    }

    /// Candidate layers for linearization, in forward order.
    pub fn eligible_layers(&self) -> &[String] {
        &self.eligible
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    /// Per-sample output shape of each layer.
    pub fn output_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().map_or(0, |s| s[0])
    }

    pub fn depth(&self) -> usize {
        self.spec.layers.len()
    }

    /// Replaces the activation of one layer. Dropping a PReLU discards its slope.
    pub fn set_activation(&mut self, id: &str, activation: Option<ActivationKind>) -> Result<()> {
        let pos = self
            .spec
            .position(id)
            .ok_or_else(|| Error::UnknownLayer(id.to_string()))?;
        let mut spec = self.spec.clone();
        spec.layers[pos].activation = activation;
        spec.validate()?;
        let map = self.params.get_mut(id).expect("params exist for every layer");
        if activation == Some(ActivationKind::PReLU) {
            map.entry("slope".into())
                .or_insert_with(|| Tensor::full(&[1], PRELU_INIT_SLOPE));
        } else {
            map.remove("slope");
        }
        self.spec = spec;
        self.eligible = self.spec.eligible_layers();
        Ok(())
    }

    fn prelu_slope(&self, id: &str) -> Option<f64> {
        self.params
            .get(id)
            .and_then(|m| m.get("slope"))
            .map(|t| t.data()[0])
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != self.spec.input_shape.len() + 1
            || batch.shape()[1..] != self.spec.input_shape[..]
        {
            return Err(Error::shape(
                "input",
                format!(
                    "batch {:?} does not match input shape {:?}",
                    batch.shape(),
                    self.spec.input_shape
                ),
            ));
        }
        Ok(())
    }

    /// Inference pass with frozen batch-norm statistics.
    pub fn forward(&self, batch: &Tensor, record_preacts: bool) -> Result<ForwardOutput> {
        self.forward_with(batch, Mode::Eval, record_preacts)
    }

    /// Forward pass in either mode. In [`Mode::Train`] batch norm uses batch
    /// statistics and running statistics are left alone.
    pub fn forward_with(&self, batch: &Tensor, mode: Mode, record_preacts: bool) -> Result<ForwardOutput> {
        let pass = self.run(batch, mode, record_preacts, false)?;
        Ok(ForwardOutput {
            logits: pass.logits,
            preacts: pass.preacts,
        })
    }

    /// Forward pass in the given mode, returning logits only.
    pub fn logits(&self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.run(batch, mode, false, false)?.logits)
    }

    fn run(&self, batch: &Tensor, mode: Mode, record: bool, keep: bool) -> Result<Pass> {
        self.check_batch(batch)?;
        let n = batch.batch();
        let last = self.spec.layers.len() - 1;
        let mut cur = batch.clone();
        let mut skips: Vec<Tensor> = Vec::new();
        let mut caches = Vec::new();
        let mut preacts = record.then(BTreeMap::new);
        let mut batch_stats = Vec::new();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let p = &self.params[&layer.id];
            let mut aux = Aux::None;
            let input_shape = cur.shape().to_vec();
            let keep_input = keep
                && matches!(layer.kind, LayerKind::Dense { .. } | LayerKind::Conv2d { .. });
            let z = match &layer.kind {
                LayerKind::Dense { .. } => ops::dense_forward(&cur, &p["weight"], p.get("bias")),
                LayerKind::Conv2d {
                    stride, padding, ..
                } => ops::conv2d_forward(&cur, &p["weight"], p.get("bias"), *stride, *padding),
                LayerKind::BatchNorm { eps, .. } => {
                    let (gamma, beta) = (p["gamma"].data(), p["beta"].data());
                    if mode == Mode::Train {
                        let out = ops::batchnorm_train(&cur, gamma, beta, *eps);
                        batch_stats.push(BatchStats {
                            layer: layer.id.clone(),
                            mean: out.mean,
                            var: out.var_unbiased,
                        });
                        if keep {
                            aux = Aux::Bn {
                                x_hat: out.x_hat,
                                inv_std: out.inv_std,
                            };
                        }
                        out.y
                    } else {
                        let (scale, shift) = bn_affine(p, *eps);
                        ops::channel_affine(&cur, &scale, &shift)
                    }
                }
                LayerKind::Pool { kind, size } => match kind {
                    PoolKind::Max => {
                        let (y, idx) = ops::max_pool_forward(&cur, *size);
                        if keep {
                            aux = Aux::MaxIdx(idx);
                        }
                        y
                    }
                    PoolKind::Avg => ops::avg_pool_forward(&cur, *size),
                    PoolKind::Global => ops::global_pool_forward(&cur),
                },
                LayerKind::Flatten => {
                    let item = cur.item_len();
                    cur.clone().reshape(vec![n, item])?
                }
                LayerKind::ResidualBegin { .. } => {
                    skips.push(cur.clone());
                    cur.clone()
                }
                LayerKind::ResidualEnd { .. } => {
                    let skip = skips
                        .pop()
                        .ok_or_else(|| Error::shape(&layer.id, "unbalanced residual"))?;
                    let mut z = cur.clone();
                    z.add_assign(&skip).map_err(|_| Error::shape(&layer.id, "residual join"))?;
                    z
                }
            };
            if let Some(map) = preacts.as_mut() {
                if i != last && layer.has_rectifier() {
                    map.insert(layer.id.clone(), z.clone());
                }
            }
            let act = layer.activation.filter(|a| a.is_rectifier());
            let y = match act {
                Some(a) => rectifiers::apply(a, &z, self.prelu_slope(&layer.id)),
                None => z.clone(),
            };
            if keep {
                caches.push(Cache {
                    input_shape,
                    input: keep_input.then(|| cur.clone()),
                    preact: act.map(|_| z),
                    aux,
                });
            }
            cur = y;
        }
        Ok(Pass {
            logits: cur,
            caches,
            preacts,
            batch_stats,
        })
    }

    /// Mean cross-entropy loss and parameter gradients for one batch, with
    /// batch-norm layers using batch statistics.
    pub fn backward(&self, batch: &Tensor, labels: &[usize]) -> Result<Backprop> {
        if labels.len() != batch.batch() {
            return Err(Error::shape(
                "labels",
                format!("{} labels for batch of {}", labels.len(), batch.batch()),
            ));
        }
        let classes = self.classes();
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Label {
                index,
                label,
                classes,
            });
        }
        let pass = self.run(batch, Mode::Train, false, true)?;
        let (loss, mut g) = cross_entropy(&pass.logits, labels)?;
        let mut grads = Grads::new();
        let mut skip_grads: Vec<Tensor> = Vec::new();
        for (i, (layer, cache)) in self
            .spec
            .layers
            .iter()
            .zip(pass.caches)
            .enumerate()
            .rev()
        {
            let p = &self.params[&layer.id];
            let mut lg = ParamMap::new();
            if let (Some(act), Some(z)) = (layer.activation, cache.preact.as_ref()) {
                let (dz, dslope) = rectifiers::apply_grad(act, z, &g, self.prelu_slope(&layer.id))?;
                if let Some(ds) = dslope {
                    lg.insert("slope".into(), Tensor::scalar(ds));
                }
                g = dz;
            }
            let need_dx = i > 0;
            g = match &layer.kind {
                LayerKind::Dense { .. } => {
                    let x = cache.input.as_ref().expect("dense input cached");
                    let (dx, dw, db) = ops::dense_backward(x, &p["weight"], &g, need_dx);
                    lg.insert("weight".into(), dw);
                    if p.contains_key("bias") {
                        lg.insert("bias".into(), db);
                    }
                    dx.unwrap_or_else(|| Tensor::zeros(&cache.input_shape))
                }
                LayerKind::Conv2d {
                    stride, padding, ..
                } => {
                    let x = cache.input.as_ref().expect("conv input cached");
                    let (dx, dw, db) =
                        ops::conv2d_backward(x, &p["weight"], &g, *stride, *padding, need_dx);
                    lg.insert("weight".into(), dw);
                    if p.contains_key("bias") {
                        lg.insert("bias".into(), db);
                    }
                    dx.unwrap_or_else(|| Tensor::zeros(&cache.input_shape))
                }
                LayerKind::BatchNorm { .. } => {
                    let Aux::Bn { x_hat, inv_std } = &cache.aux else {
                        unreachable!("batchnorm cache")
                    };
                    let c = inv_std.len();
                    let (dx, dgamma, dbeta) =
                        ops::batchnorm_backward(x_hat, inv_std, p["gamma"].data(), &g);
                    lg.insert("gamma".into(), Tensor::new(vec![c], dgamma)?);
                    lg.insert("beta".into(), Tensor::new(vec![c], dbeta)?);
                    dx
                }
                LayerKind::Pool { kind, size } => match kind {
                    PoolKind::Max => {
                        let Aux::MaxIdx(idx) = &cache.aux else {
                            unreachable!("max pool cache")
                        };
                        ops::max_pool_backward(&cache.input_shape, idx, &g)
                    }
                    PoolKind::Avg => ops::avg_pool_backward(&cache.input_shape, *size, &g),
                    PoolKind::Global => ops::global_pool_backward(&cache.input_shape, &g),
                },
                LayerKind::Flatten => g.reshape(cache.input_shape.clone())?,
                LayerKind::ResidualEnd { .. } => {
                    skip_grads.push(g.clone());
                    g
                }
                LayerKind::ResidualBegin { .. } => {
                    let skip = skip_grads
                        .pop()
                        .ok_or_else(|| Error::shape(&layer.id, "unbalanced residual"))?;
                    g.add_assign(&skip)?;
                    g
                }
            };
            if !lg.is_empty() {
                grads.insert(layer.id.clone(), lg);
            }
        }
        Ok(Backprop {
            loss,
            grads,
            batch_stats: pass.batch_stats,
        })
    }

    /// Folds one batch's statistics into the running estimates.
    pub(crate) fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for s in stats {
            let map = self.params.get_mut(&s.layer).expect("batchnorm layer");
            for (name, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let t = map.get_mut(name).expect("batchnorm buffer");
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }

    pub fn layer_spec(&self, id: &str) -> Option<&LayerSpec> {
        self.spec.layer(id)
    }
}

/// Inference-mode batch norm as `(scale, shift)` per channel.
pub fn bn_affine(p: &ParamMap, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (gamma, beta) = (p["gamma"].data(), p["beta"].data());
    let (mean, var) = (p["running_mean"].data(), p["running_var"].data());
    let scale: Vec<f64> = gamma
        .iter()
        .zip(var)
        .map(|(g, v)| g / (v + eps).sqrt())
        .collect();
    let shift = beta
        .iter()
        .zip(mean)
        .zip(&scale)
        .map(|((b, m), s)| b - m * s)
        .collect();
    (scale, shift)
}

/// Mean softmax cross-entropy, computed in log space, and its gradient with
/// respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = (logits.batch(), logits.item_len());
    if n == 0 {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    let mut grad = vec![0.0; n * c];
    let mut total = 0.0;
    for s in 0..n {
        let row = logits.item(s);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let loss = lse - row[labels[s]];
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { sample: s });
        }
        total += loss;
        for (k, g) in grad[s * c..(s + 1) * c].iter_mut().enumerate() {
            let p = (row[k] - lse).exp();
            *g = (p - if k == labels[s] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((total / n as f64, Tensor::new(vec![n, c], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(text: &str) -> Network {
        Network::new(text.parse().unwrap(), 1).unwrap()
    }

    #[test]
    fn identity_dense_passes_input() {
        let spec: NetworkSpec = "input 2\nfc dense in=2 out=2\n".parse().unwrap();
        let mut params = BTreeMap::new();
        let mut m = ParamMap::new();
        m.insert("weight".into(), Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap());
        m.insert("bias".into(), Tensor::zeros(&[2]));
        params.insert("fc".to_string(), m);
        let net = Network::from_parts(spec, params).unwrap();
        let x = Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
        assert_eq!(net.forward(&x, false).unwrap().logits.data(), &[3.0, -1.0]);
    }

    #[test]
    fn relu_layer_records_preactivation() {
        let spec: NetworkSpec =
            "input 1\nh dense in=1 out=1 act=relu\nout dense in=1 out=1\n".parse().unwrap();
        let mut params = BTreeMap::new();
        let mut h = ParamMap::new();
        h.insert("weight".into(), Tensor::full(&[1, 1], 2.0));
        h.insert("bias".into(), Tensor::full(&[1], 1.0));
        let mut o = ParamMap::new();
        o.insert("weight".into(), Tensor::full(&[1, 1], 1.0));
        o.insert("bias".into(), Tensor::zeros(&[1]));
        params.insert("h".to_string(), h);
        params.insert("out".to_string(), o);
        let net = Network::from_parts(spec, params).unwrap();
        let out = net.forward(&Tensor::full(&[1, 1], -3.0), true).unwrap();
        assert_eq!(out.preacts.unwrap()["h"].data(), &[-5.0]);
        assert_eq!(out.logits.data(), &[0.0]);
    }

    #[test]
    fn batch_shape_mismatch_is_an_error() {
        let n = net("input 3\nfc dense in=3 out=2\n");
        let err = n.forward(&Tensor::zeros(&[4, 2]), false).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::zeros(&[3, 5]);
        let (loss, _) = cross_entropy(&logits, &[0, 2, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_give_zero_loss() {
        let logits = Tensor::new(vec![2, 2], vec![1e4, -1e4, -1e4, 1e4]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0, 1]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn non_finite_logits_report_sample() {
        let logits = Tensor::new(vec![2, 2], vec![0.0, 1.0, f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            cross_entropy(&logits, &[0, 1]),
            Err(Error::NonFiniteLoss { sample: 1 })
        ));
    }

    #[test]
    fn zero_inner_residual_is_identity() {
        let mut n = net(
            "input 4\nb residual_begin tag=r\nc1 dense in=4 out=4 act=relu\nc2 dense in=4 out=4\ne residual_end tag=r\nfc dense in=4 out=4\n",
        );
        for id in ["c1", "c2"] {
            for t in n.params.get_mut(id).unwrap().values_mut() {
                t.data_mut().fill(0.0);
            }
        }
        let fc = n.params.get_mut("fc").unwrap();
        fc.get_mut("weight").unwrap().data_mut().copy_from_slice(&[
            1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.,
        ]);
        let x = Tensor::new(vec![2, 4], vec![0.3, -1.2, 5.0, 0.0, -7.5, 2.0, 1e-3, 4.0]).unwrap();
        assert_eq!(n.forward(&x, false).unwrap().logits, x);
    }

    #[test]
    fn labels_out_of_range() {
        let n = net("input 2\nfc dense in=2 out=2\n");
        let err = n.backward(&Tensor::zeros(&[1, 2]), &[2]).unwrap_err();
        assert!(matches!(err, Error::Label { label: 2, .. }));
    }

    #[test]
    fn set_activation_updates_eligibility_and_slope() {
        let mut n = net("input 2\na dense in=2 out=3 act=prelu\nfc dense in=3 out=2\n");
        assert_eq!(n.eligible_layers(), ["a"]);
        assert!(n.layer_params("a").unwrap().contains_key("slope"));
        n.set_activation("a", Some(ActivationKind::Identity)).unwrap();
        assert!(n.eligible_layers().is_empty());
        assert!(!n.layer_params("a").unwrap().contains_key("slope"));
    }
}
