//! Layer-level reverse-mode engine: architecture IR, forward/backward,
//! optimizers, training, evaluation and checkpoints.

pub mod checkpoint;
mod network;
pub mod ops;
mod optim;
mod spec;
mod train;

pub use network::{bn_affine, cross_entropy, Backprop, BatchStats, ForwardOutput, Grads, Mode, Network, ParamMap, BN_MOMENTUM, BUFFER_NAMES};
pub use optim::{Optimizer, OptimizerKind, TrainPolicy};
pub use spec::{parse_shape, LayerKind, LayerSpec, NetworkSpec, PoolKind, DEFAULT_BN_EPS};
pub use train::{argmax, evaluate, predict, train, train_with, EVAL_BATCH};
