//! Entropy-guided depth reduction for rectifier networks.
//!
//! The crate trains small classifiers, measures how often each rectifier
//! neuron switches between its ON and OFF regimes, replaces the
//! lowest-entropy activations with the identity, and folds the resulting
//! chains of affine layers into single layers.

// `!(x > 0.0)` style checks are there to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod cost;
pub mod data;
pub mod degeneration;
pub mod easier;
pub mod engine;
pub mod entropy;
pub mod error;
pub mod fold;
pub mod io;
pub mod presets;
pub mod rectifiers;
pub mod tensor;

pub use engine::{evaluate, train, LayerKind, LayerSpec, Network, NetworkSpec, TrainPolicy};
pub use error::{Error, Result};
pub use rectifiers::ActivationKind;
pub use tensor::Tensor;

/// Named sub-streams derived from a user seed.
pub(crate) mod stream {
    pub const DATA: u64 = 0x0da7_a000;
    pub const SPLIT: u64 = 0x5b11_7000;
    pub const SHUFFLE: u64 = 0x5e1f_0000_0000;
    pub const AUGMENT: u64 = 0xa116_0000;
}

/// SplitMix64 finalizer over `seed ^ stream`.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = (seed ^ stream).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
