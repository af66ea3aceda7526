//! Shared fixtures for the benchmarks.

use easier_core::data::{gen_spirals, Dataset};
use easier_core::presets::mlp;
use easier_core::{ActivationKind, Network, NetworkSpec};

/// 200 points per class, two spirals.
pub fn spirals() -> Dataset {
    gen_spirals(200, 0.02, 7)
}

/// The 6×64 ReLU MLP used throughout the tests.
pub fn spiral_mlp() -> Network {
    Network::new(mlp(&[2], 6, 64, 2, ActivationKind::ReLU), 1).expect("preset is valid")
}

pub fn small_conv() -> Network {
    let spec: NetworkSpec = "input 3x16x16
c1 conv2d in=3 out=8 k=3 pad=1 act=relu
c2 conv2d in=8 out=8 k=3 act=identity
c3 conv2d in=8 out=8 k=3 act=relu
p pool global
f flatten
out dense in=8 out=4
"
    .parse()
    .expect("fixture spec is valid");
    Network::new(spec, 2).expect("fixture network is valid")
}
