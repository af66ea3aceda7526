//! Analytic gradients against central finite differences, f64.

use easier_core::engine::{Mode, ParamMap, BUFFER_NAMES};
use easier_core::{ActivationKind, Network, NetworkSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::ops::Range;

const STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-6;
/// Below this magnitude the comparison becomes absolute (1e-9). Round-off
/// in the difference quotient is a few ε·|loss|/STEP ≈ 1e-10, which is all
/// a numeric estimate of an exactly-zero gradient (a bias feeding batch
/// norm, say) ever shows.
const FLOOR: f64 = 1e-3;

/// Inputs are redrawn until every piecewise-linear pre-activation is at
/// least this far from its kink, far beyond what a 2·STEP nudge can move it.
const KINK_MARGIN: f64 = 1e-4;

const ACTIVATIONS: [&str; 6] = ["relu", "leakyrelu(0.1)", "prelu", "gelu", "silu", "identity"];

fn loss(net: &Network, x: &Tensor, y: &[usize]) -> f64 {
    net.backward(x, y).unwrap().loss
}

fn perturbed(net: &Network, layer: &str, name: &str, idx: usize, delta: f64) -> Network {
    let mut params = net.params().clone();
    let t: &mut Tensor = params.get_mut(layer).unwrap().get_mut(name).unwrap();
    t.data_mut()[idx] += delta;
    Network::from_parts(net.spec().clone(), params).unwrap()
}

/// Worst relative error over a sample of parameter entries.
fn check(net: &Network, x: &Tensor, y: &[usize], rng: &mut ChaCha8Rng) -> (f64, usize, String) {
    let grads = net.backward(x, y).unwrap().grads;
    let (mut worst, mut checked, mut at) = (0.0f64, 0, String::new());
    for (layer, params) in net.params() {
        let params: &ParamMap = params;
        for (name, t) in params {
            if BUFFER_NAMES.contains(&name.as_str()) {
                continue;
            }
            let g = &grads[layer][name];
            assert_eq!(g.shape(), t.shape(), "{layer}/{name}");
            for _ in 0..4.min(t.len()) {
                let i = rng.random_range(0..t.len());
                let f = |d: f64| loss(&perturbed(net, layer, name, i, d), x, y);
                // Five-point central stencil. The three-point one leaves an
                // O(h²) term that batch norm over two or three samples blows
                // up past the tolerance.
                let numeric = (8.0 * (f(STEP) - f(-STEP)) - (f(2.0 * STEP) - f(-2.0 * STEP))) / (12.0 * STEP);
                let analytic = g.data()[i];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(FLOOR);
                if rel > worst {
                    worst = rel;
                    at = format!("{layer}/{name}[{i}]: analytic {analytic:e}, numeric {numeric:e}");
                }
                checked += 1;
            }
        }
    }
    (worst, checked, at)
}

fn near_kink(net: &Network, x: &Tensor) -> bool {
    let out = net.forward_with(x, Mode::Train, true).unwrap();
    out.preacts.unwrap().iter().any(|(id, z)| {
        let kinked = matches!(
            net.layer_spec(id).and_then(|l| l.activation),
            Some(ActivationKind::ReLU | ActivationKind::LeakyReLU { .. } | ActivationKind::PReLU)
        );
        kinked && z.data().iter().any(|v| v.abs() < KINK_MARGIN)
    })
}

fn random_input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

pub fn architecture(seed: u64, rng: &mut ChaCha8Rng) -> (NetworkSpec, Vec<usize>) {
    let act = ACTIVATIONS[seed as usize % ACTIVATIONS.len()];
    let act2 = ACTIVATIONS[(seed as usize / 6 + 1) % ACTIVATIONS.len()];
    let classes = rng.random_range(2..5);
    let text = match seed % 4 {
        0 => {
            let (a, b, c) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
            format!(
                "input {a}\nh1 dense in={a} out={b} act={act}\nh2 dense in={b} out={c} bias=false act={act2}\nout dense in={c} out={classes}\n"
            )
        }
        1 => {
            let (cin, mid) = (rng.random_range(1..3), rng.random_range(1..4));
            let stride = rng.random_range(1..3);
            let pad = rng.random_range(0..2);
            let pool = if seed % 8 == 1 { "max" } else { "avg" };
            let h = 12;
            let h1 = (h + 2 * pad - 3) / stride + 1;
            let hp = h1 / 2;
            let h2 = hp - 1;
            format!(
                "input {cin}x{h}x{h}\nc1 conv2d in={cin} out={mid} k=3 stride={stride} pad={pad} act={act}\np pool {pool} size=2\nc2 conv2d in={mid} out=2 k=2 bias=false\nbn batchnorm c=2 act={act2}\nf flatten\nout dense in={} out={classes}\n",
                2 * h2 * h2
            )
        }
        2 => {
            let w = rng.random_range(2..5);
            format!(
                "input 3\nstem dense in=3 out={w} act={act}\nr residual_begin tag=a\nr1 dense in={w} out={w} act={act2}\nbn batchnorm c={w}\nr2 dense in={w} out={w}\ne residual_end tag=a act={act}\nout dense in={w} out={classes}\n"
            )
        }
        _ => format!(
            "input 2x5x5\nc conv2d in=2 out=3 k=3 pad=1 act={act}\nr residual_begin tag=b\nrc conv2d in=3 out=3 k=3 pad=1\nrbn batchnorm c=3 act={act2}\ne residual_end tag=b act={act}\ng pool global\nf flatten\nout dense in=3 out={classes}\n"
        ),
    };
    let spec: NetworkSpec = text.parse().unwrap_or_else(|e| panic!("{e}\n{text}"));
    let shape = spec.input_shape.clone();
    (spec, shape)
}

/// Outcome of checking every seed in a range.
pub struct SuiteResult {
    pub cases: usize,
    pub checked: usize,
    pub worst: f64,
    pub failures: Vec<String>,
    pub uncovered: Vec<&'static str>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.uncovered.is_empty()
    }
}

fn activation_name(a: ActivationKind) -> &'static str {
    match a {
        ActivationKind::ReLU => "relu",
        ActivationKind::LeakyReLU { .. } => "leakyrelu",
        ActivationKind::PReLU => "prelu",
        ActivationKind::GELU => "gelu",
        ActivationKind::SiLU => "silu",
        ActivationKind::Identity => "identity",
    }
}

pub fn run_suite(seeds: Range<u64>) -> SuiteResult {
    let mut kinds = BTreeSet::new();
    let mut out = SuiteResult {
        cases: 0,
        checked: 0,
        worst: 0.0,
        failures: Vec::new(),
        uncovered: Vec::new(),
    };
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (spec, shape) = architecture(seed, &mut rng);
        for l in &spec.layers {
            kinds.insert(l.kind.name());
            if let Some(a) = l.activation {
                kinds.insert(activation_name(a));
            }
        }
        let net = Network::new(spec.clone(), seed).unwrap();
        let batch = rng.random_range(2..5);
        let mut full = vec![batch];
        full.extend(&shape);
        let Some(x) = (0..100)
            .map(|_| random_input(&full, &mut rng))
            .find(|x| !near_kink(&net, x))
        else {
            out.failures.push(format!("seed {seed}: no input away from the kinks"));
            continue;
        };
        let y: Vec<usize> = (0..batch).map(|_| rng.random_range(0..net.classes())).collect();
        let (worst, n, at) = check(&net, &x, &y, &mut rng);
        out.cases += 1;
        out.checked += n;
        out.worst = out.worst.max(worst);
        if worst > REL_TOL {
            out.failures.push(format!("seed {seed}: relative error {worst:e} at {at}\n{spec}"));
        }
    }
    let required = ["dense", "conv2d", "batchnorm", "pool", "flatten", "residual_end", "relu", "leakyrelu", "prelu", "gelu", "silu", "identity"];
    out.uncovered = required.into_iter().filter(|k| !kinds.contains(k)).collect();
    out
}
