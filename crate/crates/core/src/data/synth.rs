use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, DatasetSplit};
use crate::tensor::Tensor;

/// Angular extent of each spiral arm, in turns.
const SPIRAL_TURNS: f64 = 1.5;
/// Radius at which the arms start, keeping them apart near the origin.
const SPIRAL_R0: f64 = 0.1;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller; u1 is kept away from zero.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Two interleaved Archimedean spirals in the plane, one per class, with
/// additive Gaussian noise of standard deviation `noise_sigma`. Split 80/10/10.
///
/// Class `c` sample at arm position `t ∈ [0, 1)` sits at radius
/// `r = R0 + (1 − R0)·t` and angle `θ = 2π·turns·t + c·π`.
pub fn gen_spirals(n_per_class: usize, noise_sigma: f64, seed: u64) -> Dataset {
    let n_per_class = n_per_class.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(seed, crate::stream::DATA));
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for class in 0..2 {
        for _ in 0..n_per_class {
            let t: f64 = rng.random();
            let r = SPIRAL_R0 + (1.0 - SPIRAL_R0) * t;
            let theta = 2.0 * std::f64::consts::PI * SPIRAL_TURNS * t + class as f64 * std::f64::consts::PI;
            data.push(r * theta.cos() + noise_sigma * gaussian(&mut rng));
            data.push(r * theta.sin() + noise_sigma * gaussian(&mut rng));
            labels.push(class);
        }
    }
    let inputs = Tensor::new(vec![labels.len(), 2], data).expect("spiral shape");
    let all = DatasetSplit::new(inputs, labels, 2).expect("spiral labels");
    Dataset::split(all, seed)
}

/// Isotropic Gaussian blobs with centres evenly spaced on a circle of radius 2.
pub fn gen_blobs(n_per_class: usize, classes: usize, spread: f64, seed: u64) -> Dataset {
    let classes = classes.max(1);
    let n_per_class = n_per_class.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(seed, crate::stream::DATA));
    let mut data = Vec::with_capacity(2 * classes * n_per_class);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for class in 0..classes {
        let angle = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
        let (cx, cy) = (2.0 * angle.cos(), 2.0 * angle.sin());
        for _ in 0..n_per_class {
            data.push(cx + spread * gaussian(&mut rng));
            data.push(cy + spread * gaussian(&mut rng));
            labels.push(class);
        }
    }
    let inputs = Tensor::new(vec![labels.len(), 2], data).expect("blob shape");
    let all = DatasetSplit::new(inputs, labels, classes).expect("blob labels");
    Dataset::split(all, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Recovers the class of a noise-free spiral point from its polar form.
    fn radius_angle_class(x: f64, y: f64) -> usize {
        let r = (x * x + y * y).sqrt();
        let t = (r - SPIRAL_R0) / (1.0 - SPIRAL_R0);
        let expected = 2.0 * std::f64::consts::PI * SPIRAL_TURNS * t;
        let angle = y.atan2(x);
        let d0 = (angle - expected).rem_euclid(2.0 * std::f64::consts::PI);
        let d0 = d0.min(2.0 * std::f64::consts::PI - d0);
        if d0 < std::f64::consts::FRAC_PI_2 {
            0
        } else {
            1
        }
    }

    #[test]
    fn noiseless_spirals_follow_radius_angle_rule() {
        let ds = gen_spirals(100, 0.0, 5);
        for split in [&ds.train, &ds.val, &ds.test] {
            for i in 0..split.len() {
                let p = split.inputs.item(i);
                assert_eq!(radius_angle_class(p[0], p[1]), split.labels[i]);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(gen_spirals(30, 0.1, 9), gen_spirals(30, 0.1, 9));
        assert_ne!(gen_spirals(30, 0.1, 9), gen_spirals(30, 0.1, 10));
    }

    #[test]
    fn single_sample_per_class() {
        let ds = gen_spirals(1, 0.0, 0);
        assert_eq!(ds.train.len() + ds.val.len() + ds.test.len(), 2);
        assert_eq!(ds.train.len(), 2);
    }

    #[test]
    fn blobs_have_every_class() {
        let ds = gen_blobs(20, 3, 0.3, 1);
        let mut seen = [false; 3];
        for &l in &ds.train.labels {
            seen[l] = true;
        }
        assert_eq!(seen, [true; 3]);
    }
}
