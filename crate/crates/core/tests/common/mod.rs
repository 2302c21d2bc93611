//! Helpers shared by the integration tests.
#![allow(dead_code)]

use geoscore::classifier::{Architecture, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

pub fn random_batch(c: usize, n: usize, side: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor {
        c,
        n,
        h: side,
        w: side,
        data: (0..c * n * side * side)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect(),
    }
}

/// Central differences at step 1e-3 on random coordinates, skipping any
/// coordinate whose perturbation flips a ReLU (the loss is not
/// differentiable there). Returns (checked, worst relative error).
pub fn gradient_check(arch: Architecture, n_classes: usize, seed: u64, coords: usize) -> (usize, f64) {
    let (c, side, n) = (3, 9, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::<f64>::new(arch, (c, side, side), n_classes, 4, &mut rng);
    let x = random_batch(c, n, side, seed + 100);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_classes)).collect();
    let (_, grad) = net.loss_and_gradient(x.clone(), &labels);
    let base = net.relu_pattern(x.clone());
    let h = 1e-3;
    let (mut checked, mut worst) = (0, 0.0f64);
    let mut attempts = 0;
    while checked < coords {
        attempts += 1;
        assert!(attempts < 20 * coords, "too many kinked coordinates");
        let idx = rng.random_range(0..net.params().len());
        let mut plus = net.clone();
        plus.params_mut()[idx] += h;
        let mut minus = net.clone();
        minus.params_mut()[idx] -= h;
        if plus.relu_pattern(x.clone()) != base || minus.relu_pattern(x.clone()) != base {
            continue;
        }
        let fd = (plus.loss(x.clone(), &labels) - minus.loss(x.clone(), &labels)) / (2.0 * h);
        let an = grad[idx];
        let scale = an.abs().max(fd.abs());
        if scale < 1e-6 {
            // roundoff in the difference quotient is ~1e-12 here, too
            // coarse for a relative comparison
            assert!((an - fd).abs() < 1e-9);
            continue;
        }
        worst = worst.max((an - fd).abs() / scale);
        checked += 1;
    }
    (checked, worst)
}

/// Dirichlet draws as normalized independent gamma variates.
pub fn sample_dirichlet(alpha: &[f64], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gammas: Vec<Gamma<f64>> = alpha.iter().map(|&a| Gamma::new(a, 1.0).unwrap()).collect();
    (0..n)
        .map(|_| {
            let g: Vec<f64> = gammas.iter().map(|d| d.sample(&mut rng)).collect();
            let s: f64 = g.iter().sum();
            g.iter().map(|v| v / s).collect()
        })
        .collect()
}
