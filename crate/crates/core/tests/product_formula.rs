//! Gradient of a 1x1-window network written out as an explicit sum over
//! all channel paths, each path contributing a product of
//! `σ'(u) · w` factors, compared with the backpropagated gradient.

use overcnn::gradients::grad_penalized_risk;
use overcnn::network::{forward, forward_subnetwork, ActivationCache};
use overcnn::rng::{stream, symmetric_uniform};
use overcnn::{Dataset, Image, Sample, Topology, WeightVector};
use rand::Rng;

fn sigma_prime(cache: &ActivationCache, r: usize, s: usize, i: usize, j: usize) -> f64 {
    let a = cache.activation(r, s, i, j);
    a * (1.0 - a)
}

/// `∂o^{(L)}_0 / ∂u^{(r)}_s` at one position, by enumerating every path
/// `s = s_r → s_{r+1} → ... → s_L = 0`.
fn path_sum(w: &WeightVector, k: usize, cache: &ActivationCache, r: usize, s: usize, i: usize, j: usize) -> f64 {
    let t = w.topology();
    let here = sigma_prime(cache, r, s, i, j);
    if r == t.layers {
        return here;
    }
    (0..t.channels[r + 1])
        .map(|next| w.filter(r + 1, k, next, s, 0, 0) * path_sum(w, k, cache, r + 1, next, i, j))
        .sum::<f64>()
        * here
}

fn product_formula_gradient(w: &WeightVector, data: &Dataset, c4: f64) -> Vec<f64> {
    let t = w.topology().clone();
    let layout = w.layout().clone();
    let n = data.len() as f64;
    let (p1, p2) = t.pooled_extent();
    let positions = (p1 * p2) as f64;
    let mut grad = vec![0.0; w.len()];
    for sample in data.samples() {
        let residual = forward(w, &sample.image).unwrap() - sample.label as f64;
        for k in 0..t.subnetworks {
            let (value, cache) = forward_subnetwork(w, k, &sample.image).unwrap();
            grad[layout.outer(k)] += 2.0 / n * residual * value;
            let wk = w.outer()[k];
            for r in 1..=t.layers {
                for s2 in 0..t.channels[r] {
                    for i in 0..p1 {
                        for j in 0..p2 {
                            let common = 2.0 / n * residual * wk * path_sum(w, k, &cache, r, s2, i, j) / positions;
                            grad[layout.bias(&t, r, k, s2)] += common;
                            for s1 in 0..t.channels[r - 1] {
                                let input = if r == 1 {
                                    sample.image.get(i, j)
                                } else {
                                    cache.activation(r - 1, s1, i, j)
                                };
                                grad[layout.filter(&t, r, k, s2, s1, 0, 0)] += common * input;
                            }
                        }
                    }
                }
            }
        }
    }
    for k in 0..t.subnetworks {
        grad[layout.outer(k)] += 2.0 * c4 * w.outer()[k];
    }
    grad
}

#[test]
fn backpropagation_matches_the_product_formula() {
    let t = Topology::theorem1(3, 4, 1, 3, 2);
    let mut rng = stream(21, "product-formula", 0);
    let values = (0..t.parameter_count()).map(|_| symmetric_uniform(&mut rng, 1.5)).collect();
    let w = WeightVector::from_flat(&t, values).unwrap();
    let samples = (0..5)
        .map(|i| Sample {
            image: Image::new(3, 4, (0..12).map(|_| rng.gen()).collect()).unwrap(),
            label: (i % 2) as u8,
        })
        .collect();
    let data = Dataset::new(samples, "product-formula", 21).unwrap();
    let c4 = 0.3;
    let expected = product_formula_gradient(&w, &data, c4);
    let actual = grad_penalized_risk(&w, &data, c4).unwrap();
    for (idx, (a, e)) in actual.as_slice().iter().zip(&expected).enumerate() {
        assert!((a - e).abs() <= 1e-12 * e.abs().max(1e-3), "parameter {idx}: {a} vs {e}");
    }
}
