//! Forward evaluation of the parallel convolutional network
//!
//! ```text
//! f_w(x) = Σ_k w_k · mean_{(i,j) pooled} o^{(L)}_{(i,j),1,k}
//! ```
//!
//! where every sub-network `k` is a stack of `L` logistic convolution layers
//! evaluated over the whole grid. Window terms that fall outside the image
//! are dropped, which is the same as zero padding on the bottom/right edge.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Image, Topology, TopologyError, WeightVector};
use crate::sum::CompensatedSum;

/// Logistic squasher `1/(1+e^{-x})`, evaluated without overflow for any
/// finite input.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Returns `(σ(x), σ'(x))` with a single exponential. `σ'(x) = e/(1+e)²`
/// with `e = e^{-|x|}` is accurate even where `σ(x)` rounds to 1.
#[inline]
pub fn logistic_with_derivative(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let inv = 1.0 / (1.0 + e);
    let value = if x >= 0.0 { inv } else { e * inv };
    (value, e * inv * inv)
}

/// Clamps `z` to `[-beta, beta]`.
#[inline]
pub fn truncate(z: f64, beta: f64) -> f64 {
    z.clamp(-beta, beta)
}

/// Plug-in rule: label 1 iff the estimate is at least 1/2.
#[inline]
pub fn plug_in_label(value: f64) -> u8 {
    u8::from(value >= 0.5)
}

/// Every activation and pre-activation of one sub-network on one image.
///
/// Layer `r` is stored channel-major: entry `(s, i, j)` lives at
/// `(s * d1 + i) * d2 + j`. `activations[0]` is the input image, and
/// `pre_activations[0]` / `derivatives[0]` are empty.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub activations: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
    /// `σ'(u)` for every pre-activation `u`.
    pub derivatives: Vec<Vec<f64>>,
    d1: usize,
    d2: usize,
}

impl ActivationCache {
    pub fn new(t: &Topology) -> Self {
        let plane = t.d1 * t.d2;
        let activations = (0..=t.layers).map(|r| vec![0.0; t.channels[r] * plane]).collect();
        let hidden = |r: usize| if r == 0 { Vec::new() } else { vec![0.0; t.channels[r] * plane] };
        Self {
            activations,
            pre_activations: (0..=t.layers).map(hidden).collect(),
            derivatives: (0..=t.layers).map(hidden).collect(),
            d1: t.d1,
            d2: t.d2,
        }
    }

    /// `o^{(r)}_{(i,j),s}` with 0-based channel and position.
    #[inline]
    pub fn activation(&self, r: usize, s: usize, i: usize, j: usize) -> f64 {
        self.activations[r][(s * self.d1 + i) * self.d2 + j]
    }

    #[inline]
    pub fn pre_activation(&self, r: usize, s: usize, i: usize, j: usize) -> f64 {
        self.pre_activations[r][(s * self.d1 + i) * self.d2 + j]
    }
}

pub(crate) fn check_image(image: &Image, t: &Topology) -> Result<()> {
    if image.d1() != t.d1 || image.d2() != t.d2 {
        return Err(Error::Dimension(format!(
            "image is {}x{}, topology expects {}x{}",
            image.d1(),
            image.d2(),
            t.d1,
            t.d2
        )));
    }
    Ok(())
}

fn check_subnetwork(k: usize, t: &Topology) -> Result<()> {
    if k >= t.subnetworks {
        return Err(Error::Dimension(format!(
            "sub-network index {k} out of range for K = {}",
            t.subnetworks
        )));
    }
    Ok(())
}

/// Fills `cache` for sub-network `k` and returns its pooled output. The
/// caller guarantees matching dimensions.
pub(crate) fn subnetwork_into(
    weights: &WeightVector,
    k: usize,
    image: &Image,
    cache: &mut ActivationCache,
) -> f64 {
    let t = weights.topology();
    let (d1, d2) = (t.d1, t.d2);
    let plane = d1 * d2;
    cache.activations[0].copy_from_slice(image.pixels());

    for r in 1..=t.layers {
        let m = t.window(r);
        let c_in = t.channels[r - 1];
        let c_out = t.channels[r];
        let filters = weights.filters_of(r, k);
        let biases = weights.biases_of(r, k);
        let (lower, upper) = cache.activations.split_at_mut(r);
        let prev = &lower[r - 1];
        let out = &mut upper[0];
        let pre = &mut cache.pre_activations[r];
        let der = &mut cache.derivatives[r];

        if m == 1 {
            // pointwise layer; same summation order as the general loop
            for s2 in 0..c_out {
                let u = &mut pre[s2 * plane..(s2 + 1) * plane];
                u.fill(biases[s2]);
                for s1 in 0..c_in {
                    let w = filters[s2 * c_in + s1];
                    let p = &prev[s1 * plane..(s1 + 1) * plane];
                    for (acc, x) in u.iter_mut().zip(p) {
                        *acc += w * x;
                    }
                }
                let o = &mut out[s2 * plane..(s2 + 1) * plane];
                let d = &mut der[s2 * plane..(s2 + 1) * plane];
                for ((&u, o), d) in u.iter().zip(o.iter_mut()).zip(d.iter_mut()) {
                    (*o, *d) = logistic_with_derivative(u);
                }
            }
            continue;
        }

        for s2 in 0..c_out {
            let bias = biases[s2];
            for i in 0..d1 {
                let rows = m.min(d1 - i);
                for j in 0..d2 {
                    let cols = m.min(d2 - j);
                    let mut u = bias;
                    for s1 in 0..c_in {
                        let w_base = (s2 * c_in + s1) * m * m;
                        let p_base = s1 * plane;
                        for t1 in 0..rows {
                            let w_row = &filters[w_base + t1 * m..w_base + t1 * m + cols];
                            let p_row = &prev[p_base + (i + t1) * d2 + j..p_base + (i + t1) * d2 + j + cols];
                            for (w, p) in w_row.iter().zip(p_row) {
                                u += w * p;
                            }
                        }
                    }
                    let idx = s2 * plane + i * d2 + j;
                    let (o, d) = logistic_with_derivative(u);
                    pre[idx] = u;
                    out[idx] = o;
                    der[idx] = d;
                }
            }
        }
    }

    pooled_mean(t, &cache.activations[t.layers])
}

fn pooled_mean(t: &Topology, last: &[f64]) -> f64 {
    let (p1, p2) = t.pooled_extent();
    let mut acc = CompensatedSum::new();
    for i in 0..p1 {
        for j in 0..p2 {
            acc.add(last[i * t.d2 + j]);
        }
    }
    acc.value() / (p1 * p2) as f64
}

/// Output of sub-network `k` (0-based) together with all intermediate values.
pub fn forward_subnetwork(
    weights: &WeightVector,
    k: usize,
    image: &Image,
) -> Result<(f64, ActivationCache)> {
    let t = weights.topology();
    check_image(image, t)?;
    check_subnetwork(k, t)?;
    let mut cache = ActivationCache::new(t);
    let value = subnetwork_into(weights, k, image, &mut cache);
    Ok((value, cache))
}

/// `Σ_k w_k · f_k(x)` with compensated accumulation in ascending `k`.
/// Sub-networks with a zero outer weight contribute nothing and are skipped.
pub fn forward(weights: &WeightVector, image: &Image) -> Result<f64> {
    check_image(image, weights.topology())?;
    let mut cache = ActivationCache::new(weights.topology());
    Ok(forward_with(weights, image, &mut cache))
}

pub(crate) fn forward_with(weights: &WeightVector, image: &Image, cache: &mut ActivationCache) -> f64 {
    let mut acc = CompensatedSum::new();
    for (k, &w) in weights.outer().iter().enumerate() {
        if w != 0.0 {
            acc.add(w * subnetwork_into(weights, k, image, cache));
        }
    }
    acc.value()
}

/// Evaluates many images; output order follows the input.
pub fn forward_batch(weights: &WeightVector, images: &[&Image]) -> Result<Vec<f64>> {
    for image in images {
        check_image(image, weights.topology())?;
    }
    Ok(images
        .par_iter()
        .map_init(
            || ActivationCache::new(weights.topology()),
            |cache, image| forward_with(weights, image, cache),
        )
        .collect())
}

/// Plug-in classifier of the network.
pub fn classify(weights: &WeightVector, image: &Image) -> Result<u8> {
    forward(weights, image).map(plug_in_label)
}

/// Evaluates sub-network `k` directly as a function of one `κ x κ` patch:
/// the first layer as a dense map of the `κ²` patch entries, the remaining
/// layers as 1x1 maps. Only defined when every window between the first
/// and the pooling layer is 1x1.
///
/// `patch` uses the image's own layout (`t1 * κ + t2`).
pub fn patch_response_oracle(weights: &WeightVector, k: usize, patch: &[f64]) -> Result<f64> {
    let t = weights.topology();
    check_subnetwork(k, t)?;
    if t.windows[1..t.layers].iter().any(|&m| m != 1) {
        return Err(Error::Topology(vec![TopologyError::InnerWindows]));
    }
    let m = t.window(1);
    if patch.len() != m * m {
        return Err(Error::Dimension(format!(
            "patch has {} entries, first-layer window needs {}",
            patch.len(),
            m * m
        )));
    }

    let mut hidden: Vec<f64> = (0..t.channels[1])
        .map(|s2| {
            let mut u = weights.bias(1, k, s2);
            for t1 in 0..m {
                for t2 in 0..m {
                    u += weights.filter(1, k, s2, 0, t1, t2) * patch[t1 * m + t2];
                }
            }
            logistic(u)
        })
        .collect();

    for r in 2..=t.layers {
        hidden = (0..t.channels[r])
            .map(|s2| {
                let mut u = weights.bias(r, k, s2);
                for (s1, h) in hidden.iter().enumerate() {
                    u += weights.filter(r, k, s2, s1, 0, 0) * h;
                }
                logistic(u)
            })
            .collect();
    }
    Ok(hidden[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, symmetric_uniform};

    fn tiny() -> (Topology, WeightVector) {
        // d = 2x2, κ = 1, L = 2, k_1 = 2
        let t = Topology::theorem1(2, 2, 1, 2, 1);
        let mut w = WeightVector::zeros(&t).unwrap();
        w.set_filter(1, 0, 0, 0, 0, 0, 1.0);
        w.set_filter(2, 0, 0, 0, 0, 0, 1.0);
        (t, w)
    }

    fn random_weights(t: &Topology, seed: u64, scale: f64) -> WeightVector {
        let mut rng = stream(seed, "network-test", 0);
        let values = (0..t.parameter_count())
            .map(|_| symmetric_uniform(&mut rng, scale))
            .collect();
        WeightVector::from_flat(t, values).unwrap()
    }

    fn random_image(d1: usize, d2: usize, seed: u64) -> Image {
        use rand::Rng;
        let mut rng = stream(seed, "network-image", 0);
        Image::new(d1, d2, (0..d1 * d2).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn logistic_values() {
        assert_eq!(logistic(0.0), 0.5);
        for x in [0.1, 1.0, 5.0, 50.0] {
            assert!((logistic(x) + logistic(-x) - 1.0).abs() < 1e-15);
        }
        let v = logistic(700.0);
        assert!(v.is_finite() && v <= 1.0 && v > 1.0 - 1e-15);
        let tiny = logistic(-700.0);
        assert!(tiny > 0.0 && tiny.is_finite());
        assert!(logistic(1e8).is_finite() && logistic(-1e8).is_finite());
    }

    #[test]
    fn derivative_matches_closed_form() {
        for x in [-30.0, -3.0, -0.2, 0.0, 0.7, 4.0, 30.0] {
            let (v, d) = logistic_with_derivative(x);
            assert_eq!(v, logistic(x));
            let expected = logistic(x) * logistic(-x);
            assert!((d - expected).abs() <= 1e-15 * expected.max(1e-300));
        }
    }

    #[test]
    fn truncation() {
        assert_eq!(truncate(2.5, 1.0), 1.0);
        assert_eq!(truncate(-0.3, 1.0), -0.3);
        assert_eq!(truncate(-7.0, 1.0), -1.0);
    }

    #[test]
    fn zero_weights_give_one_half() {
        let t = Topology::theorem1(4, 5, 2, 3, 2);
        let w = WeightVector::zeros(&t).unwrap();
        let img = random_image(4, 5, 1);
        let (v, cache) = forward_subnetwork(&w, 1, &img).unwrap();
        assert_eq!(v, 0.5);
        assert_eq!(cache.activations[0], img.pixels());
        assert_eq!(forward(&w, &img).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_two_by_two() {
        let (_, w) = tiny();
        let zero = Image::constant(2, 2, 0.0).unwrap();
        let (v, cache) = forward_subnetwork(&w, 0, &zero).unwrap();
        assert_eq!(cache.activation(1, 0, 1, 1), 0.5);
        assert!((v - 0.6224593312018546).abs() < 1e-15);

        let one_hot = Image::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let (v, _) = forward_subnetwork(&w, 0, &one_hot).unwrap();
        let expected = (logistic(logistic(1.0)) + 3.0 * logistic(logistic(0.0))) / 4.0;
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn outer_weights_scale_linearly() {
        let t = Topology::theorem1(3, 3, 1, 2, 1);
        let mut w = WeightVector::zeros(&t).unwrap();
        w.outer_mut()[0] = 2.0;
        let img = random_image(3, 3, 2);
        assert_eq!(forward(&w, &img).unwrap(), 1.0);
    }

    #[test]
    fn classify_threshold_is_inclusive() {
        assert_eq!(plug_in_label(0.5), 1);
        assert_eq!(plug_in_label(0.4999), 0);
        assert_eq!(plug_in_label(3.7), 1);
        assert_eq!(plug_in_label(truncate(3.7, 1.0)), 1);

        let t = Topology::theorem1(3, 3, 1, 2, 1);
        let mut w = WeightVector::zeros(&t).unwrap();
        w.outer_mut()[0] = 1.0; // f_w ≡ 0.5
        assert_eq!(classify(&w, &random_image(3, 3, 0)).unwrap(), 1);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let t = Topology::theorem1(3, 3, 1, 2, 1);
        let w = WeightVector::zeros(&t).unwrap();
        let img = Image::constant(4, 3, 0.0).unwrap();
        assert!(matches!(forward(&w, &img), Err(Error::Dimension(_))));
        assert!(matches!(forward_subnetwork(&w, 3, &Image::constant(3, 3, 0.0).unwrap()), Err(Error::Dimension(_))));
    }

    #[test]
    fn patch_oracle_examples() {
        let t = Topology::theorem1(4, 4, 2, 3, 1);
        let w = WeightVector::zeros(&t).unwrap();
        assert_eq!(patch_response_oracle(&w, 0, &[0.3; 4]).unwrap(), 0.5);

        let (_, w) = tiny();
        let v = patch_response_oracle(&w, 0, &[0.0]).unwrap();
        assert!((v - 0.6224593312018546).abs() < 1e-15);
    }

    #[test]
    fn patch_oracle_rejects_wide_inner_windows() {
        let mut t = Topology::theorem1(4, 4, 1, 3, 1);
        t.windows[1] = 2;
        let w = WeightVector::zeros(&t).unwrap();
        assert!(matches!(patch_response_oracle(&w, 0, &[0.0]), Err(Error::Topology(_))));
    }

    #[test]
    fn pooled_value_is_mean_of_patch_responses() {
        for (kappa, layers, seed) in [(1, 2, 3), (2, 2, 4), (2, 3, 5), (3, 2, 6)] {
            let t = Topology::theorem1(5, 4, kappa, layers, 2);
            let w = random_weights(&t, seed, 1.5);
            let img = random_image(5, 4, seed);
            let (p1, p2) = t.pooled_extent();
            for k in 0..2 {
                let (v, _) = forward_subnetwork(&w, k, &img).unwrap();
                let mut total = 0.0;
                for i in 0..p1 {
                    for j in 0..p2 {
                        total += patch_response_oracle(&w, k, &img.patch(i, j, kappa)).unwrap();
                    }
                }
                assert!((v - total / (p1 * p2) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_matches_single_evaluations() {
        let t = Topology::theorem1(4, 4, 2, 2, 3);
        let w = random_weights(&t, 9, 1.0);
        let imgs: Vec<Image> = (0..5).map(|s| random_image(4, 4, s)).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let batch = forward_batch(&w, &refs).unwrap();
        for (img, v) in imgs.iter().zip(batch) {
            assert_eq!(forward(&w, img).unwrap(), v);
        }
    }
}
