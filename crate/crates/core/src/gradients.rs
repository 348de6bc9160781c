//! Penalized empirical L2 risk
//!
//! ```text
//! F_n(w) = (1/n) Σ_i (Y_i - f_w(X_i))² + c4 · Σ_k w_k²
//! ```
//!
//! and its exact gradient by reverse accumulation through the convolution
//! recursion, plus a central finite-difference oracle and an empirical
//! estimate of the gradient's Lipschitz constant.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{l2_distance, Dataset, Gradient, Image, Sample, Topology, WeightVector};
use crate::network::{check_image, logistic, subnetwork_into, ActivationCache};
use crate::rng::stream;
use crate::sum::{compensated_sum, CompensatedSum};

/// Samples per reduction block. Fixed so that the reduction tree, and with
/// it every rounding, is independent of the number of threads.
const BLOCK: usize = 16;

fn check_data(weights: &WeightVector, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t = weights.topology();
    check_image(&data.samples()[0].image, t)
}

fn ridge_penalty(weights: &WeightVector, c4: f64) -> f64 {
    c4 * compensated_sum(weights.outer().iter().map(|w| w * w))
}

/// Squared residuals `(f_w(X_i) - Y_i)²` in sample order.
fn squared_residuals(weights: &WeightVector, data: &Dataset) -> Vec<f64> {
    let t = weights.topology();
    data.samples()
        .par_iter()
        .map_init(
            || ActivationCache::new(t),
            |cache, s| {
                let r = crate::network::forward_with(weights, &s.image, cache) - s.label as f64;
                r * r
            },
        )
        .collect()
}

/// Mean squared error of the network over the dataset.
pub fn empirical_risk(weights: &WeightVector, data: &Dataset) -> Result<f64> {
    check_data(weights, data)?;
    Ok(compensated_sum(squared_residuals(weights, data)) / data.len() as f64)
}

/// `empirical_risk + c4 · Σ_k w_k²`.
pub fn penalized_risk(weights: &WeightVector, data: &Dataset, c4: f64) -> Result<f64> {
    Ok(empirical_risk(weights, data)? + ridge_penalty(weights, c4))
}

/// Scratch space for one sample: a forward cache per sub-network plus
/// backward buffers.
struct Workspace {
    caches: Vec<ActivationCache>,
    outputs: Vec<f64>,
    delta_out: Vec<Vec<f64>>,
    delta_pre: Vec<f64>,
}

impl Workspace {
    fn new(t: &Topology) -> Self {
        let plane = t.d1 * t.d2;
        let widest = t.channels.iter().copied().max().unwrap_or(1);
        Self {
            caches: (0..t.subnetworks).map(|_| ActivationCache::new(t)).collect(),
            outputs: vec![0.0; t.subnetworks],
            delta_out: (0..=t.layers).map(|r| vec![0.0; t.channels[r] * plane]).collect(),
            delta_pre: vec![0.0; widest * plane],
        }
    }
}

/// Adds `∂/∂w` of `coef · Σ_{pooled (i,j)} o^{(L)}_{(i,j)}` for the inner
/// weights of sub-network `k` into `grad`.
fn backward_subnetwork(
    weights: &WeightVector,
    k: usize,
    coef: f64,
    cache: &ActivationCache,
    delta_out: &mut [Vec<f64>],
    delta_pre: &mut [f64],
    grad: &mut [f64],
) {
    let t = weights.topology();
    let layout = weights.layout();
    let (d1, d2) = (t.d1, t.d2);
    let plane = d1 * d2;
    let l = t.layers;

    delta_out[l].iter_mut().for_each(|v| *v = 0.0);
    let (p1, p2) = t.pooled_extent();
    for i in 0..p1 {
        for j in 0..p2 {
            delta_out[l][i * d2 + j] = coef;
        }
    }

    for r in (1..=l).rev() {
        let m = t.window(r);
        let c_in = t.channels[r - 1];
        let c_out = t.channels[r];
        let filters = weights.filters_of(r, k);
        let f_start = layout.filter_block(r, k);
        let b_start = layout.bias_block(r, k, c_out);
        let prev = &cache.activations[r - 1];
        let der = &cache.derivatives[r];

        let n_out = c_out * plane;
        for idx in 0..n_out {
            delta_pre[idx] = delta_out[r][idx] * der[idx];
        }

        let propagate = r > 1;
        let (lower, _) = delta_out.split_at_mut(r);
        let below = &mut lower[r - 1];
        if propagate {
            below.iter_mut().for_each(|v| *v = 0.0);
        }

        for s2 in 0..c_out {
            let dp = &delta_pre[s2 * plane..(s2 + 1) * plane];
            grad[b_start + s2] += dp.iter().sum::<f64>();
            if m == 1 {
                for s1 in 0..c_in {
                    let w = filters[s2 * c_in + s1];
                    let p = &prev[s1 * plane..(s1 + 1) * plane];
                    let mut acc = 0.0;
                    if propagate {
                        let b = &mut below[s1 * plane..(s1 + 1) * plane];
                        for ((&g, &x), bv) in dp.iter().zip(p).zip(b.iter_mut()) {
                            acc += g * x;
                            *bv += w * g;
                        }
                    } else {
                        for (&g, &x) in dp.iter().zip(p) {
                            acc += g * x;
                        }
                    }
                    grad[f_start + s2 * c_in + s1] += acc;
                }
                continue;
            }
            for s1 in 0..c_in {
                let w_base = (s2 * c_in + s1) * m * m;
                let p_base = s1 * plane;
                for t1 in 0..m {
                    for t2 in 0..m {
                        let w_idx = w_base + t1 * m + t2;
                        let w = filters[w_idx];
                        let mut acc = 0.0;
                        // outputs (i, j) whose window reaches input (i+t1, j+t2) inside the grid
                        let cols = d2 - t2;
                        for i in 0..d1 - t1 {
                            let src = p_base + (i + t1) * d2 + t2;
                            let row = &dp[i * d2..i * d2 + cols];
                            if propagate {
                                for (j, &g) in row.iter().enumerate() {
                                    acc += g * prev[src + j];
                                    below[src + j] += w * g;
                                }
                            } else {
                                for (j, &g) in row.iter().enumerate() {
                                    acc += g * prev[src + j];
                                }
                            }
                        }
                        grad[f_start + w_idx] += acc;
                    }
                }
            }
        }
    }
}

/// Per-sample work: forward through every sub-network, then accumulate the
/// gradient of `scale · (f_w(x) - y)²` into `grad`. Returns the residual.
fn accumulate_sample(
    weights: &WeightVector,
    sample: &Sample,
    scale: f64,
    ws: &mut Workspace,
    grad: &mut [f64],
) -> f64 {
    let outer = weights.outer();
    let mut acc = CompensatedSum::new();
    for (k, cache) in ws.caches.iter_mut().enumerate() {
        let b = subnetwork_into(weights, k, &sample.image, cache);
        ws.outputs[k] = b;
        if outer[k] != 0.0 {
            acc.add(outer[k] * b);
        }
    }
    let residual = acc.value() - sample.label as f64;
    let upstream = 2.0 * scale * residual;
    let (p1, p2) = weights.topology().pooled_extent();
    let pool = (p1 * p2) as f64;
    for k in 0..outer.len() {
        grad[k] += upstream * ws.outputs[k];
        // every inner partial carries the factor w_k; skipping keeps them exactly +0
        if outer[k] != 0.0 {
            let coef = upstream * outer[k] / pool;
            backward_subnetwork(
                weights,
                k,
                coef,
                &ws.caches[k],
                &mut ws.delta_out,
                &mut ws.delta_pre,
                grad,
            );
        }
    }
    residual
}

/// Penalized risk and its gradient in one pass over the data.
pub fn risk_and_gradient(weights: &WeightVector, data: &Dataset, c4: f64) -> Result<(f64, Gradient)> {
    check_data(weights, data)?;
    let t = weights.topology();
    let p = weights.len();
    let scale = 1.0 / data.len() as f64;

    let blocks: Vec<(Vec<f64>, Vec<f64>)> = data
        .samples()
        .par_chunks(BLOCK)
        .map(|chunk| {
            let mut ws = Workspace::new(t);
            let mut grad = vec![0.0; p];
            let sq: Vec<f64> = chunk
                .iter()
                .map(|s| {
                    let r = accumulate_sample(weights, s, scale, &mut ws, &mut grad);
                    r * r
                })
                .collect();
            (sq, grad)
        })
        .collect();

    let mut grad = vec![0.0; p];
    let mut risk = CompensatedSum::new();
    for (sq, g) in &blocks {
        for &v in sq {
            risk.add(v);
        }
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    for (g, w) in grad.iter_mut().zip(weights.outer()) {
        *g += 2.0 * c4 * w;
    }
    let value = risk.value() * scale + ridge_penalty(weights, c4);
    Ok((value, weights.with_values(grad)?))
}

/// Exact gradient of the penalized risk.
pub fn grad_penalized_risk(weights: &WeightVector, data: &Dataset, c4: f64) -> Result<Gradient> {
    risk_and_gradient(weights, data, c4).map(|(_, g)| g)
}

/// Central differences `(F(w + h e_p) - F(w - h e_p)) / 2h` for every
/// parameter.
///
/// The two risks are never subtracted directly. Both perturbed networks are
/// evaluated side by side, carrying `(value, difference)` pairs through
/// every layer, so the numerator keeps a small relative error even when it
/// is many orders of magnitude below `F` itself. Only the sub-network that
/// owns `p` is re-evaluated.
pub fn fd_gradient(weights: &WeightVector, data: &Dataset, c4: f64, h: f64) -> Result<Gradient> {
    check_data(weights, data)?;
    if !(1e-8..=1e-3).contains(&h) {
        return Err(Error::Domain(format!("finite-difference step {h} outside [1e-8, 1e-3]")));
    }
    let t = weights.topology();
    let p = weights.len();
    if p > 100_000 {
        log::warn!("finite-difference gradient over {p} parameters needs {} risk evaluations", 2 * p);
    }
    let n = data.len() as f64;
    // outputs of every sub-network on every sample at the base point
    let base_outputs: Vec<Vec<f64>> = data
        .samples()
        .par_iter()
        .map(|s| {
            let mut cache = ActivationCache::new(t);
            (0..t.subnetworks).map(|k| subnetwork_into(weights, k, &s.image, &mut cache)).collect()
        })
        .collect();
    let base_f: Vec<f64> = base_outputs
        .iter()
        .map(|g| compensated_sum(weights.outer().iter().zip(g).map(|(w, v)| w * v)))
        .collect();
    let base = weights.as_slice();
    let fd: Vec<f64> = (0..p)
        .into_par_iter()
        .map(|idx| {
            let plus = base[idx] + h;
            let minus = base[idx] - h;
            let dw = plus - minus;
            let target = Perturbed::locate(weights, idx);
            let mut emp = CompensatedSum::new();
            for (i, sample) in data.samples().iter().enumerate() {
                let k = target.subnetwork();
                let g0 = base_outputs[i][k];
                let (f_minus, df) = match target {
                    Perturbed::Outer { .. } => (base_f[i] - base[idx] * g0 + minus * g0, dw * g0),
                    _ => {
                        let wk = weights.outer()[k];
                        if wk == 0.0 {
                            continue;
                        }
                        let (g_minus, dg) = subnetwork_difference(weights, &sample.image, target, minus, dw);
                        (base_f[i] - wk * g0 + wk * g_minus, wk * dg)
                    }
                };
                // r+² - r-² = (r+ + r-)(r+ - r-)
                emp.add((2.0 * (f_minus - f64::from(sample.label)) + df) * df);
            }
            let penalty = match target {
                Perturbed::Outer { .. } => c4 * (plus + minus) * dw,
                _ => 0.0,
            };
            (emp.value() / n + penalty) / (2.0 * h)
        })
        .collect();
    weights.with_values(fd)
}

/// Location of the single parameter moved by a finite-difference probe.
#[derive(Debug, Clone, Copy)]
enum Perturbed {
    Outer { k: usize },
    Filter { r: usize, k: usize, local: usize },
    Bias { r: usize, k: usize, local: usize },
}

impl Perturbed {
    fn locate(weights: &WeightVector, idx: usize) -> Self {
        let t = weights.topology();
        let layout = weights.layout();
        match layout.layer_of(idx) {
            None => Perturbed::Outer { k: idx },
            Some(r) if layout.filter_range().contains(&idx) => {
                let block = weights.filters_of(r, 0).len();
                let offset = idx - layout.filter_block(r, 0);
                Perturbed::Filter { r, k: offset / block, local: offset % block }
            }
            Some(r) => {
                let c = t.channels[r];
                let offset = idx - layout.bias_block(r, 0, c);
                Perturbed::Bias { r, k: offset / c, local: offset % c }
            }
        }
    }

    fn subnetwork(self) -> usize {
        match self {
            Perturbed::Outer { k } | Perturbed::Filter { k, .. } | Perturbed::Bias { k, .. } => k,
        }
    }
}

/// `σ(hi) - σ(lo)` for `hi = lo + d`, accurate to a few ulps of the result:
/// `sinh(d/2) / (2 cosh(hi/2) cosh(lo/2))`.
fn logistic_difference(lo: f64, hi: f64, d: f64) -> f64 {
    let denom = 2.0 * (hi / 2.0).cosh() * (lo / 2.0).cosh();
    if denom.is_finite() {
        (d / 2.0).sinh() / denom
    } else {
        0.0
    }
}

/// Pooled output of the owning sub-network with the probed parameter set to
/// `minus`, and the exact-to-rounding change when it moves to `minus + dw`.
fn subnetwork_difference(weights: &WeightVector, image: &Image, target: Perturbed, minus: f64, dw: f64) -> (f64, f64) {
    let t = weights.topology();
    let k = target.subnetwork();
    let (d1, d2) = (t.d1, t.d2);
    let plane = d1 * d2;
    let mut prev = image.pixels().to_vec();
    let mut dprev = vec![0.0; plane];
    for r in 1..=t.layers {
        let m = t.window(r);
        let c_in = t.channels[r - 1];
        let c_out = t.channels[r];
        let mut filters = weights.filters_of(r, k).to_vec();
        let mut biases = weights.biases_of(r, k).to_vec();
        let (moved_filter, moved_bias) = match target {
            Perturbed::Filter { r: tr, local, .. } if tr == r => {
                filters[local] = minus;
                (Some(local), None)
            }
            Perturbed::Bias { r: tr, local, .. } if tr == r => {
                biases[local] = minus;
                (None, Some(local))
            }
            _ => (None, None),
        };
        let mut out = vec![0.0; c_out * plane];
        let mut dout = vec![0.0; c_out * plane];
        for s2 in 0..c_out {
            for i in 0..d1 {
                let rows = m.min(d1 - i);
                for j in 0..d2 {
                    let cols = m.min(d2 - j);
                    let mut u = biases[s2];
                    let mut du = if moved_bias == Some(s2) { dw } else { 0.0 };
                    for s1 in 0..c_in {
                        for t1 in 0..rows {
                            for t2 in 0..cols {
                                let w_idx = ((s2 * c_in + s1) * m + t1) * m + t2;
                                let p_idx = s1 * plane + (i + t1) * d2 + j + t2;
                                let (w, x, dx) = (filters[w_idx], prev[p_idx], dprev[p_idx]);
                                u += w * x;
                                du += w * dx;
                                if moved_filter == Some(w_idx) {
                                    // w+ x+ - w- x- = w- dx + dw x+
                                    du += dw * (x + dx);
                                }
                            }
                        }
                    }
                    let idx = s2 * plane + i * d2 + j;
                    out[idx] = logistic(u);
                    dout[idx] = logistic_difference(u, u + du, du);
                }
            }
        }
        prev = out;
        dprev = dout;
    }
    let (p1, p2) = t.pooled_extent();
    let positions = (p1 * p2) as f64;
    let pooled = |v: &[f64]| compensated_sum((0..p1).flat_map(|i| (0..p2).map(move |j| v[i * d2 + j]))) / positions;
    (pooled(&prev), pooled(&dprev))
}

/// Lower estimate of the Lipschitz constant of `grad` on the ball of radius
/// `radius` around `center`: the largest ratio `‖∇F(a) - ∇F(b)‖ / ‖a - b‖`
/// over `trials` pairs.
///
/// Even trials draw both points uniformly in direction and radius. Odd
/// trials run a power iteration on the secant operator: the pair
/// `center ± (radius/2)·d` is followed by `d ← normalize(∇F(a) - ∇F(b))`,
/// which finds the direction of largest curvature that random pairs
/// almost never hit in high dimension. The pair sequence for `T` trials is a
/// prefix of the one for `2T`, so more trials never lower the estimate.
pub fn estimate_lipschitz<G>(mut grad: G, center: &[f64], trials: usize, radius: f64, seed: u64) -> f64
where
    G: FnMut(&[f64]) -> Vec<f64>,
{
    let dim = center.len();
    if dim == 0 || trials == 0 {
        return 0.0;
    }
    let mut rng = stream(seed, "lipschitz", 0);
    let mut direction = random_unit(&mut rng, dim);
    let mut best: f64 = 0.0;

    for trial in 0..trials {
        let (a, b) = if trial % 2 == 0 {
            loop {
                let a = ball_point(&mut rng, center, radius);
                let b = ball_point(&mut rng, center, radius);
                if l2_distance(&a, &b) > 0.0 {
                    break (a, b);
                }
            }
        } else {
            let h = 0.5 * radius;
            let a: Vec<f64> = center.iter().zip(&direction).map(|(c, d)| c + h * d).collect();
            let b: Vec<f64> = center.iter().zip(&direction).map(|(c, d)| c - h * d).collect();
            (a, b)
        };
        let ga = grad(&a);
        let gb = grad(&b);
        let diff: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| x - y).collect();
        let dist = l2_distance(&a, &b);
        let diff_norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dist > 0.0 && diff_norm.is_finite() {
            best = best.max(diff_norm / dist);
        }
        if trial % 2 == 1 {
            if diff_norm > 0.0 && diff_norm.is_finite() {
                direction = diff.iter().map(|v| v / diff_norm).collect();
            } else {
                direction = random_unit(&mut rng, dim);
            }
        }
    }
    best
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        // Box-Muller pairs give an isotropic direction
        let v: Vec<f64> = (0..dim)
            .map(|_| {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn ball_point<R: Rng>(rng: &mut R, center: &[f64], radius: f64) -> Vec<f64> {
    let dir = random_unit(rng, center.len());
    let r = radius * rng.gen::<f64>();
    center.iter().zip(dir).map(|(c, d)| c + r * d).collect()
}

/// [`estimate_lipschitz`] applied to the gradient of the penalized risk.
pub fn estimate_gradient_lipschitz(
    weights: &WeightVector,
    data: &Dataset,
    c4: f64,
    trials: usize,
    radius: f64,
    seed: u64,
) -> Result<f64> {
    check_data(weights, data)?;
    let estimate = estimate_lipschitz(
        |x| {
            let w = weights.with_values(x.to_vec()).expect("same shape");
            grad_penalized_risk(&w, data, c4).expect("validated").into_flat()
        },
        weights.as_slice(),
        trials,
        radius,
        seed,
    );
    Ok(estimate)
}
