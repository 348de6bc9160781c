//! Random initialization, full-batch gradient descent and audits of the
//! trajectory.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{estimate_gradient_lipschitz, penalized_risk, risk_and_gradient};
use crate::model::{l2_distance, l2_norm, Dataset, HyperParams, Topology, WeightVector};
use crate::rng::{stream, symmetric_uniform};

/// Initial weights: outer weights exactly zero, every inner weight of layer
/// `r` uniform on `[-b_r, b_r]` with `b_r = hp.init_bound(r)`.
///
/// Sub-network `k` draws from its own stream `(seed, "init", k)`, taking its
/// filters and then its biases in canonical order. The result does not
/// depend on the thread count, and sub-network `k` starts from the same
/// uniforms whatever `K` is.
pub fn init_weights(topology: &Topology, hp: &HyperParams, seed: u64) -> Result<WeightVector> {
    let mut weights = WeightVector::zeros(topology)?;
    let bounds: Vec<f64> = (0..=topology.layers)
        .map(|r| if r == 0 { 0.0 } else { hp.init_bound(r) })
        .collect();
    let draws: Vec<Vec<f64>> = (0..topology.subnetworks)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, "init", k as u64);
            let mut out = Vec::new();
            for r in 1..=topology.layers {
                let m = topology.window(r);
                let count = m * m * topology.channels[r - 1] * topology.channels[r];
                out.extend((0..count).map(|_| symmetric_uniform(&mut rng, bounds[r])));
            }
            for r in 1..=topology.layers {
                out.extend((0..topology.channels[r]).map(|_| symmetric_uniform(&mut rng, bounds[r])));
            }
            out
        })
        .collect();
    let layout = weights.layout().clone();
    let values = weights.as_mut_slice();
    for (k, draw) in draws.iter().enumerate() {
        let mut next = draw.iter();
        for r in 1..=topology.layers {
            let start = layout.filter_block(r, k);
            let m = topology.window(r);
            let count = m * m * topology.channels[r - 1] * topology.channels[r];
            for v in &mut values[start..start + count] {
                *v = *next.next().expect("one draw per weight");
            }
        }
        for r in 1..=topology.layers {
            let start = layout.bias_block(r, k, topology.channels[r]);
            for v in &mut values[start..start + topology.channels[r]] {
                *v = *next.next().expect("one draw per weight");
            }
        }
    }
    Ok(weights)
}

/// `w - lambda·g`, or `None` when a component is not finite.
fn descend(weights: &WeightVector, gradient: &[f64], lambda: f64) -> Option<WeightVector> {
    let values: Vec<f64> = weights
        .as_slice()
        .iter()
        .zip(gradient)
        .map(|(w, g)| w - lambda * g)
        .collect();
    if values.iter().all(|v| v.is_finite()) {
        Some(weights.with_values(values).expect("same shape"))
    } else {
        None
    }
}

/// One full-batch step `w - λ·∇F_n(w)` on all weights.
pub fn gd_step(weights: &WeightVector, data: &Dataset, c4: f64, lambda: f64) -> Result<WeightVector> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Domain(format!("step size must be finite and nonnegative, got {lambda}")));
    }
    let (_, grad) = risk_and_gradient(weights, data, c4)?;
    descend(weights, grad.as_slice(), lambda).ok_or(Error::NonFinite { step: 1 })
}

/// One row of the training trace. `grad_norm` is the gradient norm at the
/// previous iterate (the one used to take this step) and `step_norm` the
/// length of that step; both are 0 for step 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: u64,
    pub risk: f64,
    pub grad_norm: f64,
    pub displacement: f64,
    pub step_norm: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub seed: u64,
    pub hyperparams: HyperParams,
    pub steps: Vec<TraceStep>,
    /// Elapsed seconds. Informational only; never written to result files.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainTrace {
    pub fn initial_risk(&self) -> f64 {
        self.steps[0].risk
    }

    pub fn final_risk(&self) -> f64 {
        self.steps[self.steps.len() - 1].risk
    }

    /// CSV with header `step,risk,grad_norm,displacement,lambda`, floats
    /// with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,risk,grad_norm,displacement,lambda\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                s.step, s.risk, s.grad_norm, s.displacement, s.lambda
            ));
        }
        out
    }
}

/// Gradient descent from a given start for exactly `steps` steps of size
/// `lambda`. `observer` sees every trace row as it is produced.
pub fn train_from<O>(
    init: WeightVector,
    data: &Dataset,
    c4: f64,
    lambda: f64,
    steps: u64,
    mut observer: O,
) -> Result<(WeightVector, Vec<TraceStep>)>
where
    O: FnMut(&TraceStep),
{
    let origin = init.as_slice().to_vec();
    let mut current = init;
    let mut trace = Vec::with_capacity(steps as usize + 1);
    let mut step_norm = 0.0;
    let mut grad_norm = 0.0;
    for t in 0..=steps {
        // the risk at w^(t) falls out of the gradient pass for the next step
        let (risk, grad) = if t < steps {
            let (r, g) = risk_and_gradient(&current, data, c4)?;
            (r, Some(g))
        } else {
            (penalized_risk(&current, data, c4)?, None)
        };
        if !risk.is_finite() {
            return Err(Error::NonFinite { step: t });
        }
        let row = TraceStep {
            step: t,
            risk,
            grad_norm,
            displacement: l2_distance(current.as_slice(), &origin),
            step_norm,
            lambda,
        };
        observer(&row);
        trace.push(row);
        if let Some(g) = grad {
            grad_norm = l2_norm(g.as_slice());
            let next = descend(&current, g.as_slice(), lambda).ok_or(Error::NonFinite { step: t + 1 })?;
            step_norm = l2_distance(next.as_slice(), current.as_slice());
            current = next;
        }
    }
    Ok((current, trace))
}

/// Initializes with `seed` and runs `hp.t_n` steps of size `hp.lambda_n`.
/// There is no early stopping, and the loop keeps going if the risk rises.
pub fn train(data: &Dataset, topology: &Topology, hp: &HyperParams, seed: u64) -> Result<(WeightVector, TrainTrace)> {
    topology.check()?;
    if topology.subnetworks as u64 != hp.k_n {
        return Err(Error::Domain(format!(
            "topology has K = {} sub-networks but K_n = {}",
            topology.subnetworks, hp.k_n
        )));
    }
    if data.len() as u64 != hp.n {
        return Err(Error::Domain(format!("dataset has {} samples but n = {}", data.len(), hp.n)));
    }
    let started = Instant::now();
    let init = init_weights(topology, hp, seed)?;
    let report_every = (hp.t_n / 10).max(1);
    let (weights, steps) = train_from(init, data, hp.c4, hp.lambda_n, hp.t_n, |row| {
        if row.step % report_every == 0 {
            log::info!("step {:>7}  F_n = {:.6e}  |grad| = {:.3e}", row.step, row.risk, row.grad_norm);
        }
    })?;
    let trace = TrainTrace {
        seed,
        hyperparams: hp.clone(),
        steps,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((weights, trace))
}

/// Desk default for `L_n`: four times the empirical Lipschitz constant of
/// the gradient on the unit ball around `init` (200 trials), rounded up.
pub fn desk_smoothness(init: &WeightVector, data: &Dataset, c4: f64, seed: u64) -> Result<u64> {
    let estimate = estimate_gradient_lipschitz(init, data, c4, 200, 1.0, seed)?;
    Ok(((4.0 * estimate).ceil() as u64).max(1))
}

/// Outcome of the three trajectory inequalities at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepAudit {
    pub step: u64,
    pub descent: bool,
    pub displacement: bool,
    pub step_sum: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Report {
    pub l_used: f64,
    pub tolerance: f64,
    pub steps: Vec<StepAudit>,
    pub descent_failures: usize,
    pub displacement_failures: usize,
    pub step_sum_failures: usize,
    pub diagnosis: String,
}

impl Lemma2Report {
    pub fn passed(&self) -> bool {
        self.descent_failures + self.displacement_failures + self.step_sum_failures == 0
    }

    /// Human-readable failure lines, one per failed inequality and step.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.steps {
            if !s.descent {
                out.push(format!("descent inequality failed at step {}", s.step));
            }
            if !s.displacement {
                out.push(format!("displacement bound failed at step {}", s.step));
            }
            if !s.step_sum {
                out.push(format!("squared-step sum bound failed at step {}", s.step));
            }
        }
        out
    }
}

/// Checks, for every step `k ≥ 1` of a trace produced with step size
/// `1/l_used`:
///
/// 1. `F(w_k) ≤ F(w_{k-1}) - ‖∇F(w_{k-1})‖² / (2·l_used)`
/// 2. `‖w_k - w_0‖ ≤ sqrt(2k/l_used · max(F(w_0) - F(w_k), 0))`
/// 3. `Σ_{j<k} ‖w_{j+1} - w_j‖² ≤ 2/l_used · (F(w_0) - F(w_k))`
///
/// each up to `1e-9·max(1, F(w_0))`. These hold whenever `l_used` bounds the
/// gradient's Lipschitz constant along the path, so a failure means the step
/// size was too large for this trajectory.
pub fn audit_lemma2(steps: &[TraceStep], l_used: f64) -> Lemma2Report {
    let f0 = steps.first().map_or(0.0, |s| s.risk);
    let tol = 1e-9 * f0.abs().max(1.0);
    let mut audits = Vec::with_capacity(steps.len().saturating_sub(1));
    let mut step_sq_sum = 0.0;
    for k in 1..steps.len() {
        let (prev, cur) = (&steps[k - 1], &steps[k]);
        let descent = cur.risk <= prev.risk - cur.grad_norm * cur.grad_norm / (2.0 * l_used) + tol;
        let bound = (2.0 * k as f64 / l_used * (f0 - cur.risk).max(0.0)).sqrt();
        let displacement = cur.displacement <= bound + tol;
        step_sq_sum += cur.step_norm * cur.step_norm;
        let step_sum = step_sq_sum <= 2.0 / l_used * (f0 - cur.risk) + tol;
        audits.push(StepAudit {
            step: cur.step,
            descent,
            displacement,
            step_sum,
        });
    }
    let count = |f: fn(&StepAudit) -> bool| audits.iter().filter(|a| !f(a)).count();
    let descent_failures = count(|a| a.descent);
    let displacement_failures = count(|a| a.displacement);
    let step_sum_failures = count(|a| a.step_sum);
    let diagnosis = if descent_failures + displacement_failures + step_sum_failures == 0 {
        format!("all inequalities hold for L = {l_used}")
    } else {
        let first = audits
            .iter()
            .find(|a| !(a.descent && a.displacement && a.step_sum))
            .map_or(0, |a| a.step);
        format!(
            "inequalities violated from step {first} on: L = {l_used} is below the local smoothness \
             constant of the risk along this trajectory (step size too large), not a gradient defect"
        )
    };
    Lemma2Report {
        l_used,
        tolerance: tol,
        steps: audits,
        descent_failures,
        displacement_failures,
        step_sum_failures,
        diagnosis,
    }
}

/// Ridge problem on fixed features:
/// `F(a) = (1/n)·Σ_i (y_i - Σ_k a_k B_k(x_i))² + c27·‖a‖²`.
#[derive(Debug, Clone)]
pub struct RidgeProblem {
    basis: DMatrix<f64>,
    labels: DVector<f64>,
    c27: f64,
}

impl RidgeProblem {
    /// `basis_values[i][k] = B_k(x_i)`.
    pub fn new(basis_values: &[Vec<f64>], labels: &[f64], c27: f64) -> Result<Self> {
        let n = basis_values.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let k = basis_values[0].len();
        if k == 0 || basis_values.iter().any(|row| row.len() != k) {
            return Err(Error::Dimension("basis rows must share a positive length".into()));
        }
        if labels.len() != n {
            return Err(Error::Dimension(format!("{} labels for {n} basis rows", labels.len())));
        }
        if !(c27.is_finite() && c27 > 0.0) {
            return Err(Error::Domain(format!("c27 must be positive, got {c27}")));
        }
        Ok(Self {
            basis: DMatrix::from_fn(n, k, |i, j| basis_values[i][j]),
            labels: DVector::from_column_slice(labels),
            c27,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn value(&self, a: &[f64]) -> f64 {
        let n = self.basis.nrows() as f64;
        let a = DVector::from_column_slice(a);
        let residual = &self.labels - &self.basis * &a;
        residual.norm_squared() / n + self.c27 * a.norm_squared()
    }

    pub fn gradient(&self, a: &[f64]) -> Vec<f64> {
        let n = self.basis.nrows() as f64;
        let a = DVector::from_column_slice(a);
        let residual = &self.labels - &self.basis * &a;
        let g = self.basis.transpose() * residual * (-2.0 / n) + a * (2.0 * self.c27);
        g.as_slice().to_vec()
    }

    /// Exact minimizer from `(BᵀB/n + c27·I)·a = Bᵀy/n` by Cholesky.
    pub fn optimum(&self) -> Vec<f64> {
        let n = self.basis.nrows() as f64;
        let bt = self.basis.transpose();
        let system = &bt * &self.basis / n + DMatrix::identity(self.dim(), self.dim()) * self.c27;
        let rhs = &bt * &self.labels / n;
        let chol = system.cholesky().expect("ridge system is positive definite");
        chol.solve(&rhs).as_slice().to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlProbe {
    pub lhs: f64,
    pub rhs: f64,
    pub tolerance: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlReport {
    pub optimum: Vec<f64>,
    pub optimum_value: f64,
    pub optimum_residual: f64,
    pub oracle_ok: bool,
    pub probes: Vec<PlProbe>,
}

impl PlReport {
    pub fn passed(&self) -> bool {
        self.oracle_ok && self.probes.iter().all(|p| p.holds)
    }
}

/// Verifies `‖∇F(a)‖² ≥ 4·c27·(F(a) - F(a_opt))` for each probe `a`, up to
/// `1e-9·max(1, F(a))`, with `a_opt` from an exact solve of the normal
/// equations. The solve is flagged when `‖∇F(a_opt)‖ > 1e-8`.
pub fn pl_inequality_check(basis_values: &[Vec<f64>], labels: &[f64], c27: f64, probes: &[Vec<f64>]) -> Result<PlReport> {
    let problem = RidgeProblem::new(basis_values, labels, c27)?;
    if let Some(p) = probes.iter().find(|p| p.len() != problem.dim()) {
        return Err(Error::Dimension(format!("probe of length {} for K = {}", p.len(), problem.dim())));
    }
    let optimum = problem.optimum();
    let optimum_value = problem.value(&optimum);
    let optimum_residual = l2_norm(&problem.gradient(&optimum));
    let probes = probes
        .iter()
        .map(|a| {
            let f = problem.value(a);
            let lhs = problem.gradient(a).iter().map(|g| g * g).sum::<f64>();
            let rhs = 4.0 * c27 * (f - optimum_value);
            let tolerance = 1e-9 * f.abs().max(1.0);
            PlProbe {
                lhs,
                rhs,
                tolerance,
                holds: lhs >= rhs - tolerance,
            }
        })
        .collect();
    Ok(PlReport {
        optimum,
        optimum_value,
        optimum_residual,
        oracle_ok: optimum_residual <= 1e-8,
        probes,
    })
}
