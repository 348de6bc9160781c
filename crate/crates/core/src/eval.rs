//! Monte-Carlo risk estimates against a known a posteriori probability,
//! the plug-in bound check and the rate-of-convergence experiment.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::estimate_gradient_lipschitz;
use crate::model::{Constants, Dataset, HyperParams, Image, Topology, WeightVector};
use crate::network::{forward, plug_in_label, truncate};
use crate::rng::{derive_seed, stream};
use crate::sum::mean_and_stderr;
use crate::synthdata::{sample_dataset, AvgPoolDistribution};
use crate::training::{init_weights, train_from, TraceStep};

const MIN_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: f64,
    pub stderr: f64,
}

impl From<(f64, f64)> for Estimate {
    fn from((estimate, stderr): (f64, f64)) -> Self {
        Self { estimate, stderr }
    }
}

fn check_samples(m: usize) -> Result<()> {
    if m < MIN_SAMPLES {
        return Err(Error::Domain(format!("need at least {MIN_SAMPLES} Monte-Carlo samples, got {m}")));
    }
    Ok(())
}

/// `η` if `g` says 0, `1 - η` if it says 1.
#[inline]
pub fn conditional_error(eta: f64, label: u8) -> f64 {
    if label == 1 {
        1.0 - eta
    } else {
        eta
    }
}

/// Evaluates `per_image(i, image, η(image))` on the first `m` images of the
/// evaluation stream. Output order is the image order.
fn over_eval_images<T, F>(dist: &AvgPoolDistribution, m: usize, seed: u64, per_image: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &Image, f64) -> Result<T> + Sync,
{
    check_samples(m)?;
    dist.validate()?;
    (0..m as u64)
        .into_par_iter()
        .map(|i| {
            let image = dist.eval_image(seed, i);
            let e = dist.eta_unchecked(&image);
            per_image(i, &image, e)
        })
        .collect()
}

/// Rao-Blackwellized misclassification risk of `classifier`: the mean of
/// the exact conditional error over `m` evaluation images.
pub fn misclassification_risk_mc<C>(classifier: C, dist: &AvgPoolDistribution, m: usize, seed: u64) -> Result<Estimate>
where
    C: Fn(&Image) -> Result<u8> + Sync,
{
    let values = over_eval_images(dist, m, seed, |_, img, e| Ok(conditional_error(e, classifier(img)?)))?;
    Ok(mean_and_stderr(&values).into())
}

/// Plain estimate with sampled labels: fraction of `(X, Y)` pairs with
/// `g(X) ≠ Y`. Uses the same images as the Rao-Blackwellized estimate.
pub fn misclassification_frequency_mc<C>(classifier: C, dist: &AvgPoolDistribution, m: usize, seed: u64) -> Result<Estimate>
where
    C: Fn(&Image) -> Result<u8> + Sync,
{
    let values = over_eval_images(dist, m, seed, |i, img, e| {
        let y = u8::from(stream(seed, "eval-label", i).gen::<f64>() < e);
        Ok(f64::from(classifier(img)? != y))
    })?;
    Ok(mean_and_stderr(&values).into())
}

/// `∫ |T_1 f_w - η|² dP_X` over `m` evaluation images.
pub fn l2_risk_mc(weights: &WeightVector, dist: &AvgPoolDistribution, m: usize, seed: u64) -> Result<Estimate> {
    let values = over_eval_images(dist, m, seed, |_, img, e| {
        let d = truncate(forward(weights, img)?, 1.0) - e;
        Ok(d * d)
    })?;
    Ok(mean_and_stderr(&values).into())
}

/// Plug-in classifier of the network: label 1 iff `T_1 f_w ≥ 1/2`.
pub fn plug_in_classifier(weights: &WeightVector) -> impl Fn(&Image) -> Result<u8> + Sync + '_ {
    move |img| forward(weights, img).map(|v| plug_in_label(truncate(v, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub excess: f64,
    pub excess_stderr: f64,
    pub l2_risk: f64,
    pub l2_stderr: f64,
    pub bound: f64,
    /// `3·sqrt(se_excess² + se_bound²)`, with the bound's error propagated
    /// through the square root.
    pub slack: f64,
    pub passed: bool,
}

/// Compares the excess risk of the plug-in classifier with `2·sqrt(L2
/// risk)`, all on the same evaluation images. Passes iff
/// `excess ≤ bound + slack`.
pub fn check_lemma1(weights: &WeightVector, dist: &AvgPoolDistribution, m: usize, seed: u64) -> Result<Lemma1Report> {
    let rows = over_eval_images(dist, m, seed, |_, img, e| {
        let v = truncate(forward(weights, img)?, 1.0);
        let excess = conditional_error(e, plug_in_label(v)) - e.min(1.0 - e);
        Ok((excess, (v - e) * (v - e)))
    })?;
    let (excess_values, l2_values): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    let (excess, excess_stderr) = mean_and_stderr(&excess_values);
    let (l2_risk, l2_stderr) = mean_and_stderr(&l2_values);
    let bound = 2.0 * l2_risk.sqrt();
    // delta method for 2·sqrt(x)
    let bound_stderr = if l2_risk > 0.0 { l2_stderr / l2_risk.sqrt() } else { 0.0 };
    let slack = 3.0 * (excess_stderr * excess_stderr + bound_stderr * bound_stderr).sqrt();
    Ok(Lemma1Report {
        excess,
        excess_stderr,
        l2_risk,
        l2_stderr,
        bound,
        slack,
        passed: excess <= bound + slack,
    })
}

/// Least-squares line through `(ln x, ln y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_loglog(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.len() < 2 {
        return Err(Error::Domain("a log-log fit needs at least two points".into()));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Domain("log-log fit needs positive coordinates".into()));
    }
    let m = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("log-log fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LogLogFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

/// How the desk experiment scales the network and schedule with `n`:
/// `K = ⌈k_factor·n^k_exponent⌉`, `L_n = ⌈lipschitz_factor·Lip⌉` with `Lip`
/// estimated on the unit ball around the initialization, and
/// `t_n = min(⌈ln n · L_n · t_factor⌉, t_cap)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskRule {
    pub k_factor: f64,
    pub k_exponent: f64,
    pub lipschitz_factor: f64,
    pub lipschitz_trials: usize,
    pub lipschitz_radius: f64,
    pub t_factor: f64,
    pub t_cap: u64,
    #[serde(rename = "L")]
    pub layers: usize,
    pub constants: Constants,
}

impl Default for DeskRule {
    fn default() -> Self {
        Self {
            k_factor: 4.0,
            k_exponent: 0.5,
            lipschitz_factor: 4.0,
            lipschitz_trials: 200,
            lipschitz_radius: 1.0,
            t_factor: 1.0,
            t_cap: 20_000,
            layers: 2,
            constants: Constants::default(),
        }
    }
}

impl DeskRule {
    pub fn subnetworks(&self, n: usize) -> u64 {
        (self.k_factor * (n as f64).powf(self.k_exponent)).ceil().max(1.0) as u64
    }

    pub fn steps(&self, n: usize, l_n: u64) -> u64 {
        ((n as f64).ln() * l_n as f64 * self.t_factor).ceil().min(self.t_cap as f64).max(0.0) as u64
    }

    pub fn describe(&self) -> String {
        format!(
            "K_n = ceil({}*n^{}), L_n = ceil({} * Lipschitz estimate ({} trials, radius {})), \
             t_n = min(ceil({} * ln(n) * L_n), {}), tau = 1/(1+kappa^2), L = {}",
            self.k_factor,
            self.k_exponent,
            self.lipschitz_factor,
            self.lipschitz_trials,
            self.lipschitz_radius,
            self.t_factor,
            self.t_cap,
            self.layers
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n: usize,
    pub rep: usize,
    pub excess_risk: f64,
    pub excess_stderr: f64,
    pub l2_risk: f64,
    pub l2_stderr: f64,
    pub k_n: u64,
    pub l_n: u64,
    pub t_n: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub rule: String,
    pub n_grid: Vec<usize>,
    pub mean_excess: Vec<f64>,
    /// Means clipped below at `floor` before fitting.
    pub fitted_excess: Vec<f64>,
    pub floor: f64,
    pub fit: LogLogFit,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudyConfig {
    pub n_grid: Vec<usize>,
    pub replications: usize,
    pub eval_samples: usize,
    pub rule: DeskRule,
    pub seed: u64,
}

pub const RATE_CSV_HEADER: &str = "n,rep,excess_risk,excess_stderr,l2_risk,l2_stderr,K_n,L_n,t_n,seed";

pub fn rate_rows_to_csv(rows: &[RateRow]) -> String {
    let mut out = format!("{RATE_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{},{}\n",
            r.n, r.rep, r.excess_risk, r.excess_stderr, r.l2_risk, r.l2_stderr, r.k_n, r.l_n, r.t_n, r.seed
        ));
    }
    out
}

/// Smallest mean excess used in the fit; keeps the logarithm finite when
/// Monte-Carlo noise pushes an estimate to or below zero.
const EXCESS_FLOOR: f64 = 1e-6;

/// Summarises rows by their mean excess per `n` and fits a line in log-log
/// coordinates.
pub fn summarize_rates(rows: &[RateRow], rule: &DeskRule) -> Result<RateSummary> {
    let mut grid: Vec<usize> = rows.iter().map(|r| r.n).collect();
    grid.dedup();
    let mean_excess: Vec<f64> = grid
        .iter()
        .map(|&n| {
            let v: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.excess_risk).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    let fitted: Vec<f64> = mean_excess.iter().map(|e| e.max(EXCESS_FLOOR)).collect();
    let points: Vec<(f64, f64)> = grid.iter().zip(&fitted).map(|(&n, &e)| (n as f64, e)).collect();
    Ok(RateSummary {
        rule: rule.describe(),
        n_grid: grid,
        mean_excess,
        fitted_excess: fitted,
        floor: EXCESS_FLOOR,
        fit: fit_loglog(&points)?,
        note: "qualitative study at desk scale; the slope is not compared with a theoretical exponent".into(),
    })
}

/// A network trained on one dataset with the schedule chosen by a
/// [`DeskRule`].
#[derive(Debug, Clone)]
pub struct DeskFit {
    pub topology: Topology,
    pub hyperparams: HyperParams,
    pub lipschitz_estimate: f64,
    pub init: WeightVector,
    pub weights: WeightVector,
    pub steps: Vec<TraceStep>,
}

/// Builds the network for `data` by `rule`, estimates the gradient's
/// Lipschitz constant around the initialization, and trains.
///
/// Initial weights come from `(seed, "init", 0)` and the Lipschitz pairs
/// from `(seed, "lipschitz", n)`.
pub fn fit_desk(dist: &AvgPoolDistribution, data: &Dataset, rule: &DeskRule, seed: u64) -> Result<DeskFit> {
    let n = data.len();
    let k_n = rule.subnetworks(n);
    let topology = Topology::theorem1(dist.d1, dist.d2, dist.kappa, rule.layers, k_n as usize);
    let tau = 1.0 / (1.0 + (dist.kappa * dist.kappa) as f64);
    let probe = HyperParams::desk(n as u64, dist.kappa, rule.layers, tau, k_n, 1, 0, rule.constants)?;
    let init = init_weights(&topology, &probe, derive_seed(seed, "init", 0))?;
    let lipschitz_estimate = estimate_gradient_lipschitz(
        &init,
        data,
        rule.constants.c4,
        rule.lipschitz_trials,
        rule.lipschitz_radius,
        derive_seed(seed, "lipschitz", n as u64),
    )?;
    let l_n = ((rule.lipschitz_factor * lipschitz_estimate).ceil() as u64).max(1);
    let t_n = rule.steps(n, l_n);
    let hyperparams = HyperParams::desk(n as u64, dist.kappa, rule.layers, tau, k_n, l_n, t_n, rule.constants)?;
    let (weights, steps) = train_from(init.clone(), data, hyperparams.c4, hyperparams.lambda_n, t_n, |_| {})?;
    Ok(DeskFit {
        topology,
        hyperparams,
        lipschitz_estimate,
        init,
        weights,
        steps,
    })
}

/// One training run of the study: sample `n` points, build the network and
/// schedule by `rule`, train, and estimate excess and L2 risk.
///
/// Within a replication nothing random depends on `n` except through sizes:
/// the dataset for a smaller `n` is a prefix of the one for a larger `n`,
/// the first sub-networks start from the same uniforms, and every grid
/// point is scored on the same images.
pub fn rate_replication(
    dist: &AvgPoolDistribution,
    n: usize,
    rep: usize,
    rule: &DeskRule,
    eval_samples: usize,
    study_seed: u64,
) -> Result<RateRow> {
    let seed = derive_seed(study_seed, "rate-rep", rep as u64);
    let context = |e: Error| match e {
        Error::NonFinite { .. } => {
            log::error!("rate study n = {n}, rep = {rep}: {e}");
            e
        }
        other => Error::Domain(format!("rate study n = {n}, rep = {rep}: {other}")),
    };
    let data = sample_dataset(dist, n, derive_seed(seed, "data", 0))?;
    let fit = fit_desk(dist, &data, rule, seed).map_err(context)?;
    let report = check_lemma1(&fit.weights, dist, eval_samples, derive_seed(seed, "eval", 0))?;
    let hp = &fit.hyperparams;
    Ok(RateRow {
        n,
        rep,
        excess_risk: report.excess,
        excess_stderr: report.excess_stderr,
        l2_risk: report.l2_risk,
        l2_stderr: report.l2_stderr,
        k_n: hp.k_n,
        l_n: hp.l_n,
        t_n: hp.t_n,
        seed,
    })
}

/// Runs every `(n, rep)` pair and fits the decay of the mean excess risk.
/// Rows come back ordered by `(n, rep)` whatever the execution order.
pub fn rate_study(dist: &AvgPoolDistribution, config: &RateStudyConfig) -> Result<(Vec<RateRow>, RateSummary)> {
    if config.n_grid.len() < 3 || config.n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("n_grid must be strictly ascending with at least 3 points".into()));
    }
    if config.replications < 3 {
        return Err(Error::Domain("rate study needs at least 3 replications".into()));
    }
    let jobs: Vec<(usize, usize)> = config
        .n_grid
        .iter()
        .flat_map(|&n| (0..config.replications).map(move |rep| (n, rep)))
        .collect();
    let rows: Vec<RateRow> = jobs
        .par_iter()
        .map(|&(n, rep)| {
            log::info!("rate study: n = {n}, rep = {rep}");
            rate_replication(dist, n, rep, &config.rule, config.eval_samples, config.seed)
        })
        .collect::<Result<_>>()?;
    let summary = summarize_rates(&rows, &config.rule)?;
    Ok((rows, summary))
}
