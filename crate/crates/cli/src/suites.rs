//! Check batteries behind `overcnn check`: gradient against finite
//! differences, the PL inequality of the outer-weight ridge problem, the
//! descent-lemma audit of training runs, and the plug-in bound on trained
//! networks.

use overcnn::eval::{check_lemma1, fit_desk, Lemma1Report};
use overcnn::gradients::{estimate_gradient_lipschitz, fd_gradient, grad_penalized_risk};
use overcnn::rng::{derive_seed, stream, symmetric_uniform};
use overcnn::synthdata::sample_dataset;
use overcnn::training::{audit_lemma2, init_weights, pl_inequality_check, train_from, PlReport};
use overcnn::{Dataset, HyperParams, Image, Sample, Topology, WeightVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{GradientSuiteConfig, Lemma1SuiteConfig, Lemma2SuiteConfig, Lemma7SuiteConfig};
use crate::error::CliResult;

/// Failure lines kept per item; counts are always complete.
const MAX_LISTED: usize = 20;

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1e-8f64).max(a.abs() + b.abs())
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientCase {
    pub index: usize,
    pub d1: usize,
    pub d2: usize,
    pub kappa: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "K")]
    pub subnetworks: usize,
    pub n: usize,
    pub parameters: usize,
    pub c4: f64,
    pub max_relative_error: f64,
    pub worst_parameter: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientSuiteReport {
    pub suite: &'static str,
    pub passed: bool,
    pub tolerance: f64,
    pub h: f64,
    pub max_relative_error: f64,
    pub failures: Vec<String>,
    pub cases: Vec<GradientCase>,
}

/// Random small network, weights, data and ridge constant for case `index`.
pub fn gradient_case(config: &GradientSuiteConfig, index: usize) -> (WeightVector, Dataset, f64) {
    let mut rng = stream(config.seed, "gradient-suite", index as u64);
    let kappa = rng.gen_range(1..=2);
    let layers = rng.gen_range(2..=3);
    let d1 = rng.gen_range(kappa.max(2)..=4);
    let d2 = rng.gen_range(kappa.max(2)..=4);
    let mut k = rng.gen_range(1..=8);
    while k > 1 && Topology::theorem1(d1, d2, kappa, layers, k).parameter_count() > config.max_parameters {
        k -= 1;
    }
    let topology = Topology::theorem1(d1, d2, kappa, layers, k);
    let n = rng.gen_range(1..=16);
    let values = (0..topology.parameter_count())
        .map(|_| symmetric_uniform(&mut rng, 1.0))
        .collect();
    let weights = WeightVector::from_flat(&topology, values).expect("length matches");
    let samples = (0..n)
        .map(|_| Sample {
            image: Image::new(d1, d2, (0..d1 * d2).map(|_| rng.gen()).collect()).expect("pixels match"),
            label: u8::from(rng.gen::<bool>()),
        })
        .collect();
    let data = Dataset::new(samples, "gradient-suite", config.seed).expect("same image size");
    let c4 = rng.gen_range(0.01..1.0);
    (weights, data, c4)
}

pub fn gradient_suite(config: &GradientSuiteConfig) -> CliResult<GradientSuiteReport> {
    let cases = (0..config.configurations)
        .into_par_iter()
        .map(|index| {
            let (weights, data, c4) = gradient_case(config, index);
            let analytic = grad_penalized_risk(&weights, &data, c4)?;
            let fd = fd_gradient(&weights, &data, c4, config.h)?;
            let (worst_parameter, max_relative_error) = analytic
                .as_slice()
                .iter()
                .zip(fd.as_slice())
                .map(|(a, b)| relative_error(*a, *b))
                .enumerate()
                .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
            let t = weights.topology();
            Ok(GradientCase {
                index,
                d1: t.d1,
                d2: t.d2,
                kappa: t.kappa,
                layers: t.layers,
                subnetworks: t.subnetworks,
                n: data.len(),
                parameters: weights.len(),
                c4,
                max_relative_error,
                worst_parameter,
                passed: max_relative_error < config.tolerance,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let failures = cases
        .iter()
        .filter(|c| !c.passed)
        .map(|c| {
            format!(
                "configuration {}: relative error {:.3e} at parameter {}",
                c.index, c.max_relative_error, c.worst_parameter
            )
        })
        .collect::<Vec<_>>();
    Ok(GradientSuiteReport {
        suite: "gradients",
        passed: failures.is_empty(),
        tolerance: config.tolerance,
        h: config.h,
        max_relative_error: cases.iter().map(|c| c.max_relative_error).fold(0.0, f64::max),
        failures,
        cases,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma7Case {
    pub index: usize,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub c27: f64,
    pub passed: bool,
    pub report: PlReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma7SuiteReport {
    pub suite: &'static str,
    pub passed: bool,
    pub failures: Vec<String>,
    pub cases: Vec<Lemma7Case>,
}

fn lemma7_case(index: usize, basis: Vec<Vec<f64>>, labels: Vec<f64>, c27: f64, probes: Vec<Vec<f64>>) -> CliResult<Lemma7Case> {
    let report = pl_inequality_check(&basis, &labels, c27, &probes)?;
    Ok(Lemma7Case {
        index,
        n: basis.len(),
        k: basis[0].len(),
        c27,
        passed: report.passed(),
        report,
    })
}

/// Case 0 is the scalar problem `F(a) = (1 - a)² + a²` probed at 0 and at
/// its minimizer 1/2; the remaining cases are random ridge instances with
/// features in `[0,1]`, 0/1 labels and random probes.
pub fn lemma7_suite(config: &Lemma7SuiteConfig) -> CliResult<Lemma7SuiteReport> {
    let mut cases = vec![lemma7_case(0, vec![vec![1.0]], vec![1.0], 1.0, vec![vec![0.0], vec![0.5]])?];
    for index in 1..=config.instances {
        let mut rng = stream(config.seed, "lemma7-suite", index as u64);
        let n = rng.gen_range(1..=config.max_size);
        let k = rng.gen_range(1..=config.max_size);
        let basis = (0..n).map(|_| (0..k).map(|_| rng.gen()).collect()).collect();
        let labels = (0..n).map(|_| f64::from(u8::from(rng.gen::<bool>()))).collect();
        let c27 = 10f64.powf(rng.gen_range(-3.0..1.0));
        let probes = (0..config.probes)
            .map(|_| (0..k).map(|_| symmetric_uniform(&mut rng, 3.0)).collect())
            .collect();
        cases.push(lemma7_case(index, basis, labels, c27, probes)?);
    }
    let mut failures = Vec::new();
    for case in &cases {
        if !case.report.oracle_ok {
            failures.push(format!(
                "instance {}: normal-equations solve left gradient norm {:.3e}",
                case.index, case.report.optimum_residual
            ));
        }
        for (j, p) in case.report.probes.iter().enumerate().filter(|(_, p)| !p.holds) {
            failures.push(format!(
                "instance {} probe {j}: |grad|^2 = {:.6e} < 4*c27*(F - F_opt) = {:.6e}",
                case.index, p.lhs, p.rhs
            ));
        }
    }
    Ok(Lemma7SuiteReport {
        suite: "lemma7",
        passed: failures.is_empty(),
        failures,
        cases,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma2Run {
    pub run: usize,
    pub seed: u64,
    pub n: usize,
    #[serde(rename = "K_n")]
    pub k_n: u64,
    #[serde(rename = "L_n")]
    pub l_n: u64,
    pub t_n: u64,
    /// `None` when `L_n` was fixed by the config.
    pub lipschitz_estimate: Option<f64>,
    pub initial_risk: f64,
    pub final_risk: f64,
    pub descent_failures: usize,
    pub displacement_failures: usize,
    pub step_sum_failures: usize,
    pub diagnosis: String,
    pub failures: Vec<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma2SuiteReport {
    pub suite: &'static str,
    pub passed: bool,
    pub failures: Vec<String>,
    pub runs: Vec<Lemma2Run>,
}

/// Trains `config.runs` desk networks on fresh datasets and audits every
/// step with `L_used = L_n`.
pub fn lemma2_suite(config: &Lemma2SuiteConfig) -> CliResult<Lemma2SuiteReport> {
    config.distribution.validate()?;
    let rule = &config.rule;
    let dist = &config.distribution;
    let mut runs = Vec::with_capacity(config.runs);
    for run in 0..config.runs {
        let seed = derive_seed(config.seed, "lemma2-run", run as u64);
        let data = sample_dataset(dist, config.n, derive_seed(seed, "data", 0))?;
        let n = data.len();
        let k_n = rule.subnetworks(n);
        let topology = Topology::theorem1(dist.d1, dist.d2, dist.kappa, rule.layers, k_n as usize);
        let tau = 1.0 / (1.0 + (dist.kappa * dist.kappa) as f64);
        let probe = HyperParams::desk(n as u64, dist.kappa, rule.layers, tau, k_n, 1, 0, rule.constants)?;
        let init = init_weights(&topology, &probe, derive_seed(seed, "init", 0))?;
        let lipschitz_estimate = match config.l_n {
            Some(_) => None,
            None => Some(estimate_gradient_lipschitz(
                &init,
                &data,
                rule.constants.c4,
                rule.lipschitz_trials,
                rule.lipschitz_radius,
                derive_seed(seed, "lipschitz", n as u64),
            )?),
        };
        let l_n = config
            .l_n
            .unwrap_or_else(|| ((rule.lipschitz_factor * lipschitz_estimate.unwrap_or(0.0)).ceil() as u64).max(1));
        let t_n = config.t_n.unwrap_or_else(|| rule.steps(n, l_n));
        let hp = HyperParams::desk(n as u64, dist.kappa, rule.layers, tau, k_n, l_n, t_n, rule.constants)?;
        log::info!("lemma2 run {run}: K_n = {k_n}, L_n = {l_n}, t_n = {t_n}");
        let (_, steps) = train_from(init, &data, hp.c4, hp.lambda_n, t_n, |_| {})?;
        let audit = audit_lemma2(&steps, l_n as f64);
        let mut failures = audit.failures();
        failures.truncate(MAX_LISTED);
        runs.push(Lemma2Run {
            run,
            seed,
            n,
            k_n,
            l_n,
            t_n,
            lipschitz_estimate,
            initial_risk: steps.first().map_or(0.0, |s| s.risk),
            final_risk: steps.last().map_or(0.0, |s| s.risk),
            descent_failures: audit.descent_failures,
            displacement_failures: audit.displacement_failures,
            step_sum_failures: audit.step_sum_failures,
            diagnosis: audit.diagnosis.clone(),
            failures,
            passed: audit.passed(),
        });
    }
    let failures = runs
        .iter()
        .flat_map(|r| r.failures.iter().map(move |f| format!("run {}: {f}", r.run)))
        .collect::<Vec<_>>();
    Ok(Lemma2SuiteReport {
        suite: "lemma2",
        passed: runs.iter().all(|r| r.passed),
        failures,
        runs,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma1Case {
    pub name: String,
    pub n: usize,
    #[serde(rename = "K_n")]
    pub k_n: u64,
    #[serde(rename = "L_n")]
    pub l_n: u64,
    pub t_n: u64,
    pub initial_risk: f64,
    pub final_risk: f64,
    pub report: Lemma1Report,
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma1SuiteReport {
    pub suite: &'static str,
    pub passed: bool,
    pub failures: Vec<String>,
    pub fixtures: Vec<Lemma1Case>,
}

/// Trains each fixture by its desk rule and compares the plug-in excess
/// risk with twice the root L2 risk on common evaluation images.
pub fn lemma1_suite(config: &Lemma1SuiteConfig) -> CliResult<Lemma1SuiteReport> {
    let mut fixtures = Vec::with_capacity(config.fixtures.len());
    for (i, fixture) in config.fixtures.iter().enumerate() {
        let seed = derive_seed(config.seed, "lemma1-fixture", i as u64);
        let dist = &fixture.distribution;
        dist.validate()?;
        let data = sample_dataset(dist, fixture.n, derive_seed(seed, "data", 0))?;
        let fit = fit_desk(dist, &data, &fixture.rule, seed)?;
        let report = check_lemma1(&fit.weights, dist, config.samples, derive_seed(seed, "eval", 0))?;
        log::info!("lemma1 fixture {}: excess {:.4e}, bound {:.4e}", fixture.name, report.excess, report.bound);
        fixtures.push(Lemma1Case {
            name: fixture.name.clone(),
            n: fixture.n,
            k_n: fit.hyperparams.k_n,
            l_n: fit.hyperparams.l_n,
            t_n: fit.hyperparams.t_n,
            initial_risk: fit.steps.first().map_or(0.0, |s| s.risk),
            final_risk: fit.steps.last().map_or(0.0, |s| s.risk),
            report,
        });
    }
    let failures = fixtures
        .iter()
        .filter(|f| !f.report.passed)
        .map(|f| {
            format!(
                "fixture {}: excess {:.6e} exceeds 2*sqrt(L2 risk) = {:.6e} plus slack {:.3e}",
                f.name, f.report.excess, f.report.bound, f.report.slack
            )
        })
        .collect::<Vec<_>>();
    Ok(Lemma1SuiteReport {
        suite: "lemma1",
        passed: failures.is_empty(),
        failures,
        fixtures,
    })
}
