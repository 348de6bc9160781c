use std::path::{Path, PathBuf};

use overcnn::eval::{
    check_lemma1, fit_loglog, l2_risk_mc, misclassification_risk_mc, plug_in_classifier, rate_rows_to_csv, rate_study,
    DeskRule, Estimate, Lemma1Report, LogLogFit, RateStudyConfig, RateSummary,
};
use overcnn::io::{
    dataset_from_str, dataset_to_string, to_json, weights_from_bytes, weights_from_json, weights_to_bytes,
    weights_to_json, WEIGHTS_MAGIC,
};
use overcnn::model::step_size_for;
use overcnn::rng::derive_seed;
use overcnn::synthdata::{bayes_risk_mc, sample_dataset};
use overcnn::training::{audit_lemma2, desk_smoothness, init_weights, train};
use overcnn::{derive_theorem1_hyperparams, HyperParams, Mode, Topology, WeightVector};
use serde::Serialize;

use crate::config::{
    self, EvalConfig, GenDataConfig, GradientSuiteConfig, Lemma1SuiteConfig, Lemma2SuiteConfig, Lemma7SuiteConfig,
    RateStudyCommandConfig, TrainConfig,
};
use crate::error::{CliError, CliResult};
use crate::provenance::Provenance;
use crate::suites;

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn json<T: Serialize>(value: &T) -> CliResult<String> {
    to_json(value).map_err(CliError::from)
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

/// Reads weights in either format; binary files need `topology`.
pub fn read_weights(path: &Path, topology: Option<&Topology>) -> CliResult<WeightVector> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.starts_with(WEIGHTS_MAGIC) {
        let topology = topology.ok_or_else(|| {
            CliError::Config(format!("{} is a binary weight file; the config must give \"topology\"", path.display()))
        })?;
        return Ok(weights_from_bytes(topology, &bytes)?);
    }
    let text = String::from_utf8(bytes).map_err(|e| CliError::io(path, e))?;
    Ok(weights_from_json(&text)?)
}

fn write_weights(path: &Path, weights: &WeightVector) -> CliResult<()> {
    if is_binary(path) {
        write_file(path, &weights_to_bytes(weights))
    } else {
        write_file(path, weights_to_json(weights)?.as_bytes())
    }
}

pub fn gen_data(config_path: &Path) -> CliResult<()> {
    let loaded = config::load::<GenDataConfig>(config_path)?;
    let cfg = &loaded.value;
    cfg.distribution.validate()?;
    let data = sample_dataset(&cfg.distribution, cfg.n, cfg.seed)?;
    let bayes_seed = derive_seed(cfg.seed, "bayes", 0);
    let (bayes, bayes_se) = bayes_risk_mc(&cfg.distribution, cfg.bayes_samples, bayes_seed)?;
    let provenance = Provenance::new("gen-data", &loaded.bytes)
        .seed("data", cfg.seed)
        .seed("bayes", bayes_seed);
    let header = serde_json::json!({
        "distribution": cfg.distribution,
        "provenance": provenance,
    });
    let output = loaded.resolve(&cfg.output);
    write_file(&output, dataset_to_string(&data, &header)?.as_bytes())?;
    println!("wrote {}", output.display());
    println!("n = {}", data.len());
    println!("bayes_risk = {bayes:.6} (stderr {bayes_se:.2e}, {} images)", cfg.bayes_samples);
    println!("label_frequency = {:.6}", data.label_mean());
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub l_n: Option<u64>,
    pub t_n: Option<u64>,
}

#[derive(Serialize)]
struct TrainReport<'a> {
    provenance: Provenance,
    dataset: String,
    topology: &'a Topology,
    hyperparams: &'a HyperParams,
    lipschitz_estimated: bool,
    initial_risk: f64,
    final_risk: f64,
    lemma2_passed: bool,
    lemma2_diagnosis: String,
}

pub fn train_cmd(config_path: &Path, overrides: &TrainOverrides) -> CliResult<()> {
    let loaded = config::load::<TrainConfig>(config_path)?;
    let cfg = &loaded.value;
    let seed = overrides.seed.unwrap_or(cfg.seed);
    let dataset_path = loaded.resolve(&cfg.dataset);
    let (data, _) = dataset_from_str(&read_text(&dataset_path)?)?;
    let (d1, d2) = data.dims().ok_or(overcnn::Error::EmptyDataset)?;
    let n = data.len() as u64;
    let hpc = &cfg.hyperparams;
    let mut estimated = false;
    let hp = match hpc.mode {
        Mode::Theory => {
            let mut hp = derive_theorem1_hyperparams(n, cfg.kappa, hpc.layers, hpc.constants)?;
            if let Some(l) = overrides.l_n {
                hp.l_n = l;
                hp.lambda_n = step_size_for(l);
            }
            if let Some(t) = overrides.t_n {
                hp.t_n = t;
            }
            hp
        }
        Mode::Desk => {
            let k_n = hpc
                .k_n
                .ok_or_else(|| CliError::Config("desk mode needs field \"K_n\" in \"hyperparams\"".into()))?;
            let tau = hpc.tau.unwrap_or(1.0 / (1.0 + (cfg.kappa * cfg.kappa) as f64));
            let topology = Topology::theorem1(d1, d2, cfg.kappa, hpc.layers, k_n as usize);
            topology.check()?;
            let l_n = match overrides.l_n.or(hpc.l_n) {
                Some(l) => l,
                None => {
                    estimated = true;
                    let probe = HyperParams::desk(n, cfg.kappa, hpc.layers, tau, k_n, 1, 0, hpc.constants)?;
                    let init = init_weights(&topology, &probe, seed)?;
                    desk_smoothness(&init, &data, hpc.constants.c4, derive_seed(seed, "lipschitz", 0))?
                }
            };
            let t_n = overrides
                .t_n
                .or(hpc.t_n)
                .unwrap_or_else(|| DeskRule::default().steps(data.len(), l_n));
            HyperParams::desk(n, cfg.kappa, hpc.layers, tau, k_n, l_n, t_n, hpc.constants)?
        }
    };
    let topology = Topology::theorem1(d1, d2, cfg.kappa, hp.layers, hp.k_n as usize);
    let (weights, trace) = train(&data, &topology, &hp, seed)?;
    log::info!("training took {:.2} s", trace.wall_clock_secs);
    let audit = audit_lemma2(&trace.steps, hp.l_n as f64);

    write_weights(&loaded.resolve(&cfg.outputs.weights), &weights)?;
    write_file(&loaded.resolve(&cfg.outputs.trace), trace.to_csv().as_bytes())?;
    if let Some(report_path) = &cfg.outputs.report {
        let mut provenance = Provenance::new("train", &loaded.bytes).seed("init", seed);
        if estimated {
            provenance = provenance.seed("lipschitz", derive_seed(seed, "lipschitz", 0));
        }
        let report = TrainReport {
            provenance,
            dataset: cfg.dataset.display().to_string(),
            topology: &topology,
            hyperparams: &hp,
            lipschitz_estimated: estimated,
            initial_risk: trace.initial_risk(),
            final_risk: trace.final_risk(),
            lemma2_passed: audit.passed(),
            lemma2_diagnosis: audit.diagnosis.clone(),
        };
        write_file(&loaded.resolve(report_path), json(&report)?.as_bytes())?;
    }
    println!("K_n = {}, L_n = {}, t_n = {}", hp.k_n, hp.l_n, hp.t_n);
    println!("initial F_n = {:.16e}", trace.initial_risk());
    println!("final F_n = {:.16e}", trace.final_risk());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    provenance: Provenance,
    samples: usize,
    misclassification_risk: Estimate,
    bayes_risk: Estimate,
    excess_risk: f64,
    l2_risk: Estimate,
    lemma1: Lemma1Report,
}

pub fn eval_cmd(config_path: &Path) -> CliResult<()> {
    let loaded = config::load::<EvalConfig>(config_path)?;
    let cfg = &loaded.value;
    cfg.distribution.validate()?;
    let weights = read_weights(&loaded.resolve(&cfg.weights), cfg.topology.as_ref())?;
    let risk = misclassification_risk_mc(plug_in_classifier(&weights), &cfg.distribution, cfg.samples, cfg.seed)?;
    let bayes: Estimate = bayes_risk_mc(&cfg.distribution, cfg.samples, cfg.seed)?.into();
    let l2 = l2_risk_mc(&weights, &cfg.distribution, cfg.samples, cfg.seed)?;
    let lemma1 = check_lemma1(&weights, &cfg.distribution, cfg.samples, cfg.seed)?;
    let report = EvalReport {
        provenance: Provenance::new("eval", &loaded.bytes).seed("eval", cfg.seed),
        samples: cfg.samples,
        misclassification_risk: risk,
        bayes_risk: bayes,
        excess_risk: lemma1.excess,
        l2_risk: l2,
        lemma1: lemma1.clone(),
    };
    write_file(&loaded.resolve(&cfg.output), json(&report)?.as_bytes())?;
    println!("misclassification risk = {:.6} (stderr {:.2e})", risk.estimate, risk.stderr);
    println!("bayes risk = {:.6}", bayes.estimate);
    println!("excess risk = {:.6}", lemma1.excess);
    println!("L2 risk = {:.6}", l2.estimate);
    println!(
        "plug-in bound: excess {:.6} <= 2*sqrt(L2) {:.6} + {:.2e}: {}",
        lemma1.excess,
        lemma1.bound,
        lemma1.slack,
        if lemma1.passed { "holds" } else { "VIOLATED" }
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Gradients,
    Lemma2,
    Lemma7,
    Lemma1,
}

#[derive(Serialize)]
struct CheckOutput<R: Serialize> {
    provenance: Provenance,
    #[serde(flatten)]
    report: R,
}

fn finish_check<R: Serialize>(
    provenance: Provenance,
    report: R,
    passed: bool,
    failures: &[String],
    output: Option<&Path>,
) -> CliResult<()> {
    let text = json(&CheckOutput { provenance, report })?;
    match output {
        Some(path) => {
            write_file(path, text.as_bytes())?;
            println!("{} ({})", if passed { "PASS" } else { "FAIL" }, path.display());
        }
        None => print!("{text}"),
    }
    if passed {
        Ok(())
    } else {
        let mut message = format!("{} check(s) failed", failures.len());
        for f in failures.iter().take(10) {
            message.push_str("\n  ");
            message.push_str(f);
        }
        Err(CliError::CheckFailed(message))
    }
}

pub fn check_cmd(suite: Suite, config_path: Option<&Path>, output: Option<&Path>) -> CliResult<()> {
    match suite {
        Suite::Gradients => {
            let loaded = config::load_or_default::<GradientSuiteConfig>(config_path)?;
            let r = suites::gradient_suite(&loaded.value)?;
            let p = Provenance::new("check gradients", &loaded.bytes).seed("suite", loaded.value.seed);
            let (passed, failures) = (r.passed, r.failures.clone());
            finish_check(p, r, passed, &failures, output)
        }
        Suite::Lemma7 => {
            let loaded = config::load_or_default::<Lemma7SuiteConfig>(config_path)?;
            let r = suites::lemma7_suite(&loaded.value)?;
            let p = Provenance::new("check lemma7", &loaded.bytes).seed("suite", loaded.value.seed);
            let (passed, failures) = (r.passed, r.failures.clone());
            finish_check(p, r, passed, &failures, output)
        }
        Suite::Lemma2 => {
            let loaded = config::load_or_default::<Lemma2SuiteConfig>(config_path)?;
            let r = suites::lemma2_suite(&loaded.value)?;
            let p = Provenance::new("check lemma2", &loaded.bytes).seed("suite", loaded.value.seed);
            let (passed, failures) = (r.passed, r.failures.clone());
            finish_check(p, r, passed, &failures, output)
        }
        Suite::Lemma1 => {
            let loaded = config::load_or_default::<Lemma1SuiteConfig>(config_path)?;
            let r = suites::lemma1_suite(&loaded.value)?;
            let p = Provenance::new("check lemma1", &loaded.bytes).seed("suite", loaded.value.seed);
            let (passed, failures) = (r.passed, r.failures.clone());
            finish_check(p, r, passed, &failures, output)
        }
    }
}

#[derive(Serialize)]
struct StudySummary<'a> {
    provenance: Provenance,
    distribution: String,
    replications: usize,
    eval_samples: usize,
    csv: String,
    #[serde(flatten)]
    summary: &'a RateSummary,
}

#[derive(Serialize)]
struct SelfTestSummary<'a> {
    provenance: Provenance,
    series: &'a [(f64, f64)],
    fit: LogLogFit,
}

pub fn rate_study_cmd(config_path: &Path) -> CliResult<()> {
    let loaded = config::load::<RateStudyCommandConfig>(config_path)?;
    match &loaded.value {
        RateStudyCommandConfig::FitterSelfTest { series, outputs } => {
            let fit = fit_loglog(series)?;
            let summary = SelfTestSummary {
                provenance: Provenance::new("rate-study", &loaded.bytes),
                series,
                fit,
            };
            let path = loaded.resolve(&outputs.summary);
            write_file(&path, json(&summary)?.as_bytes())?;
            println!("slope = {:.6}, intercept = {:.6}, R^2 = {:.6}", fit.slope, fit.intercept, fit.r_squared);
        }
        RateStudyCommandConfig::Study {
            distribution,
            n_grid,
            replications,
            eval_samples,
            rule,
            seed,
            outputs,
        } => {
            distribution.validate()?;
            let study = RateStudyConfig {
                n_grid: n_grid.clone(),
                replications: *replications,
                eval_samples: *eval_samples,
                rule: rule.clone(),
                seed: *seed,
            };
            let (rows, summary) = rate_study(distribution, &study)?;
            let csv_path = loaded.resolve(&outputs.csv);
            write_file(&csv_path, rate_rows_to_csv(&rows).as_bytes())?;
            let mut provenance = Provenance::new("rate-study", &loaded.bytes).seed("study", *seed);
            for rep in 0..*replications {
                provenance = provenance.seed(&format!("rep{rep}"), derive_seed(*seed, "rate-rep", rep as u64));
            }
            let doc = StudySummary {
                provenance,
                distribution: distribution.describe(),
                replications: *replications,
                eval_samples: *eval_samples,
                csv: outputs.csv.display().to_string(),
                summary: &summary,
            };
            write_file(&loaded.resolve(&outputs.summary), json(&doc)?.as_bytes())?;
            for (n, e) in summary.n_grid.iter().zip(&summary.mean_excess) {
                println!("n = {n:>6}  mean excess = {e:.6}");
            }
            println!(
                "slope = {:.6}, intercept = {:.6}, R^2 = {:.6}",
                summary.fit.slope, summary.fit.intercept, summary.fit.r_squared
            );
        }
    }
    Ok(())
}

fn stats(values: &[f64]) -> (f64, f64, f64) {
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let l1 = values.iter().map(|v| v.abs()).sum();
    let l2 = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    (max_abs, l1, l2)
}

pub fn inspect_cmd(weights_path: &Path, topology_path: Option<&PathBuf>) -> CliResult<()> {
    let topology = match topology_path {
        Some(p) => Some(config::parse::<Topology>(&std::fs::read(p).map_err(|e| CliError::io(p, e))?, p)?),
        None => None,
    };
    let w = read_weights(weights_path, topology.as_ref())?;
    let t = w.topology();
    println!("topology: d = {}x{}, kappa = {}, L = {}, K = {}", t.d1, t.d2, t.kappa, t.layers, t.subnetworks);
    println!("windows M = {:?}, channels k = {:?}", t.windows, t.channels);
    println!("parameters = {}", w.len());
    let (max_abs, l1, l2) = stats(w.outer());
    let nonzero = w.outer().iter().filter(|v| **v != 0.0).count();
    println!("outer weights: nonzero = {nonzero}/{}, max |w_k| = {max_abs:.6e}, sum |w_k| = {l1:.6e} (bounds |f_w|), norm = {l2:.6e}", t.subnetworks);
    for r in 1..=t.layers {
        let filters: Vec<f64> = (0..t.subnetworks).flat_map(|k| w.filters_of(r, k).to_vec()).collect();
        let biases: Vec<f64> = (0..t.subnetworks).flat_map(|k| w.biases_of(r, k).to_vec()).collect();
        let (fm, _, fl2) = stats(&filters);
        let (bm, _, bl2) = stats(&biases);
        println!(
            "layer {r}: {} filter weights (max |.| = {fm:.6e}, norm = {fl2:.6e}), {} biases (max |.| = {bm:.6e}, norm = {bl2:.6e})",
            filters.len(),
            biases.len()
        );
    }
    Ok(())
}
