//! JSON configuration documents, one per command. Relative paths inside a
//! config are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use overcnn::eval::DeskRule;
use overcnn::synthdata::{AvgPoolDistribution, PatchFunction, PixelLaw};
use overcnn::{Constants, Mode, Topology};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// A parsed config together with its raw bytes and location.
#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub value: T,
    pub bytes: Vec<u8>,
    pub base: PathBuf,
}

impl<T> Loaded<T> {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base.join(path)
        }
    }
}

pub fn load<T: DeserializeOwned>(path: &Path) -> CliResult<Loaded<T>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let value = parse(&bytes, path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { value, bytes, base })
}

pub fn parse<T: DeserializeOwned>(bytes: &[u8], path: &Path) -> CliResult<T> {
    serde_json::from_slice(bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Default for `check` suites run without a config: the serialized default
/// value stands in for the file bytes.
pub fn load_or_default<T>(path: Option<&Path>) -> CliResult<Loaded<T>>
where
    T: DeserializeOwned + Serialize + Default,
{
    match path {
        Some(p) => load(p),
        None => {
            let value = T::default();
            let bytes = serde_json::to_vec(&value).map_err(|e| CliError::Config(e.to_string()))?;
            Ok(Loaded {
                value,
                bytes,
                base: PathBuf::new(),
            })
        }
    }
}

fn default_eval_samples() -> usize {
    100_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub distribution: AvgPoolDistribution,
    pub n: usize,
    pub seed: u64,
    pub output: PathBuf,
    /// Images used for the Bayes risk printed after generation.
    #[serde(default = "default_eval_samples")]
    pub bayes_samples: usize,
}

fn default_layers() -> usize {
    2
}

/// Training schedule. In desk mode `K_n` is required; a missing `L_n` is
/// estimated as four times the gradient Lipschitz constant around the
/// initialization, and a missing `t_n` becomes `min(⌈ln n · L_n⌉, 20000)`.
/// Theory mode derives everything from `n`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParamsConfig {
    pub mode: Mode,
    #[serde(rename = "L", default = "default_layers")]
    pub layers: usize,
    #[serde(rename = "K_n", default)]
    pub k_n: Option<u64>,
    #[serde(rename = "L_n", default)]
    pub l_n: Option<u64>,
    #[serde(default)]
    pub t_n: Option<u64>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub constants: Constants,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOutputs {
    /// `.bin` selects the raw binary format, anything else JSON.
    pub weights: PathBuf,
    pub trace: PathBuf,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub kappa: usize,
    pub seed: u64,
    pub hyperparams: HyperParamsConfig,
    pub outputs: TrainOutputs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub weights: PathBuf,
    /// Required for binary weight files, which do not store it.
    #[serde(default)]
    pub topology: Option<Topology>,
    pub distribution: AvgPoolDistribution,
    pub seed: u64,
    #[serde(default = "default_eval_samples")]
    pub samples: usize,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientSuiteConfig {
    pub seed: u64,
    pub configurations: usize,
    pub h: f64,
    pub tolerance: f64,
    pub max_parameters: usize,
}

impl Default for GradientSuiteConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            configurations: 100,
            h: 1e-5,
            tolerance: 1e-6,
            max_parameters: 2000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lemma7SuiteConfig {
    pub seed: u64,
    pub instances: usize,
    pub max_size: usize,
    pub probes: usize,
}

impl Default for Lemma7SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            instances: 50,
            max_size: 20,
            probes: 4,
        }
    }
}

fn patch_mean_4x4() -> AvgPoolDistribution {
    AvgPoolDistribution {
        d1: 4,
        d2: 4,
        kappa: 1,
        patch_function: PatchFunction::PatchMean,
        pixel_law: PixelLaw::UniformIid,
    }
}

/// Desk training runs audited step by step. `L_n` and `t_n`, when given,
/// replace the values chosen by `rule`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lemma2SuiteConfig {
    pub seed: u64,
    pub runs: usize,
    pub n: usize,
    pub distribution: AvgPoolDistribution,
    pub rule: DeskRule,
    #[serde(rename = "L_n")]
    pub l_n: Option<u64>,
    pub t_n: Option<u64>,
}

impl Default for Lemma2SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            runs: 10,
            n: 100,
            distribution: patch_mean_4x4(),
            rule: DeskRule::default(),
            l_n: None,
            t_n: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lemma1Fixture {
    pub name: String,
    pub distribution: AvgPoolDistribution,
    pub n: usize,
    #[serde(default)]
    pub rule: DeskRule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lemma1SuiteConfig {
    pub seed: u64,
    pub samples: usize,
    pub fixtures: Vec<Lemma1Fixture>,
}

impl Default for Lemma1SuiteConfig {
    fn default() -> Self {
        let dist = |kappa, patch_function| AvgPoolDistribution {
            d1: 4,
            d2: 4,
            kappa,
            patch_function,
            pixel_law: PixelLaw::UniformIid,
        };
        let fixture = |name: &str, distribution: AvgPoolDistribution| Lemma1Fixture {
            name: name.into(),
            // the 2x2-window networks cost about four times as much per sample
            n: if distribution.kappa == 1 { 200 } else { 100 },
            distribution,
            rule: DeskRule::default(),
        };
        Self {
            seed: 1,
            samples: 100_000,
            fixtures: vec![
                fixture("patch-mean", dist(1, PatchFunction::PatchMean)),
                fixture("constant", dist(1, PatchFunction::Constant { value: 0.3 })),
                fixture(
                    "holder-bump",
                    dist(
                        2,
                        PatchFunction::HolderBump {
                            center: vec![0.5; 4],
                            height: 0.9,
                        },
                    ),
                ),
                fixture(
                    "clipped-affine",
                    dist(
                        2,
                        PatchFunction::ClippedAffine {
                            weights: vec![3.0, -2.0, 1.0, -2.0],
                            bias: 0.0,
                        },
                    ),
                ),
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateStudyOutputs {
    pub csv: PathBuf,
    pub summary: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfTestOutputs {
    pub summary: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RateStudyCommandConfig {
    /// Train and evaluate over a grid of sample sizes.
    Study {
        distribution: AvgPoolDistribution,
        n_grid: Vec<usize>,
        replications: usize,
        #[serde(default = "default_eval_samples")]
        eval_samples: usize,
        #[serde(default)]
        rule: DeskRule,
        seed: u64,
        outputs: RateStudyOutputs,
    },
    /// Fit a given `(n, excess)` series only; checks the fitter.
    FitterSelfTest {
        series: Vec<(f64, f64)>,
        outputs: SelfTestOutputs,
    },
}
