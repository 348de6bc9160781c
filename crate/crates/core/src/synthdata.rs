//! Synthetic distributions whose a posteriori probability is an
//! average-pooling model: `η(x)` is the mean of a fixed patch function over
//! every `κ x κ` patch of the image.
//!
//! Because `η` is known exactly, the Bayes classifier and all conditional
//! risks can be evaluated without label noise.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, Image, Sample};
use crate::rng::stream;
use crate::sum::{mean_and_stderr, CompensatedSum};

/// User-supplied patch function. Values outside `[0,1]` are clamped, with a
/// warning the first time it happens.
#[derive(Clone)]
pub struct CustomPatchFn {
    pub name: String,
    pub holder_exponent: f64,
    pub holder_constant: f64,
    func: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    warned: Arc<AtomicBool>,
}

impl CustomPatchFn {
    pub fn new<F>(name: impl Into<String>, holder_exponent: f64, holder_constant: f64, func: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            holder_exponent,
            holder_constant,
            func: Arc::new(func),
            warned: Arc::new(AtomicBool::new(false)),
        }
    }

    fn eval(&self, patch: &[f64]) -> f64 {
        let v = (self.func)(patch);
        if !(0.0..=1.0).contains(&v) {
            if !self.warned.swap(true, Ordering::Relaxed) {
                log::warn!(
                    "patch function '{}' returned {v} outside [0,1]; clamping",
                    self.name
                );
            }
            if v.is_nan() {
                return 0.0;
            }
            return v.clamp(0.0, 1.0);
        }
        v
    }
}

impl fmt::Debug for CustomPatchFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomPatchFn").field("name", &self.name).finish()
    }
}

/// Built-in patch functions, all mapping `[0,1]^{κ×κ}` into `[0,1]`.
///
/// | kind             | definition                                   | p   | C                          |
/// |------------------|----------------------------------------------|-----|----------------------------|
/// | `constant`       | `value`                                      | 1   | 0                          |
/// | `patch-mean`     | mean of the patch                            | 1   | `1/κ`                      |
/// | `clipped-affine` | `σ(⟨a, z⟩ + b)`                              | 1   | `‖a‖/4`                    |
/// | `holder-bump`    | `h · min(1, ‖z - z₀‖^{1/2})`                 | 1/2 | `h`                        |
/// | `corner-contrast`| `(1 + mean(top rows) - mean(bottom rows))/2` | 1   | `sqrt(1/|A| + 1/|B|)/2`    |
///
/// The corner-contrast split puts the first `⌈κ/2⌉` patch rows in `A` and
/// the rest in `B`, so it needs `κ ≥ 2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PatchFunction {
    Constant { value: f64 },
    PatchMean,
    ClippedAffine { weights: Vec<f64>, bias: f64 },
    HolderBump { center: Vec<f64>, height: f64 },
    CornerContrast,
    #[serde(skip)]
    Custom(CustomPatchFn),
}

impl PatchFunction {
    pub fn name(&self) -> String {
        match self {
            Self::Constant { value } => format!("constant({value})"),
            Self::PatchMean => "patch-mean".into(),
            Self::ClippedAffine { .. } => "clipped-affine".into(),
            Self::HolderBump { .. } => "holder-bump".into(),
            Self::CornerContrast => "corner-contrast".into(),
            Self::Custom(c) => format!("custom({})", c.name),
        }
    }

    pub fn validate(&self, kappa: usize) -> Result<()> {
        let cells = kappa * kappa;
        match self {
            Self::Constant { value } if !(0.0..=1.0).contains(value) => {
                Err(Error::Domain(format!("constant patch value {value} outside [0,1]")))
            }
            Self::ClippedAffine { weights, bias } => {
                if weights.len() != cells {
                    return Err(Error::Dimension(format!(
                        "clipped-affine needs {cells} weights, got {}",
                        weights.len()
                    )));
                }
                if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
                    return Err(Error::Domain("clipped-affine parameters must be finite".into()));
                }
                Ok(())
            }
            Self::HolderBump { center, height } => {
                if center.len() != cells {
                    return Err(Error::Dimension(format!(
                        "holder-bump centre needs {cells} entries, got {}",
                        center.len()
                    )));
                }
                if !(0.0..=1.0).contains(height) {
                    return Err(Error::Domain(format!("holder-bump height {height} outside [0,1]")));
                }
                Ok(())
            }
            Self::CornerContrast if kappa < 2 => Err(Error::Domain("corner-contrast needs kappa >= 2".into())),
            _ => Ok(()),
        }
    }

    /// Documented Hölder exponent `p` and constant `C`.
    pub fn smoothness(&self, kappa: usize) -> (f64, f64) {
        match self {
            Self::Constant { .. } => (1.0, 0.0),
            Self::PatchMean => (1.0, 1.0 / kappa as f64),
            Self::ClippedAffine { weights, .. } => {
                (1.0, weights.iter().map(|w| w * w).sum::<f64>().sqrt() / 4.0)
            }
            Self::HolderBump { height, .. } => (0.5, *height),
            Self::CornerContrast => {
                let (a, b) = contrast_sizes(kappa);
                (1.0, (1.0 / a as f64 + 1.0 / b as f64).sqrt() / 2.0)
            }
            Self::Custom(c) => (c.holder_exponent, c.holder_constant),
        }
    }

    /// Evaluates the function on a patch in image layout (`t1 * κ + t2`).
    pub fn eval(&self, patch: &[f64], kappa: usize) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::PatchMean => patch.iter().sum::<f64>() / patch.len() as f64,
            Self::ClippedAffine { weights, bias } => {
                let u = bias + weights.iter().zip(patch).map(|(w, z)| w * z).sum::<f64>();
                crate::network::logistic(u)
            }
            Self::HolderBump { center, height } => {
                let dist = center
                    .iter()
                    .zip(patch)
                    .map(|(c, z)| (c - z) * (c - z))
                    .sum::<f64>()
                    .sqrt();
                height * dist.sqrt().min(1.0)
            }
            Self::CornerContrast => {
                let (a, _) = contrast_sizes(kappa);
                let split = a;
                let top: f64 = patch[..split].iter().sum::<f64>() / split as f64;
                let rest = &patch[split..];
                let bottom: f64 = rest.iter().sum::<f64>() / rest.len() as f64;
                (0.5 * (1.0 + top - bottom)).clamp(0.0, 1.0)
            }
            Self::Custom(c) => c.eval(patch),
        }
    }
}

/// Cell counts of the two halves used by corner-contrast.
fn contrast_sizes(kappa: usize) -> (usize, usize) {
    let top_rows = kappa.div_ceil(2);
    (top_rows * kappa, (kappa - top_rows) * kappa)
}

/// How pixels are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PixelLaw {
    /// Every pixel i.i.d. uniform on `[0,1]`.
    #[default]
    UniformIid,
    /// A sum of `modes` random low-frequency cosines, mapped affinely into
    /// `[0,1]`.
    SmoothField { modes: usize, max_frequency: usize },
}

/// Joint law of `(X, Y)`: pixels from the pixel law, then
/// `Y ~ Bernoulli(η(X))` with `η` the patch average.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AvgPoolDistribution {
    pub d1: usize,
    pub d2: usize,
    pub kappa: usize,
    pub patch_function: PatchFunction,
    #[serde(default)]
    pub pixel_law: PixelLaw,
}

impl AvgPoolDistribution {
    pub fn new(d1: usize, d2: usize, kappa: usize, patch_function: PatchFunction, pixel_law: PixelLaw) -> Result<Self> {
        let dist = Self {
            d1,
            d2,
            kappa,
            patch_function,
            pixel_law,
        };
        dist.validate()?;
        Ok(dist)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d1 < 2 || self.d2 < 2 {
            return Err(Error::Dimension(format!("image must be at least 2x2, got {}x{}", self.d1, self.d2)));
        }
        if self.kappa == 0 || self.kappa > self.d1.min(self.d2) {
            return Err(Error::Domain(format!(
                "kappa = {} must lie in 1..=min(d1,d2) = {}",
                self.kappa,
                self.d1.min(self.d2)
            )));
        }
        if let PixelLaw::SmoothField { modes, .. } = self.pixel_law {
            if modes == 0 {
                return Err(Error::Domain("smooth-field needs at least one mode".into()));
            }
        }
        self.patch_function.validate(self.kappa)
    }

    pub fn describe(&self) -> String {
        format!(
            "avgpool(d={}x{}, kappa={}, f={}, pixels={:?})",
            self.d1,
            self.d2,
            self.kappa,
            self.patch_function.name(),
            self.pixel_law
        )
    }

    /// Draws one image from the pixel law.
    pub fn sample_image(&self, rng: &mut ChaCha8Rng) -> Image {
        let (d1, d2) = (self.d1, self.d2);
        let pixels = match self.pixel_law {
            PixelLaw::UniformIid => (0..d1 * d2).map(|_| rng.gen::<f64>()).collect(),
            PixelLaw::SmoothField { modes, max_frequency } => {
                let waves: Vec<(f64, f64, f64, f64)> = (0..modes)
                    .map(|_| {
                        let f1 = rng.gen_range(0..=max_frequency) as f64;
                        let f2 = rng.gen_range(0..=max_frequency) as f64;
                        let amp = rng.gen::<f64>() / (1.0 + f1 + f2);
                        let phase = std::f64::consts::TAU * rng.gen::<f64>();
                        (f1, f2, amp, phase)
                    })
                    .collect();
                let total: f64 = waves.iter().map(|w| w.2).sum();
                let mut px = Vec::with_capacity(d1 * d2);
                for i in 0..d1 {
                    for j in 0..d2 {
                        let s: f64 = waves
                            .iter()
                            .map(|&(f1, f2, amp, phase)| {
                                let arg = std::f64::consts::TAU * (f1 * i as f64 / d1 as f64 + f2 * j as f64 / d2 as f64);
                                amp * (arg + phase).cos()
                            })
                            .sum();
                        let v = if total > 0.0 { 0.5 + 0.5 * s / total } else { 0.5 };
                        px.push(v.clamp(0.0, 1.0));
                    }
                }
                px
            }
        };
        Image::new(d1, d2, pixels).expect("pixel law produces valid images")
    }

    /// The `index`-th image of the evaluation stream for `seed`. Shared by
    /// all Monte-Carlo estimators so that comparisons use common random
    /// numbers.
    pub fn eval_image(&self, seed: u64, index: u64) -> Image {
        self.sample_image(&mut stream(seed, "eval-image", index))
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.d1() != self.d1 || image.d2() != self.d2 {
            return Err(Error::Dimension(format!(
                "image is {}x{}, distribution expects {}x{}",
                image.d1(),
                image.d2(),
                self.d1,
                self.d2
            )));
        }
        Ok(())
    }

    pub(crate) fn eta_unchecked(&self, image: &Image) -> f64 {
        let k = self.kappa;
        let p1 = self.d1 - k + 1;
        let p2 = self.d2 - k + 1;
        let mut acc = CompensatedSum::new();
        let mut patch = vec![0.0; k * k];
        for i in 0..p1 {
            for j in 0..p2 {
                for t1 in 0..k {
                    for t2 in 0..k {
                        patch[t1 * k + t2] = image.get(i + t1, j + t2);
                    }
                }
                acc.add(self.patch_function.eval(&patch, k));
            }
        }
        acc.value() / (p1 * p2) as f64
    }
}

/// Exact a posteriori probability `P{Y = 1 | X = image}`.
pub fn eta(dist: &AvgPoolDistribution, image: &Image) -> Result<f64> {
    dist.check_image(image)?;
    Ok(dist.eta_unchecked(image))
}

/// Bayes classifier: 1 iff `η > 1/2` (strict).
pub fn bayes_classify(dist: &AvgPoolDistribution, image: &Image) -> Result<u8> {
    eta(dist, image).map(|e| u8::from(e > 0.5))
}

/// `n` i.i.d. pairs. Sample `i` uses its own stream `(seed, "sample", i)`:
/// pixels first, then one uniform for the Bernoulli label.
pub fn sample_dataset(dist: &AvgPoolDistribution, n: usize, seed: u64) -> Result<Dataset> {
    dist.validate()?;
    let samples: Vec<Sample> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, "sample", i);
            let image = dist.sample_image(&mut rng);
            let p = dist.eta_unchecked(&image);
            let label = u8::from(rng.gen::<f64>() < p);
            Sample { image, label }
        })
        .collect();
    Dataset::new(samples, dist.describe(), seed)
}

/// Monte-Carlo Bayes risk `E[min(η(X), 1 - η(X))]` over `m` evaluation
/// images, with its standard error.
pub fn bayes_risk_mc(dist: &AvgPoolDistribution, m: usize, seed: u64) -> Result<(f64, f64)> {
    if m < 100 {
        return Err(Error::Domain(format!("need at least 100 Monte-Carlo samples, got {m}")));
    }
    dist.validate()?;
    let values: Vec<f64> = (0..m as u64)
        .into_par_iter()
        .map(|i| {
            let e = dist.eta_unchecked(&dist.eval_image(seed, i));
            e.min(1.0 - e)
        })
        .collect();
    Ok(mean_and_stderr(&values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(d: usize, kappa: usize, f: PatchFunction) -> AvgPoolDistribution {
        AvgPoolDistribution::new(d, d, kappa, f, PixelLaw::UniformIid).unwrap()
    }

    /// Independent path: loop over every pixel position and average only
    /// where a full patch fits.
    fn eta_direct(dist: &AvgPoolDistribution, img: &Image) -> f64 {
        let k = dist.kappa;
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..img.d1() {
            for j in 0..img.d2() {
                if i + k <= img.d1() && j + k <= img.d2() {
                    total += dist.patch_function.eval(&img.patch(i, j, k), k);
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    fn builtins(kappa: usize) -> Vec<PatchFunction> {
        let cells = kappa * kappa;
        let mut fs = vec![
            PatchFunction::PatchMean,
            PatchFunction::ClippedAffine {
                weights: (0..cells).map(|i| (i as f64 - 1.5) * 0.8).collect(),
                bias: -0.2,
            },
            PatchFunction::HolderBump {
                center: vec![0.5; cells],
                height: 0.9,
            },
            PatchFunction::Constant { value: 0.3 },
        ];
        if kappa >= 2 {
            fs.push(PatchFunction::CornerContrast);
        }
        fs
    }

    #[test]
    fn eta_examples() {
        let d = dist(4, 2, PatchFunction::PatchMean);
        assert!((eta(&d, &Image::constant(4, 4, 0.37).unwrap()).unwrap() - 0.37).abs() < 1e-15);

        let single = dist(3, 3, PatchFunction::PatchMean);
        let single = AvgPoolDistribution { kappa: 3, ..single };
        let img = Image::new(3, 3, (0..9).map(|v| v as f64 / 10.0).collect()).unwrap();
        assert!((eta(&single, &img).unwrap() - 0.4).abs() < 1e-15);

        let d = dist(3, 2, PatchFunction::PatchMean);
        let mut px = vec![0.0; 9];
        px[0] = 1.0;
        let img = Image::new(3, 3, px).unwrap();
        assert!((eta(&d, &img).unwrap() - 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn eta_dimension_mismatch() {
        let d = dist(4, 2, PatchFunction::PatchMean);
        assert!(matches!(eta(&d, &Image::constant(3, 4, 0.0).unwrap()), Err(Error::Dimension(_))));
    }

    #[test]
    fn degenerate_labels() {
        let zero = sample_dataset(&dist(4, 1, PatchFunction::Constant { value: 0.0 }), 200, 1).unwrap();
        assert!(zero.samples().iter().all(|s| s.label == 0));
        let one = sample_dataset(&dist(4, 1, PatchFunction::Constant { value: 1.0 }), 200, 1).unwrap();
        assert!(one.samples().iter().all(|s| s.label == 1));
    }

    #[test]
    fn label_frequency_concentrates() {
        let data = sample_dataset(&dist(4, 1, PatchFunction::Constant { value: 0.3 }), 100_000, 5).unwrap();
        assert!((data.label_mean() - 0.3).abs() <= 3.0 * (0.3f64 * 0.7 / 1e5).sqrt());
    }

    #[test]
    fn sampling_is_reproducible() {
        let d = dist(4, 2, PatchFunction::PatchMean);
        let a = sample_dataset(&d, 50, 9).unwrap();
        let b = sample_dataset(&d, 50, 9).unwrap();
        let c = sample_dataset(&d, 50, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.meta().seed, 9);
    }

    #[test]
    fn bayes_boundary_is_strict() {
        let half = dist(3, 1, PatchFunction::Constant { value: 0.5 });
        assert_eq!(bayes_classify(&half, &Image::constant(3, 3, 0.2).unwrap()).unwrap(), 0);
        let low = dist(3, 1, PatchFunction::Constant { value: 0.3 });
        assert_eq!(bayes_classify(&low, &Image::constant(3, 3, 0.9).unwrap()).unwrap(), 0);
        let mean = dist(3, 2, PatchFunction::PatchMean);
        assert_eq!(bayes_classify(&mean, &Image::constant(3, 3, 0.9).unwrap()).unwrap(), 1);
    }

    #[test]
    fn bayes_risk_of_constant_targets() {
        let (r, se) = bayes_risk_mc(&dist(4, 1, PatchFunction::Constant { value: 0.3 }), 1000, 2).unwrap();
        assert!((r - 0.3).abs() < 1e-15 && se < 1e-15);
        let (r, _) = bayes_risk_mc(&dist(4, 1, PatchFunction::Constant { value: 0.5 }), 1000, 2).unwrap();
        assert_eq!(r, 0.5);
        assert!(bayes_risk_mc(&dist(4, 1, PatchFunction::PatchMean), 99, 2).is_err());
    }

    #[test]
    fn bayes_risk_consistent_across_sample_sizes() {
        let d = dist(4, 1, PatchFunction::PatchMean);
        let (small, se_small) = bayes_risk_mc(&d, 20_000, 3).unwrap();
        let (large, se_large) = bayes_risk_mc(&d, 400_000, 4).unwrap();
        assert!((small - large).abs() <= 3.0 * (se_small * se_small + se_large * se_large).sqrt());
    }

    #[test]
    fn two_eta_paths_agree_and_stay_in_range() {
        for kappa in [1, 2, 3] {
            for f in builtins(kappa) {
                for law in [
                    PixelLaw::UniformIid,
                    PixelLaw::SmoothField {
                        modes: 4,
                        max_frequency: 2,
                    },
                ] {
                    let d = AvgPoolDistribution::new(5, 4, kappa, f.clone(), law).unwrap();
                    for i in 0..2_000 {
                        let img = d.eval_image(17, i);
                        let e = eta(&d, &img).unwrap();
                        assert!((0.0..=1.0).contains(&e));
                        assert!((e - eta_direct(&d, &img)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn builtins_satisfy_documented_holder_bounds() {
        for kappa in [1, 2, 3] {
            for f in builtins(kappa) {
                let (p, c) = f.smoothness(kappa);
                let mut rng = stream(21, "holder", kappa as u64);
                let cells = kappa * kappa;
                for _ in 0..10_000 {
                    let z: Vec<f64> = (0..cells).map(|_| rng.gen()).collect();
                    // mix of far and very close pairs
                    let scale = if rng.gen::<bool>() { 1.0 } else { 1e-3 };
                    let z2: Vec<f64> = z
                        .iter()
                        .map(|v| (v + scale * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0))
                        .collect();
                    let dist: f64 = z.iter().zip(&z2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    let lhs = (f.eval(&z, kappa) - f.eval(&z2, kappa)).abs();
                    assert!(lhs <= c * dist.powf(p) + 1e-12, "{} violates Hölder bound", f.name());
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(AvgPoolDistribution::new(4, 4, 1, PatchFunction::CornerContrast, PixelLaw::UniformIid).is_err());
        assert!(AvgPoolDistribution::new(4, 4, 5, PatchFunction::PatchMean, PixelLaw::UniformIid).is_err());
        assert!(AvgPoolDistribution::new(
            4,
            4,
            2,
            PatchFunction::ClippedAffine {
                weights: vec![1.0; 3],
                bias: 0.0
            },
            PixelLaw::UniformIid
        )
        .is_err());
        assert!(AvgPoolDistribution::new(4, 4, 1, PatchFunction::Constant { value: 1.5 }, PixelLaw::UniformIid).is_err());
    }

    #[test]
    fn custom_functions_are_clamped() {
        let f = PatchFunction::Custom(CustomPatchFn::new("wide", 1.0, 2.0, |z: &[f64]| 2.0 * z[0] - 0.5));
        let d = AvgPoolDistribution::new(3, 3, 1, f, PixelLaw::UniformIid).unwrap();
        assert_eq!(eta(&d, &Image::constant(3, 3, 1.0).unwrap()).unwrap(), 1.0);
        assert_eq!(eta(&d, &Image::constant(3, 3, 0.0).unwrap()).unwrap(), 0.0);
        assert_eq!(eta(&d, &Image::constant(3, 3, 0.5).unwrap()).unwrap(), 0.5);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let d = AvgPoolDistribution::new(
            4,
            4,
            2,
            PatchFunction::HolderBump {
                center: vec![0.1, 0.2, 0.3, 0.4],
                height: 0.5,
            },
            PixelLaw::SmoothField {
                modes: 3,
                max_frequency: 1,
            },
        )
        .unwrap();
        let json = serde_json::to_string(&d).unwrap();
        assert!(json.contains("\"kind\":\"holder-bump\""));
        let back: AvgPoolDistribution = serde_json::from_str(&json).unwrap();
        assert_eq!(back.describe(), d.describe());
    }
}
