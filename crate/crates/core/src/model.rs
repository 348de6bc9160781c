//! Domain types: images, network topology, the flattened weight vector,
//! hyperparameter schedules and labelled datasets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

/// A grey-scale image with `d1` columns and `d2` rows.
///
/// Pixels are stored with the column index `i` major and the row index `j`
/// minor, i.e. pixel `(i, j)` (0-based) lives at `i * d2 + j`. This is the
/// same order used by the dataset file columns `p_1_1, p_1_2, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    d1: usize,
    d2: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(d1: usize, d2: usize, pixels: Vec<f64>) -> Result<Self> {
        if d1 < 2 || d2 < 2 {
            return Err(Error::Dimension(format!(
                "image must be at least 2x2, got {d1}x{d2}"
            )));
        }
        if pixels.len() != d1 * d2 {
            return Err(Error::Dimension(format!(
                "expected {} pixels for a {d1}x{d2} image, got {}",
                d1 * d2,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("pixel value {p} outside [0,1]")));
        }
        Ok(Self { d1, d2, pixels })
    }

    pub fn constant(d1: usize, d2: usize, value: f64) -> Result<Self> {
        Self::new(d1, d2, vec![value; d1 * d2])
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn d2(&self) -> usize {
        self.d2
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pixels[i * self.d2 + j]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Copies the `size x size` patch whose upper-left corner is `(i, j)`,
    /// in the same column-major layout as the image itself.
    pub fn patch(&self, i: usize, j: usize, size: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(size * size);
        for t1 in 0..size {
            for t2 in 0..size {
                out.push(self.get(i + t1, j + t2));
            }
        }
        out
    }
}

/// A violated topology invariant; `Display` names the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("L must be at least 2, got {0}")]
    TooFewLayers(usize),
    #[error("M must have L+1 entries, got {got} for L={layers}")]
    WindowCount { layers: usize, got: usize },
    #[error("k must have L+1 entries, got {got} for L={layers}")]
    ChannelCount { layers: usize, got: usize },
    #[error("M_{index} = {value} outside 1..=min(d1,d2)")]
    WindowRange { index: usize, value: usize },
    #[error("k_{index} must be positive")]
    ZeroChannels { index: usize },
    #[error("k_0 and k_L must equal 1")]
    EndChannels,
    #[error("K must be at least 1")]
    NoSubnetworks,
    #[error("d1 and d2 must exceed 1, got {d1}x{d2}")]
    ImageTooSmall { d1: usize, d2: usize },
    #[error("kappa must be at least 1")]
    ZeroKappa,
    #[error("κ exceeds min(d1,d2): kappa={kappa}, d1={d1}, d2={d2}")]
    KappaTooLarge { kappa: usize, d1: usize, d2: usize },
    #[error("M_1 and M_(L+1) must equal kappa")]
    OuterWindows,
    #[error("M_2..M_L must equal 1")]
    InnerWindows,
    #[error("k_1..k_(L-1) must equal 2*kappa^2")]
    HiddenChannels,
}

/// Architecture of the parallel convolutional network.
///
/// `windows[r-1]` is `M_r` for `r = 1..=L+1` and `channels[r]` is `k_r` for
/// `r = 0..=L`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "M")]
    pub windows: Vec<usize>,
    #[serde(rename = "k")]
    pub channels: Vec<usize>,
    #[serde(rename = "K")]
    pub subnetworks: usize,
    pub d1: usize,
    pub d2: usize,
    pub kappa: usize,
}

impl Topology {
    /// The layout prescribed for the convergence theorem: `M_1 = M_{L+1} = κ`,
    /// 1x1 windows in between and `2κ²` hidden channels.
    pub fn theorem1(d1: usize, d2: usize, kappa: usize, layers: usize, subnetworks: usize) -> Self {
        let mut windows = vec![1; layers + 1];
        windows[0] = kappa;
        windows[layers] = kappa;
        let mut channels = vec![2 * kappa * kappa; layers + 1];
        channels[0] = 1;
        channels[layers] = 1;
        Self {
            layers,
            windows,
            channels,
            subnetworks,
            d1,
            d2,
            kappa,
        }
    }

    /// Checks the invariants every topology must satisfy. Never aborts; one
    /// entry per violated invariant.
    pub fn validate(&self) -> Vec<TopologyError> {
        let mut errors = Vec::new();
        let l = self.layers;
        if l < 2 {
            errors.push(TopologyError::TooFewLayers(l));
        }
        if self.d1 < 2 || self.d2 < 2 {
            errors.push(TopologyError::ImageTooSmall {
                d1: self.d1,
                d2: self.d2,
            });
        }
        if self.kappa == 0 {
            errors.push(TopologyError::ZeroKappa);
        }
        let side = self.d1.min(self.d2);
        if self.kappa > side {
            errors.push(TopologyError::KappaTooLarge {
                kappa: self.kappa,
                d1: self.d1,
                d2: self.d2,
            });
        }
        if self.subnetworks == 0 {
            errors.push(TopologyError::NoSubnetworks);
        }
        if self.windows.len() != l + 1 {
            errors.push(TopologyError::WindowCount {
                layers: l,
                got: self.windows.len(),
            });
        } else {
            for (idx, &m) in self.windows.iter().enumerate() {
                if m == 0 || m > side {
                    errors.push(TopologyError::WindowRange {
                        index: idx + 1,
                        value: m,
                    });
                }
            }
        }
        if self.channels.len() != l + 1 {
            errors.push(TopologyError::ChannelCount {
                layers: l,
                got: self.channels.len(),
            });
        } else {
            for (idx, &c) in self.channels.iter().enumerate() {
                if c == 0 {
                    errors.push(TopologyError::ZeroChannels { index: idx });
                }
            }
            if self.channels[0] != 1 || self.channels[l] != 1 {
                errors.push(TopologyError::EndChannels);
            }
        }
        errors
    }

    /// `validate` plus the window/channel layout of the convergence theorem.
    pub fn validate_theorem1(&self) -> Vec<TopologyError> {
        let mut errors = self.validate();
        let l = self.layers;
        if self.windows.len() == l + 1 && l >= 1 {
            if self.windows[0] != self.kappa || self.windows[l] != self.kappa {
                errors.push(TopologyError::OuterWindows);
            }
            if self.windows[1..l].iter().any(|&m| m != 1) {
                errors.push(TopologyError::InnerWindows);
            }
        }
        if self.channels.len() == l + 1 && l >= 1 {
            let hidden = 2 * self.kappa * self.kappa;
            if self.channels[1..l].iter().any(|&c| c != hidden) {
                errors.push(TopologyError::HiddenChannels);
            }
        }
        errors
    }

    pub fn check(&self) -> Result<()> {
        let errors = self.validate();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Topology(errors))
        }
    }

    /// True when every window between the first and the pooling layer is 1x1,
    /// which makes each pooled term a function of one `κ x κ` patch.
    pub fn is_patch_local(&self) -> bool {
        self.windows[1..self.layers].iter().all(|&m| m == 1)
            && self.windows[0] == self.kappa
            && self.windows[self.layers] == self.kappa
    }

    /// Window size `M_r`, 1-based as in the layer numbering.
    #[inline]
    pub fn window(&self, r: usize) -> usize {
        self.windows[r - 1]
    }

    /// Number of pooled positions along each axis.
    pub fn pooled_extent(&self) -> (usize, usize) {
        let m = self.windows[self.layers];
        (self.d1 - m + 1, self.d2 - m + 1)
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(self)
    }
}

/// Exact length of the flattened weight vector:
/// `K + Σ_r K·(M_r²·k_{r-1}·k_r + k_r)`.
pub fn parameter_count(t: &Topology) -> usize {
    let per_subnet: usize = (1..=t.layers)
        .map(|r| {
            let m = t.window(r);
            m * m * t.channels[r - 1] * t.channels[r] + t.channels[r]
        })
        .sum();
    t.subnetworks + t.subnetworks * per_subnet
}

/// Offsets of each parameter group inside the canonical flattening:
/// outer weights by `k`, then filters by `(r, k, s2, s1, t1, t2)`, then
/// biases by `(r, k, s2)`, every key ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    subnetworks: usize,
    filter_base: Vec<usize>,
    filter_block: Vec<usize>,
    bias_base: Vec<usize>,
    filters_end: usize,
    len: usize,
}

impl Layout {
    pub fn new(t: &Topology) -> Self {
        let big_k = t.subnetworks;
        // index 0 unused so that layer numbers stay 1-based
        let mut filter_base = vec![0; t.layers + 1];
        let mut filter_block = vec![0; t.layers + 1];
        let mut bias_base = vec![0; t.layers + 1];
        let mut cursor = big_k;
        for r in 1..=t.layers {
            let m = t.window(r);
            filter_block[r] = m * m * t.channels[r - 1] * t.channels[r];
            filter_base[r] = cursor;
            cursor += big_k * filter_block[r];
        }
        let filters_end = cursor;
        for r in 1..=t.layers {
            bias_base[r] = cursor;
            cursor += big_k * t.channels[r];
        }
        Self {
            subnetworks: big_k,
            filter_base,
            filter_block,
            bias_base,
            filters_end,
            len: cursor,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn outer(&self, k: usize) -> usize {
        k
    }

    /// Start of the contiguous filter block of sub-network `k` in layer `r`;
    /// inside it the weight for `(s2, s1, t1, t2)` sits at
    /// `((s2 * k_{r-1} + s1) * M_r + t1) * M_r + t2`.
    #[inline]
    pub fn filter_block(&self, r: usize, k: usize) -> usize {
        self.filter_base[r] + k * self.filter_block[r]
    }

    #[inline]
    pub fn bias_block(&self, r: usize, k: usize, channels: usize) -> usize {
        self.bias_base[r] + k * channels
    }

    /// Flat position of a filter weight. Indices are 0-based except the
    /// layer number `r`, which runs `1..=L`.
    pub fn filter(&self, t: &Topology, r: usize, k: usize, s2: usize, s1: usize, t1: usize, t2: usize) -> usize {
        let m = t.window(r);
        self.filter_block(r, k) + ((s2 * t.channels[r - 1] + s1) * m + t1) * m + t2
    }

    pub fn bias(&self, t: &Topology, r: usize, k: usize, s2: usize) -> usize {
        self.bias_block(r, k, t.channels[r]) + s2
    }

    pub fn outer_range(&self) -> std::ops::Range<usize> {
        0..self.subnetworks
    }

    pub fn filter_range(&self) -> std::ops::Range<usize> {
        self.subnetworks..self.filters_end
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.filters_end..self.len
    }

    /// Layer number (1-based) of a flat index in the filter or bias range;
    /// `None` for outer weights.
    pub fn layer_of(&self, index: usize) -> Option<usize> {
        if index < self.subnetworks {
            return None;
        }
        let layers = self.filter_base.len() - 1;
        if index < self.filters_end {
            (1..=layers).rev().find(|&r| index >= self.filter_base[r])
        } else {
            (1..=layers).rev().find(|&r| index >= self.bias_base[r])
        }
    }
}

/// All trainable weights of the network in canonical flat order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    topology: Topology,
    layout: Layout,
    values: Vec<f64>,
}

/// The three parameter groups of a [`WeightVector`], each in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightParts {
    pub outer: Vec<f64>,
    pub filters: Vec<f64>,
    pub biases: Vec<f64>,
}

impl WeightVector {
    pub fn zeros(topology: &Topology) -> Result<Self> {
        topology.check()?;
        let layout = Layout::new(topology);
        let values = vec![0.0; layout.len()];
        Ok(Self {
            topology: topology.clone(),
            layout,
            values,
        })
    }

    pub fn from_flat(topology: &Topology, values: Vec<f64>) -> Result<Self> {
        topology.check()?;
        let layout = Layout::new(topology);
        if values.len() != layout.len() {
            return Err(Error::Dimension(format!(
                "weight vector has {} entries, topology needs {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self {
            topology: topology.clone(),
            layout,
            values,
        })
    }

    pub fn from_parts(topology: &Topology, parts: WeightParts) -> Result<Self> {
        topology.check()?;
        let layout = Layout::new(topology);
        // group sizes must match individually, not just in total
        let sizes = [
            ("outer", parts.outer.len(), layout.outer_range().len()),
            ("filters", parts.filters.len(), layout.filter_range().len()),
            ("biases", parts.biases.len(), layout.bias_range().len()),
        ];
        for (name, got, want) in sizes {
            if got != want {
                return Err(Error::Dimension(format!("{name} has {got} entries, topology needs {want}")));
            }
        }
        let mut values = parts.outer;
        values.extend(parts.filters);
        values.extend(parts.biases);
        Self::from_flat(topology, values)
    }

    pub fn to_parts(&self) -> WeightParts {
        WeightParts {
            outer: self.values[self.layout.outer_range()].to_vec(),
            filters: self.values[self.layout.filter_range()].to_vec(),
            biases: self.values[self.layout.bias_range()].to_vec(),
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn outer(&self) -> &[f64] {
        &self.values[self.layout.outer_range()]
    }

    pub fn outer_mut(&mut self) -> &mut [f64] {
        let range = self.layout.outer_range();
        &mut self.values[range]
    }

    pub fn filter(&self, r: usize, k: usize, s2: usize, s1: usize, t1: usize, t2: usize) -> f64 {
        self.values[self.layout.filter(&self.topology, r, k, s2, s1, t1, t2)]
    }

    pub fn set_filter(&mut self, r: usize, k: usize, s2: usize, s1: usize, t1: usize, t2: usize, v: f64) {
        let idx = self.layout.filter(&self.topology, r, k, s2, s1, t1, t2);
        self.values[idx] = v;
    }

    pub fn bias(&self, r: usize, k: usize, s2: usize) -> f64 {
        self.values[self.layout.bias(&self.topology, r, k, s2)]
    }

    pub fn set_bias(&mut self, r: usize, k: usize, s2: usize, v: f64) {
        let idx = self.layout.bias(&self.topology, r, k, s2);
        self.values[idx] = v;
    }

    /// Filter block of sub-network `k` in layer `r` (see [`Layout::filter_block`]).
    #[inline]
    pub fn filters_of(&self, r: usize, k: usize) -> &[f64] {
        let m = self.topology.window(r);
        let len = m * m * self.topology.channels[r - 1] * self.topology.channels[r];
        let start = self.layout.filter_block(r, k);
        &self.values[start..start + len]
    }

    #[inline]
    pub fn biases_of(&self, r: usize, k: usize) -> &[f64] {
        let c = self.topology.channels[r];
        let start = self.layout.bias_block(r, k, c);
        &self.values[start..start + c]
    }

    /// A copy of `self` with the values replaced; shape is preserved.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::Dimension(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(Self {
            topology: self.topology.clone(),
            layout: self.layout.clone(),
            values,
        })
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

/// Gradients share the weight vector's shape and flattening.
pub type Gradient = WeightVector;

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Positive constants of the estimator: initialization ranges (`c2`, `c3`),
/// ridge weight on the outer weights (`c4`) and the step-count factor (`c5`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self {
            c2: 1.0,
            c3: 1.0,
            c4: 0.1,
            c5: 5.0,
        }
    }
}

impl Constants {
    pub fn check(&self) -> Result<()> {
        for (name, v) in [("c2", self.c2), ("c3", self.c3), ("c4", self.c4), ("c5", self.c5)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.c5 < 1.0 / (2.0 * self.c4) {
            return Err(Error::Domain(format!(
                "c5 = {} is below 1/(2*c4) = {}",
                self.c5,
                1.0 / (2.0 * self.c4)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Theory,
    Desk,
}

/// Sample size dependent training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub n: u64,
    pub kappa: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub tau: f64,
    #[serde(rename = "K_n")]
    pub k_n: u64,
    #[serde(rename = "L_n")]
    pub l_n: u64,
    pub lambda_n: f64,
    pub t_n: u64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub mode: Mode,
}

impl HyperParams {
    pub fn constants(&self) -> Constants {
        Constants {
            c2: self.c2,
            c3: self.c3,
            c4: self.c4,
            c5: self.c5,
        }
    }

    /// Half-width of the uniform initialization range for layer `r`:
    /// `c3·(log n)²·n^τ` for the first layer, `c2·(log n)²` above it.
    pub fn init_bound(&self, r: usize) -> f64 {
        let log_n = (self.n as f64).ln();
        if r == 1 {
            self.c3 * log_n * log_n * (self.n as f64).powf(self.tau)
        } else {
            self.c2 * log_n * log_n
        }
    }

    /// Directly specified parameters for feasible experiment sizes. Only the
    /// constant constraint `c5 ≥ 1/(2·c4)` is enforced.
    #[allow(clippy::too_many_arguments)]
    pub fn desk(
        n: u64,
        kappa: usize,
        layers: usize,
        tau: f64,
        k_n: u64,
        l_n: u64,
        t_n: u64,
        constants: Constants,
    ) -> Result<Self> {
        constants.check()?;
        if n == 0 {
            return Err(Error::Domain("n must be positive".into()));
        }
        if l_n == 0 {
            return Err(Error::Domain("L_n must be positive".into()));
        }
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(Error::Domain(format!("tau must be finite and nonnegative, got {tau}")));
        }
        Ok(Self {
            n,
            kappa,
            layers,
            tau,
            k_n,
            l_n,
            lambda_n: step_size_for(l_n),
            t_n,
            c2: constants.c2,
            c3: constants.c3,
            c4: constants.c4,
            c5: constants.c5,
            mode: Mode::Desk,
        })
    }
}

/// `λ = 1/L`. The product `λ·L` is 1 up to one rounding: for some integers
/// (237 is the smallest) no double satisfies `x * L == 1.0` exactly.
pub fn step_size_for(l: u64) -> f64 {
    1.0 / l as f64
}

const TWO_POW_64: f64 = 18_446_744_073_709_551_616.0;

fn ceil_to_u64(value: f64, what: &str) -> Result<u64> {
    if !value.is_finite() || value >= TWO_POW_64 {
        return Err(Error::Overflow(format!("{what} = {value:e} exceeds the 64-bit range")));
    }
    Ok(value.ceil() as u64)
}

/// The schedule of the convergence theorem for sample size `n`:
/// `τ = 1/(1+κ²)`, `K_n = ⌈n^{2κ²+7}·ln n⌉`, `L_n = ⌈(ln n)^{6L+2}·K_n^{3/2}⌉`,
/// `λ_n = 1/L_n` and `t_n = ⌈c5·ln n·L_n⌉`.
///
/// Fails with [`Error::Overflow`] whenever one of the integer quantities does
/// not fit in 64 bits, which is the case for all but tiny `n`.
pub fn derive_theorem1_hyperparams(
    n: u64,
    kappa: usize,
    layers: usize,
    constants: Constants,
) -> Result<HyperParams> {
    if n < 3 {
        return Err(Error::Domain(format!("n must be at least 3, got {n}")));
    }
    if kappa == 0 {
        return Err(Error::Domain("kappa must be at least 1".into()));
    }
    if layers < 2 {
        return Err(Error::Domain(format!("L must be at least 2, got {layers}")));
    }
    constants.check()?;

    let log_n = (n as f64).ln();
    let kappa_sq = (kappa * kappa) as u32;
    let exponent = 2 * kappa_sq + 7;
    let power = (n as u128)
        .checked_pow(exponent)
        .ok_or_else(|| Error::Overflow(format!("n^{exponent} exceeds 128 bits for n = {n}")))?;
    let k_n = ceil_to_u64(power as f64 * log_n, "K_n")?;
    let l_n = ceil_to_u64(
        log_n.powi(6 * layers as i32 + 2) * (k_n as f64).powf(1.5),
        "L_n",
    )?;
    let t_n = ceil_to_u64(constants.c5 * log_n * l_n as f64, "t_n")?;
    Ok(HyperParams {
        n,
        kappa,
        layers,
        tau: 1.0 / (1.0 + kappa_sq as f64),
        k_n,
        l_n,
        lambda_n: step_size_for(l_n),
        t_n,
        c2: constants.c2,
        c3: constants.c3,
        c4: constants.c4,
        c5: constants.c5,
        mode: Mode::Theory,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub n: usize,
}

/// `n` labelled images sharing one size, plus where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    meta: DatasetMeta,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, generator: impl Into<String>, seed: u64) -> Result<Self> {
        if let Some(first) = samples.first() {
            let (d1, d2) = (first.image.d1(), first.image.d2());
            for (idx, s) in samples.iter().enumerate() {
                if s.image.d1() != d1 || s.image.d2() != d2 {
                    return Err(Error::Dimension(format!(
                        "sample {idx} is {}x{}, expected {d1}x{d2}",
                        s.image.d1(),
                        s.image.d2()
                    )));
                }
                if s.label > 1 {
                    return Err(Error::Domain(format!("sample {idx} has label {}", s.label)));
                }
            }
        }
        let n = samples.len();
        Ok(Self {
            samples,
            meta: DatasetMeta {
                generator: generator.into(),
                seed,
                n,
            },
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.image.d1(), s.image.d2()))
    }

    pub fn label_mean(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.label as f64).sum::<f64>() / self.samples.len() as f64
    }

    /// Subset with the given sample indices, keeping the provenance.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let samples: Vec<Sample> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let n = samples.len();
        Self {
            samples,
            meta: DatasetMeta {
                n,
                ..self.meta.clone()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(subnetworks: usize) -> Topology {
        Topology::theorem1(4, 4, 1, 2, subnetworks)
    }

    #[test]
    fn parameter_count_examples() {
        assert_eq!(parameter_count(&small(1)), 8);
        assert_eq!(parameter_count(&small(3)), 3 + 3 * 7);
        assert_eq!(parameter_count(&Topology::theorem1(4, 4, 2, 2, 1)), 50);
    }

    #[test]
    fn theorem_topology_is_valid() {
        let t = Topology {
            layers: 3,
            windows: vec![2, 1, 1, 2],
            channels: vec![1, 8, 8, 1],
            subnetworks: 5,
            d1: 4,
            d2: 4,
            kappa: 2,
        };
        assert!(t.validate().is_empty());
        assert!(t.validate_theorem1().is_empty());
        assert_eq!(t, Topology::theorem1(4, 4, 2, 3, 5));
    }

    #[test]
    fn window_count_mismatch_is_reported() {
        let mut t = small(1);
        t.windows = vec![1, 1];
        let errors = t.validate();
        assert_eq!(errors.len(), 1);
        assert!(errors[0].to_string().contains("M must have L+1 entries"));
    }

    #[test]
    fn kappa_exceeding_image_is_reported() {
        let t = Topology {
            layers: 2,
            windows: vec![1, 1, 1],
            channels: vec![1, 18, 1],
            subnetworks: 1,
            d1: 2,
            d2: 5,
            kappa: 3,
        };
        let errors = t.validate();
        assert!(errors.iter().any(|e| e.to_string().contains("κ exceeds min(d1,d2)")));
    }

    #[test]
    fn each_violation_is_listed() {
        let t = Topology {
            layers: 1,
            windows: vec![1, 1, 1],
            channels: vec![2, 1],
            subnetworks: 0,
            d1: 4,
            d2: 4,
            kappa: 1,
        };
        let errors = t.validate();
        assert!(errors.contains(&TopologyError::TooFewLayers(1)));
        assert!(errors.contains(&TopologyError::NoSubnetworks));
        assert!(errors.contains(&TopologyError::EndChannels));
        assert!(errors.contains(&TopologyError::WindowCount { layers: 1, got: 3 }));
    }

    #[test]
    fn theorem_layout_violations() {
        let mut t = small(2);
        t.windows[1] = 2;
        t.channels[1] = 3;
        let errors = t.validate_theorem1();
        assert!(errors.contains(&TopologyError::InnerWindows));
        assert!(errors.contains(&TopologyError::HiddenChannels));
        assert!(t.validate().is_empty());
    }

    #[test]
    fn layout_indices_are_a_bijection() {
        let t = Topology::theorem1(5, 4, 2, 3, 3);
        let layout = Layout::new(&t);
        let mut seen = vec![false; layout.len()];
        let mut mark = |i: usize| {
            assert!(!seen[i], "index {i} visited twice");
            seen[i] = true;
        };
        for k in 0..t.subnetworks {
            mark(layout.outer(k));
        }
        for r in 1..=t.layers {
            let m = t.window(r);
            for k in 0..t.subnetworks {
                for s2 in 0..t.channels[r] {
                    for s1 in 0..t.channels[r - 1] {
                        for t1 in 0..m {
                            for t2 in 0..m {
                                mark(layout.filter(&t, r, k, s2, s1, t1, t2));
                            }
                        }
                    }
                }
            }
        }
        for r in 1..=t.layers {
            for k in 0..t.subnetworks {
                for s2 in 0..t.channels[r] {
                    mark(layout.bias(&t, r, k, s2));
                }
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn canonical_order_is_ascending_in_keys() {
        let t = Topology::theorem1(4, 4, 2, 2, 2);
        let layout = Layout::new(&t);
        // (r, k, s2, s1, t1, t2) lexicographic order must give increasing indices
        let mut last = None;
        for r in 1..=t.layers {
            let m = t.window(r);
            for k in 0..t.subnetworks {
                for s2 in 0..t.channels[r] {
                    for s1 in 0..t.channels[r - 1] {
                        for t1 in 0..m {
                            for t2 in 0..m {
                                let idx = layout.filter(&t, r, k, s2, s1, t1, t2);
                                if let Some(prev) = last {
                                    assert_eq!(idx, prev + 1);
                                }
                                last = Some(idx);
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(layout.filter(&t, 1, 0, 0, 0, 0, 0), t.subnetworks);
        assert_eq!(layout.layer_of(0), None);
        assert_eq!(layout.layer_of(t.subnetworks), Some(1));
        assert_eq!(layout.layer_of(layout.len() - 1), Some(2));
    }

    #[test]
    fn tau_and_channels_for_kappa_two() {
        let hp = derive_theorem1_hyperparams(3, 2, 3, Constants::default());
        // K_n overflows for kappa = 2 (3^15 * ln 3 fits, L_n does not)
        match hp {
            Ok(hp) => assert_eq!(hp.tau, 0.2),
            Err(Error::Overflow(_)) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
        let t = Topology::theorem1(4, 4, 2, 3, 1);
        assert_eq!(t.channels[1], 8);
        assert_eq!(t.channels[2], 8);
    }

    #[test]
    fn smallest_theorem_schedule() {
        let c = Constants {
            c2: 1.0,
            c3: 1.0,
            c4: 1.0,
            c5: 0.5,
        };
        let hp = derive_theorem1_hyperparams(3, 1, 2, c).unwrap();
        assert_eq!(hp.k_n, 21624);
        assert_eq!(hp.tau, 0.5);
        assert!((hp.lambda_n * hp.l_n as f64 - 1.0).abs() <= f64::EPSILON);
        let log3 = 3f64.ln();
        let expected_l = (log3.powi(14) * 21624f64.powf(1.5)).ceil() as u64;
        assert_eq!(hp.l_n, expected_l);
        assert_eq!(hp.t_n, (0.5 * log3 * expected_l as f64).ceil() as u64);
        assert_eq!(hp.mode, Mode::Theory);
    }

    #[test]
    fn theorem_schedule_overflows_for_realistic_n() {
        let err = derive_theorem1_hyperparams(500, 1, 2, Constants::default()).unwrap_err();
        assert!(matches!(err, Error::Overflow(_)));
    }

    #[test]
    fn constant_constraint_is_enforced() {
        let bad = Constants {
            c4: 0.1,
            c5: 4.9,
            ..Constants::default()
        };
        assert!(matches!(
            derive_theorem1_hyperparams(3, 1, 2, bad),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            HyperParams::desk(10, 1, 2, 0.5, 4, 10, 10, bad),
            Err(Error::Domain(_))
        ));
        assert!(Constants::default().check().is_ok());
    }

    proptest::proptest! {
        #[test]
        fn step_size_times_l_is_one(l in 1u64..u64::MAX / 2) {
            proptest::prop_assert!((step_size_for(l) * l as f64 - 1.0).abs() <= f64::EPSILON);
        }
    }

    #[test]
    fn image_invariants() {
        assert!(Image::new(1, 4, vec![0.0; 4]).is_err());
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Image::new(2, 2, vec![0.0, 0.5, 1.0, 1.01]).is_err());
        let img = Image::new(2, 3, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!(img.get(1, 2), 0.5);
        assert_eq!(img.patch(0, 1, 2), vec![0.1, 0.2, 0.4, 0.5]);
    }

    #[test]
    fn dataset_rejects_mixed_sizes() {
        let a = Image::constant(2, 2, 0.0).unwrap();
        let b = Image::constant(3, 2, 0.0).unwrap();
        let samples = vec![
            Sample { image: a.clone(), label: 0 },
            Sample { image: b, label: 1 },
        ];
        assert!(Dataset::new(samples, "test", 0).is_err());
        let bad_label = vec![Sample { image: a, label: 2 }];
        assert!(Dataset::new(bad_label, "test", 0).is_err());
    }
}
