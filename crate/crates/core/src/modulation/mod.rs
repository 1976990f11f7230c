//! Pair weighting: auto-focus self weights, the probabilistic-margin coupled
//! weight, batch powers and the pseudo loss.
//!
//! A triplet `i` contributes `wᵢ⁺ = w_s⁺(θᵢ⁺)·w_c(θᵢʳ)` to the positive pair
//! and `wᵢ⁻ = w_s⁻(θᵢ⁻)·w_c(θᵢʳ)` to the negative pair. With power adjustment
//! the modulated gradient is
//!
//! ```text
//! ∂L/∂Ω = α/E[P⁺] · Σ wᵢ⁺ ∂θᵢ⁺/∂Ω  −  1/E[P⁻] · Σ wᵢ⁻ ∂θᵢ⁻/∂Ω
//! ```
//!
//! and the pseudo loss is the same expression with `θ` in place of `∂θ/∂Ω`,
//! all weights held constant.

mod normal;

pub use normal::{std_normal_cdf, std_normal_icdf, std_normal_pdf};

use std::f64::consts::FRAC_PI_6;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{self, angle, angle_grad, Metric, UnitDescriptor};
use crate::mining::{TripletBatch, DEFAULT_TAU};
use crate::stats::StatState;

/// Which self weight multiplies each pair's gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SelfWeightMode {
    /// Gaussian centred on the tracked mean angle.
    #[serde(rename = "af")]
    AutoFocus,
    /// Constant 1: plain angular distance.
    #[serde(rename = "theta")]
    Theta,
    /// `√(1 − s²)`, the implicit weight of the inner-product metric.
    #[serde(rename = "s")]
    Similarity,
    /// `√(4 − l²)/2`, the implicit weight of the chordal L2 metric.
    #[serde(rename = "l2")]
    L2,
}

impl SelfWeightMode {
    pub const ALL: [SelfWeightMode; 4] = [
        SelfWeightMode::AutoFocus,
        SelfWeightMode::Theta,
        SelfWeightMode::Similarity,
        SelfWeightMode::L2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SelfWeightMode::AutoFocus => "af",
            SelfWeightMode::Theta => "theta",
            SelfWeightMode::Similarity => "s",
            SelfWeightMode::L2 => "l2",
        }
    }
}

impl fmt::Display for SelfWeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelfWeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown self-weight mode `{s}` (expected af|theta|s|l2)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModulationConfig {
    /// Probabilistic hard margin: the fraction of easiest triplets cut off.
    pub m: f64,
    /// Attenuation on the normalized positive power.
    pub alpha: f64,
    /// Anti-noise mining threshold in radians.
    pub tau: f64,
    pub self_weight: SelfWeightMode,
    /// Divide by the power expectations and attenuate the positive side.
    pub power_adjust: bool,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self {
            m: 0.6,
            alpha: 0.9,
            tau: DEFAULT_TAU,
            self_weight: SelfWeightMode::AutoFocus,
            power_adjust: true,
        }
    }
}

impl ModulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.m) {
            return Err(Error::Config(format!("m must be in [0, 1), got {}", self.m)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau < std::f64::consts::PI) {
            return Err(Error::Config(format!("tau must be in (0, pi), got {}", self.tau)));
        }
        Ok(())
    }

    /// Standardized cut point `Φ⁻¹(m)`; `−∞` when there is no margin.
    pub fn margin_cut(&self) -> Result<f64> {
        if self.m == 0.0 {
            Ok(f64::NEG_INFINITY)
        } else {
            std_normal_icdf(self.m)
        }
    }
}

fn gaussian_focus(theta: f64, e: f64, std: f64) -> f64 {
    let radius = FRAC_PI_6 + std;
    (-(theta - e).powi(2) / (2.0 * radius * radius)).exp()
}

/// Auto-focus weight for a matching pair.
pub fn self_weight_pos(theta: f64, e: f64, std: f64) -> f64 {
    gaussian_focus(theta, e, std)
}

/// Auto-focus weight for a non-matching pair.
pub fn self_weight_neg(theta: f64, e: f64, std: f64) -> f64 {
    gaussian_focus(theta, e, std)
}

/// Coupled weight with a precomputed cut `Φ⁻¹(m)`.
pub fn coupled_weight_with_cut(theta_rel: f64, e: f64, std: f64, cut: f64) -> f64 {
    let z = (theta_rel - e) / std.max(f64::MIN_POSITIVE);
    if z > cut {
        std_normal_cdf(z)
    } else {
        0.0
    }
}

/// `Φ(z)` above the standardized cut `Φ⁻¹(m)`, zero at or below it.
pub fn coupled_weight(theta_rel: f64, e: f64, std: f64, m: f64) -> Result<f64> {
    let cut = ModulationConfig { m, ..Default::default() }.margin_cut()?;
    Ok(coupled_weight_with_cut(theta_rel, e, std, cut))
}

fn metric_self_weight(mode: SelfWeightMode, theta: f64, e: f64, std: f64) -> f64 {
    match mode {
        SelfWeightMode::AutoFocus => gaussian_focus(theta, e, std),
        SelfWeightMode::Theta => 1.0,
        SelfWeightMode::Similarity => {
            geometry::grad_magnitude(Metric::Similarity, 1.0, theta.cos().clamp(-1.0, 1.0))
                .expect("cosine in range")
        }
        SelfWeightMode::L2 => {
            geometry::grad_magnitude(Metric::L2, 1.0, (2.0 * (theta / 2.0).sin()).clamp(0.0, 2.0))
                .expect("chord in range")
        }
    }
}

/// Per-triplet weights and the batch powers.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBatch {
    pub w_self_pos: Vec<f64>,
    pub w_self_neg: Vec<f64>,
    pub w_coupled: Vec<f64>,
    pub w_pos: Vec<f64>,
    pub w_neg: Vec<f64>,
    pub p_pos: f64,
    pub p_neg: f64,
}

pub fn compute_weights(
    batch: &TripletBatch,
    stats: &StatState,
    cfg: &ModulationConfig,
    warming: bool,
) -> Result<WeightBatch> {
    if !stats.initialized {
        return Err(Error::UninitializedStats);
    }
    let n = batch.len();
    let cut = cfg.margin_cut()?;
    let mut w = WeightBatch {
        w_self_pos: vec![0.0; n],
        w_self_neg: vec![0.0; n],
        w_coupled: vec![0.0; n],
        w_pos: vec![0.0; n],
        w_neg: vec![0.0; n],
        p_pos: 0.0,
        p_neg: 0.0,
    };
    for i in batch.valid_indices() {
        let (sp, sn, c) = if warming {
            (1.0, 1.0, 1.0)
        } else {
            (
                metric_self_weight(cfg.self_weight, batch.theta_pos[i], stats.e_theta_pos, stats.std_theta_pos),
                metric_self_weight(cfg.self_weight, batch.theta_neg[i], stats.e_theta_neg, stats.std_theta_neg),
                coupled_weight_with_cut(batch.theta_rel[i], stats.e_theta_rel, stats.std_theta_rel, cut),
            )
        };
        w.w_self_pos[i] = sp;
        w.w_self_neg[i] = sn;
        w.w_coupled[i] = c;
        w.w_pos[i] = sp * c;
        w.w_neg[i] = sn * c;
    }
    w.p_pos = w.w_pos.iter().sum();
    w.p_neg = w.w_neg.iter().sum();
    Ok(w)
}

/// Scalars multiplying the positive and negative weighted sums.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossScales {
    pub pos: f64,
    pub neg: f64,
}

impl LossScales {
    /// `α/E[P⁺]` and `1/E[P⁻]` with power adjustment; otherwise the batch mean
    /// `1/N_valid` on both sides.
    pub fn new(stats: &StatState, cfg: &ModulationConfig, num_valid: usize) -> Result<Self> {
        if cfg.power_adjust {
            Self::power_adjusted(stats, cfg.alpha)
        } else {
            let inv = 1.0 / num_valid.max(1) as f64;
            Ok(Self { pos: inv, neg: inv })
        }
    }

    pub fn power_adjusted(stats: &StatState, alpha: f64) -> Result<Self> {
        for e in [stats.e_power_pos, stats.e_power_neg] {
            if !(e > 0.0) {
                return Err(Error::Domain {
                    value: e,
                    domain: "power expectation > 0",
                });
            }
        }
        Ok(Self {
            pos: alpha / stats.e_power_pos,
            neg: 1.0 / stats.e_power_neg,
        })
    }
}

/// Pseudo loss from the angles stored in `batch`.
pub fn pseudo_loss_scaled(batch: &TripletBatch, weights: &WeightBatch, scales: LossScales) -> f64 {
    let (mut pos, mut neg) = (0.0, 0.0);
    for i in batch.valid_indices() {
        pos += weights.w_pos[i] * batch.theta_pos[i];
        neg += weights.w_neg[i] * batch.theta_neg[i];
    }
    scales.pos * pos - scales.neg * neg
}

/// `α/E[P⁺]·Σ wᵢ⁺θᵢ⁺ − 1/E[P⁻]·Σ wᵢ⁻θᵢ⁻` over valid triplets.
pub fn pseudo_loss(batch: &TripletBatch, weights: &WeightBatch, stats: &StatState, alpha: f64) -> Result<f64> {
    Ok(pseudo_loss_scaled(batch, weights, LossScales::power_adjusted(stats, alpha)?))
}

/// Pseudo loss with angles recomputed from descriptors along the triplet
/// structure of `batch` (positive pair `(aᵢ, pᵢ)`, negative pair from
/// `neg_source`). Weights and scales are treated as constants.
pub fn pseudo_loss_at(
    anchors: &[UnitDescriptor],
    positives: &[UnitDescriptor],
    batch: &TripletBatch,
    weights: &WeightBatch,
    scales: LossScales,
) -> Result<f64> {
    check_triplet_shapes(anchors, positives, batch)?;
    let (mut pos, mut neg) = (0.0, 0.0);
    for i in batch.valid_indices() {
        let (a, p) = batch.neg_source[i].expect("valid triplet has a source").pair(i);
        pos += weights.w_pos[i] * angle(&anchors[i], &positives[i]);
        neg += weights.w_neg[i] * angle(&anchors[a], &positives[p]);
    }
    Ok(scales.pos * pos - scales.neg * neg)
}

/// One gradient vector per descriptor.
pub type RowGrads = Vec<Vec<f64>>;

/// Gradients with respect to raw anchors and positives, assembled pair by
/// pair from the closed-form angle gradient.
pub fn modulated_gradient(
    anchors: &[UnitDescriptor],
    positives: &[UnitDescriptor],
    batch: &TripletBatch,
    weights: &WeightBatch,
    scales: LossScales,
) -> Result<(RowGrads, RowGrads)> {
    check_triplet_shapes(anchors, positives, batch)?;
    let dim = anchors.first().map_or(0, UnitDescriptor::dim);
    let mut ga = vec![vec![0.0; dim]; anchors.len()];
    let mut gp = vec![vec![0.0; dim]; positives.len()];
    let mut accumulate = |a: usize, p: usize, coeff: f64| -> Result<()> {
        if coeff == 0.0 {
            return Ok(());
        }
        let da = angle_grad(&anchors[a], &positives[p])?;
        let dp = angle_grad(&positives[p], &anchors[a])?;
        for k in 0..dim {
            ga[a][k] += coeff * da[k];
            gp[p][k] += coeff * dp[k];
        }
        Ok(())
    };
    for i in batch.valid_indices() {
        accumulate(i, i, scales.pos * weights.w_pos[i])?;
        let (a, p) = batch.neg_source[i].expect("valid triplet has a source").pair(i);
        accumulate(a, p, -scales.neg * weights.w_neg[i])?;
    }
    Ok((ga, gp))
}

fn check_triplet_shapes(anchors: &[UnitDescriptor], positives: &[UnitDescriptor], batch: &TripletBatch) -> Result<()> {
    if anchors.len() != batch.len() || positives.len() != batch.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} anchors, {} positives, {} triplets",
            anchors.len(),
            positives.len(),
            batch.len()
        )));
    }
    Ok(())
}
