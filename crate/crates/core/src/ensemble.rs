//! Generalized product-of-experts combination of per-layer predictions.
//!
//! With normalized weights `β_k`, the combined Gaussian has precision
//! `Σ β_k σ_k⁻²` and mean `σ² Σ β_k σ_k⁻² μ_k`. In y-space the member
//! variances are observation variances; in f-space they are latent
//! variances and the average noise variance is added afterwards.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::vecchia::GaussianPrediction;

/// Lower clamp applied to raw weights before normalization, and to member
/// variances before inversion.
pub const WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    Uniform,
    PosteriorVariance,
    DifferentialEntropy,
    Wasserstein,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 4] = [
        WeightScheme::Uniform,
        WeightScheme::PosteriorVariance,
        WeightScheme::DifferentialEntropy,
        WeightScheme::Wasserstein,
    ];

    fn name(self) -> &'static str {
        match self {
            WeightScheme::Uniform => "uniform",
            WeightScheme::PosteriorVariance => "posterior-variance",
            WeightScheme::DifferentialEntropy => "differential-entropy",
            WeightScheme::Wasserstein => "wasserstein",
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| format!("unknown weighting scheme '{s}' (expected uniform, posterior-variance, differential-entropy or wasserstein)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombineSpace {
    /// Combine latent moments, then add the mean noise variance.
    FSpace,
    /// Combine observation moments directly.
    YSpace,
}

impl fmt::Display for CombineSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CombineSpace::FSpace => "f",
            CombineSpace::YSpace => "y",
        })
    }
}

impl FromStr for CombineSpace {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f" | "f-space" => Ok(CombineSpace::FSpace),
            "y" | "y-space" => Ok(CombineSpace::YSpace),
            _ => Err(format!("unknown combining space '{s}' (expected f or y)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub scheme: WeightScheme,
    pub space: CombineSpace,
    pub use_softmax: bool,
    /// Only read when `use_softmax` is set.
    pub temperature: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            scheme: WeightScheme::PosteriorVariance,
            space: CombineSpace::YSpace,
            use_softmax: false,
            temperature: 1.0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.use_softmax && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }
}

/// One expert's moments in the combining space, with its prior variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Member {
    pub mean: f64,
    pub var: f64,
    pub prior_var: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub values: Vec<f64>,
    /// Set when every raw weight was zero and uniform weights were used.
    pub fell_back_to_uniform: bool,
}

fn raw_weight(m: &Member, scheme: WeightScheme) -> f64 {
    let var = m.var.max(WEIGHT_FLOOR);
    match scheme {
        WeightScheme::Uniform => 1.0,
        WeightScheme::PosteriorVariance => 1.0 / var,
        WeightScheme::DifferentialEntropy => 0.5 * (m.prior_var.ln() - var.ln()),
        WeightScheme::Wasserstein => {
            let dv = m.prior_var - var;
            m.mean * m.mean + dv * dv
        }
    }
}

/// Uncertainty score for the softmax variant; lower means more confident.
fn softmax_score(m: &Member, scheme: WeightScheme) -> f64 {
    match scheme {
        WeightScheme::Uniform => 0.0,
        WeightScheme::PosteriorVariance => m.var,
        WeightScheme::DifferentialEntropy | WeightScheme::Wasserstein => -raw_weight(m, scheme),
    }
}

fn uniform(n: usize, fell_back_to_uniform: bool) -> Weights {
    Weights {
        values: vec![1.0 / n as f64; n],
        fell_back_to_uniform,
    }
}

/// Normalized per-member weights.
pub fn weights(members: &[Member], cfg: &EnsembleConfig) -> Weights {
    let n = members.len();
    if n == 0 {
        return Weights {
            values: Vec::new(),
            fell_back_to_uniform: false,
        };
    }
    let raw: Vec<f64> = if cfg.use_softmax {
        let scores: Vec<f64> = members.iter().map(|m| -cfg.temperature * softmax_score(m, cfg.scheme)).collect();
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return uniform(n, true);
        }
        scores.iter().map(|s| (s - top).exp()).collect()
    } else {
        members.iter().map(|m| raw_weight(m, cfg.scheme)).collect()
    };
    if !raw.iter().any(|w| *w > 0.0) {
        log::warn!("all raw ensemble weights vanished; using uniform weights");
        return uniform(n, true);
    }
    let clamped: Vec<f64> = raw
        .iter()
        .map(|&w| if w.is_nan() { WEIGHT_FLOOR } else { w.clamp(WEIGHT_FLOOR, f64::MAX) })
        .collect();
    let total: f64 = clamped.iter().sum();
    Weights {
        values: clamped.iter().map(|w| w / total).collect(),
        fell_back_to_uniform: false,
    }
}

/// Output of [`combine`].
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedPrediction {
    pub mean: f64,
    pub variance: f64,
    pub weights: Vec<f64>,
    /// Per-layer predictions that went into the combination.
    pub members: Vec<GaussianPrediction>,
    /// Average of the members' noise variances.
    pub mean_noise_var: f64,
    pub weight_fallback: bool,
}

impl CombinedPrediction {
    /// Rescales mean and variances by `sd`, shifting the mean by `shift`.
    pub fn rescaled(&self, shift: f64, sd: f64) -> Self {
        let s2 = sd * sd;
        Self {
            mean: self.mean * sd + shift,
            variance: self.variance * s2,
            weights: self.weights.clone(),
            members: self
                .members
                .iter()
                .map(|m| GaussianPrediction {
                    mean: m.mean * sd + shift,
                    var_latent: m.var_latent * s2,
                    var_observation: m.var_observation * s2,
                })
                .collect(),
            mean_noise_var: self.mean_noise_var * s2,
            weight_fallback: self.weight_fallback,
        }
    }
}

/// Precision-weighted combination `(mean, variance)` of `(mean, var)`
/// pairs under normalized `weights`.
pub fn poe_moments(means: &[f64], vars: &[f64], weights: &[f64]) -> (f64, f64) {
    let mut precision = 0.0;
    let mut weighted = 0.0;
    for ((&mu, &v), &b) in means.iter().zip(vars).zip(weights) {
        let p = b / v.max(WEIGHT_FLOOR);
        precision += p;
        weighted += p * mu;
    }
    let variance = 1.0 / precision;
    (variance * weighted, variance)
}

/// Members as seen in the given space: prior variance is `σ_k²` in f-space
/// and `σ_k² + τ_k²` in y-space.
pub fn members_in_space(preds: &[GaussianPrediction], output_vars: &[f64], noise_vars: &[f64], space: CombineSpace) -> Vec<Member> {
    preds
        .iter()
        .zip(output_vars)
        .zip(noise_vars)
        .map(|((p, &s2), &t2)| match space {
            CombineSpace::FSpace => Member {
                mean: p.mean,
                var: p.var_latent,
                prior_var: s2,
            },
            CombineSpace::YSpace => Member {
                mean: p.mean,
                var: p.var_observation,
                prior_var: s2 + t2,
            },
        })
        .collect()
}

/// Combines member predictions with already-normalized weights.
pub fn combine(preds: &[GaussianPrediction], weights: &Weights, space: CombineSpace, noise_vars: &[f64]) -> CombinedPrediction {
    let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let vars: Vec<f64> = preds
        .iter()
        .map(|p| match space {
            CombineSpace::FSpace => p.var_latent,
            CombineSpace::YSpace => p.var_observation,
        })
        .collect();
    let mean_noise_var = if noise_vars.is_empty() {
        0.0
    } else {
        noise_vars.iter().sum::<f64>() / noise_vars.len() as f64
    };
    let (mean, mut variance) = poe_moments(&means, &vars, &weights.values);
    if space == CombineSpace::FSpace {
        variance += mean_noise_var;
    }
    CombinedPrediction {
        mean,
        variance,
        weights: weights.values.clone(),
        members: preds.to_vec(),
        mean_noise_var,
        weight_fallback: weights.fell_back_to_uniform,
    }
}

/// Weights and combination in one call.
pub fn combine_with_config(
    preds: &[GaussianPrediction],
    output_vars: &[f64],
    noise_vars: &[f64],
    cfg: &EnsembleConfig,
) -> CombinedPrediction {
    let members = members_in_space(preds, output_vars, noise_vars, cfg.space);
    let w = weights(&members, cfg);
    combine(preds, &w, cfg.space, noise_vars)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(mean: f64, var: f64, prior_var: f64) -> Member {
        Member { mean, var, prior_var }
    }

    fn cfg(scheme: WeightScheme) -> EnsembleConfig {
        EnsembleConfig {
            scheme,
            ..Default::default()
        }
    }

    #[test]
    fn uniform_weights() {
        let w = weights(&[m(0.0, 1.0, 1.0); 3], &cfg(WeightScheme::Uniform));
        assert_eq!(w.values, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn posterior_variance_weights() {
        let w = weights(&[m(0.0, 1.0, 2.0), m(0.0, 4.0, 2.0)], &cfg(WeightScheme::PosteriorVariance));
        assert_eq!(w.values, vec![0.8, 0.2]);
    }

    #[test]
    fn differential_entropy_weights() {
        let e = std::f64::consts::E;
        let w = weights(&[m(0.0, e.powi(-2), 1.0), m(0.0, 1.0 / e, 1.0)], &cfg(WeightScheme::DifferentialEntropy));
        assert!((w.values[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.values[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn wasserstein_raw_weight() {
        // μ² + (prior − var)² = 4 + 0.25 vs 0 + 1
        let w = weights(&[m(2.0, 0.5, 1.0), m(0.0, 1.0, 2.0)], &cfg(WeightScheme::Wasserstein));
        assert!((w.values[0] - 4.25 / 5.25).abs() < 1e-15);
    }

    #[test]
    fn vanished_weights_fall_back() {
        // posterior equals prior everywhere: entropy weights are all zero
        let w = weights(&[m(0.0, 1.0, 1.0), m(0.0, 2.0, 2.0)], &cfg(WeightScheme::DifferentialEntropy));
        assert!(w.fell_back_to_uniform);
        assert_eq!(w.values, vec![0.5, 0.5]);
    }

    #[test]
    fn tiny_weights_are_floored() {
        let w = weights(&[m(0.0, 1.0, 1.0), m(0.0, 0.5, 1.0)], &cfg(WeightScheme::DifferentialEntropy));
        assert!(!w.fell_back_to_uniform);
        assert!(w.values[0] > 0.0 && w.values[0] < 1e-10);
    }

    #[test]
    fn softmax_prefers_confident_members() {
        let c = EnsembleConfig {
            scheme: WeightScheme::PosteriorVariance,
            use_softmax: true,
            temperature: 3.0,
            ..Default::default()
        };
        let w = weights(&[m(0.0, 0.1, 1.0), m(0.0, 0.9, 1.0)], &c);
        let want = 1.0 / (1.0 + (-3.0f64 * 0.8).exp());
        assert!((w.values[0] - want).abs() < 1e-15);
        let u = EnsembleConfig {
            scheme: WeightScheme::Uniform,
            ..c
        };
        assert_eq!(weights(&[m(0.0, 0.1, 1.0), m(0.0, 0.9, 1.0)], &u).values, vec![0.5, 0.5]);
    }

    fn gp(mean: f64, var_latent: f64, noise: f64) -> GaussianPrediction {
        GaussianPrediction {
            mean,
            var_latent,
            var_observation: var_latent + noise,
        }
    }

    #[test]
    fn symmetric_pair() {
        let w = Weights {
            values: vec![0.5, 0.5],
            fell_back_to_uniform: false,
        };
        let c = combine(&[gp(0.0, 0.9, 0.1), gp(2.0, 0.9, 0.1)], &w, CombineSpace::YSpace, &[0.1, 0.1]);
        assert!((c.mean - 1.0).abs() < 1e-15);
        assert!((c.variance - 1.0).abs() < 1e-15);
    }

    #[test]
    fn f_space_adds_mean_noise() {
        let w = Weights {
            values: vec![1.0],
            fell_back_to_uniform: false,
        };
        let c = combine(&[gp(0.3, 0.5, 0.2)], &w, CombineSpace::FSpace, &[0.2]);
        assert_eq!(c.mean, 0.3);
        assert!((c.variance - 0.7).abs() < 1e-15);
    }

    #[test]
    fn parses_names() {
        for s in WeightScheme::ALL {
            assert_eq!(s.to_string().parse::<WeightScheme>().unwrap(), s);
        }
        assert_eq!("y".parse::<CombineSpace>().unwrap(), CombineSpace::YSpace);
        assert!("z".parse::<CombineSpace>().is_err());
        assert!(EnsembleConfig {
            use_softmax: true,
            temperature: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
