//! Four-group synthetic cosine data.
//!
//! Each subject's mean is `β₁ cos(π w₁ t) + β₂ cos(π w₂ t)` with a low
//! frequency `w₁ ∈ {1,2,3}` and a high frequency `w₂ ∈ {7,8,9}` drawn once
//! per subject. The groups differ in which of the two coefficients is strong:
//!
//! | group | name | (β₁, β₂)   |
//! |-------|------|------------|
//! | 1     | SLSH | (1, 1)     |
//! | 2     | SLWH | (1, 0.1)   |
//! | 3     | WLSH | (0.1, 1)   |
//! | 4     | WLWH | (0.1, 0.1) |

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::rng::substream;

/// Coefficients `(low, high)` of the four groups.
pub const GROUP_COEFFICIENTS: [(f64, f64); 4] = [(1.0, 1.0), (1.0, 0.1), (0.1, 1.0), (0.1, 0.1)];
pub const GROUP_NAMES: [&str; 4] = ["SLSH", "SLWH", "WLSH", "WLWH"];
pub const LOW_FREQUENCIES: [u32; 3] = [1, 2, 3];
pub const HIGH_FREQUENCIES: [u32; 3] = [7, 8, 9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_per_group: usize,
    /// Observations per subject, at times `1/T, 2/T, ..., 1`.
    pub t: usize,
    /// Variance of the observation noise.
    pub noise_var: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_group: 10,
            t: 40,
            noise_var: 0.1,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_group == 0 {
            return Err(Error::validation("n_per_group must be at least 1"));
        }
        if self.t < 2 {
            return Err(Error::validation("T must be at least 2"));
        }
        if !(self.noise_var >= 0.0) || !self.noise_var.is_finite() {
            return Err(Error::validation("noise variance must be a nonnegative number"));
        }
        Ok(())
    }
}

/// Noise-free mean of a subject at time `t`.
pub fn group_mean(group: usize, w_low: u32, w_high: u32, t: f64) -> f64 {
    let (b1, b2) = GROUP_COEFFICIENTS[group];
    let pi = std::f64::consts::PI;
    b1 * (pi * w_low as f64 * t).cos() + b2 * (pi * w_high as f64 * t).cos()
}

/// Per-subject generating values, kept for diagnostics and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectTruth {
    /// 1-based group label.
    pub group: usize,
    pub w_low: u32,
    pub w_high: u32,
}

/// Generates the dataset and the 1-based group labels (subjects are ordered
/// group by group).
pub fn generate_example1(cfg: &SynthConfig) -> Result<(LongitudinalDataset, Vec<usize>)> {
    let (ds, truth) = generate_example1_with_truth(cfg)?;
    Ok((ds, truth.iter().map(|t| t.group).collect()))
}

pub fn generate_example1_with_truth(cfg: &SynthConfig) -> Result<(LongitudinalDataset, Vec<SubjectTruth>)> {
    cfg.validate()?;
    let noise = Normal::new(0.0, cfg.noise_var.sqrt()).map_err(|e| Error::validation(e.to_string()))?;
    let times: Vec<f64> = (1..=cfg.t).map(|j| j as f64 / cfg.t as f64).collect();
    let n = 4 * cfg.n_per_group;
    let width = n.to_string().len().max(3);
    let mut subjects = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for g in 0..4 {
        for k in 0..cfg.n_per_group {
            let idx = g * cfg.n_per_group + k;
            let mut rng = substream(cfg.seed, "synth-example1", &[idx as u64]);
            let w_low = LOW_FREQUENCIES[rng.random_range(0..3)];
            let w_high = HIGH_FREQUENCIES[rng.random_range(0..3)];
            let y = times
                .iter()
                .map(|&t| group_mean(g, w_low, w_high, t) + noise.sample(&mut rng))
                .collect();
            subjects.push(SubjectRecord::new(format!("s{:0width$}", idx + 1), times.clone(), y));
            truth.push(SubjectTruth {
                group: g + 1,
                w_low,
                w_high,
            });
        }
    }
    Ok((LongitudinalDataset::new(subjects, vec![])?, truth))
}
