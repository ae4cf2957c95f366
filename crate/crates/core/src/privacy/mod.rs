//! Differential privacy: Laplace label perturbation, clipped Gaussian noise
//! on client gradients, and an RDP accountant for the subsampled Gaussian.

mod accountant;
mod mechanisms;

pub use accountant::{account, calibrate_sigma, FeatureAccountant, RdpAccountant};
pub use mechanisms::{clip_and_noise, clip_rows, label_epsilon, laplace, noisy_clipped_sum, perturb_labels};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Privacy settings of a run. Label DP is on when `label_lambda > 0`;
/// feature DP is on when `sigma > 0` or `target_epsilon` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpConfig {
    /// Per-coordinate standard deviation of the Laplace label noise.
    pub label_lambda: f64,
    /// Clipping threshold `C`.
    pub clip: f64,
    /// Noise multiplier `σ`.
    pub sigma: f64,
    /// Calibrates `σ` to this ε for the planned number of steps.
    pub target_epsilon: Option<f64>,
    pub delta: f64,
    /// Sampling ratio for the ADMM local DP-SGD steps; SGD uses `B/N`.
    pub subsample_r: Option<f64>,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            label_lambda: 0.0,
            clip: 1.0,
            sigma: 0.0,
            target_epsilon: None,
            delta: 1e-5,
            subsample_r: None,
        }
    }
}

impl DpConfig {
    pub fn label_dp(&self) -> bool {
        self.label_lambda > 0.0
    }

    pub fn feature_dp(&self) -> bool {
        self.sigma > 0.0 || self.target_epsilon.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.label_lambda, self.clip, self.sigma, self.delta]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("dp settings must be finite".into()));
        }
        if self.label_lambda < 0.0 {
            return Err(Error::Config("dp.label_lambda must be >= 0".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::Config("dp.sigma must be >= 0".into()));
        }
        if self.feature_dp() {
            if self.clip <= 0.0 {
                return Err(Error::Config("dp.clip must be > 0".into()));
            }
            if !(self.delta > 0.0 && self.delta < 1.0) {
                return Err(Error::Config("dp.delta must lie in (0, 1)".into()));
            }
        }
        if let Some(e) = self.target_epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::Config("dp.target_epsilon must be > 0".into()));
            }
        }
        if let Some(r) = self.subsample_r {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config("dp.subsample_r must lie in (0, 1]".into()));
            }
        }
        Ok(())
    }
}
