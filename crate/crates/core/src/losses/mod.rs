//! Training objectives. Every loss returns its value together with the
//! analytic gradient with respect to the prediction.
//!
//! Losses work in `f64`; network activations are widened before evaluation
//! and gradients narrowed again by the trainer.

mod bce;
mod gan;
mod histogram;
mod mse;
mod ssim;

use serde::{Deserialize, Serialize};

pub use bce::masked_bce;
pub use gan::{bce_prob, gan_losses, GanLosses};
pub use histogram::{emd_loss, hist_loss, luminance, mi_loss, soft_histogram, soft_histogram_backward};
pub use mse::mse_loss;
pub use ssim::{ssim, ssim_loss, SsimResult};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Side of the SSIM Gaussian window.
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    /// Value range of the images compared by SSIM (2 for tanh outputs).
    pub dynamic_range: f64,
    pub histogram_bins: usize,
    /// Target for real samples when training the discriminator.
    pub label_smoothing: f64,
    pub disc_weight: f64,
    pub hist_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            ssim_window: 11,
            ssim_sigma: 1.5,
            dynamic_range: 2.0,
            histogram_bins: 256,
            label_smoothing: 0.9,
            disc_weight: 0.5,
            hist_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ssim_window.is_multiple_of(2) {
            return Err(Error::Config(format!("loss.ssim_window must be odd, got {}", self.ssim_window)));
        }
        if self.histogram_bins < 2 {
            return Err(Error::Config("loss.histogram_bins must be >= 2".into()));
        }
        if !(self.label_smoothing > 0.0 && self.label_smoothing <= 1.0) {
            return Err(Error::Config("loss.label_smoothing must be in (0, 1]".into()));
        }
        if !(self.ssim_sigma > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::Config("loss.ssim_sigma and loss.dynamic_range must be positive".into()));
        }
        Ok(())
    }
}
