use super::LossConfig;

const PROB_EPS: f64 = 1e-7;

/// Binary cross-entropy of probability `p` against soft target `t`.
pub fn bce_prob(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

fn bce_prob_grad(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -t / p + (1.0 - t) / (1.0 - p)
}

/// Conditional adversarial losses for one (real, fake) discriminator pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLosses {
    pub g_loss: f64,
    pub d_loss: f64,
    /// d g_loss / d d_fake
    pub g_grad_fake: f64,
    /// d d_loss / d d_real
    pub d_grad_real: f64,
    /// d d_loss / d d_fake
    pub d_grad_fake: f64,
}

/// Generator loss `BCE(d_fake, 1)` and discriminator loss
/// `disc_weight * (BCE(d_real, smoothing) + BCE(d_fake, 0)) / 2`.
pub fn gan_losses(d_real: f64, d_fake: f64, cfg: &LossConfig) -> GanLosses {
    let t_real = cfg.label_smoothing;
    let half = 0.5 * cfg.disc_weight;
    GanLosses {
        g_loss: bce_prob(d_fake, 1.0),
        d_loss: half * (bce_prob(d_real, t_real) + bce_prob(d_fake, 0.0)),
        g_grad_fake: bce_prob_grad(d_fake, 1.0),
        d_grad_real: half * bce_prob_grad(d_real, t_real),
        d_grad_fake: half * bce_prob_grad(d_fake, 0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        let cfg = LossConfig::default();
        let l = gan_losses(0.9, 0.1, &cfg);
        let expected = 0.5 * 0.5 * (bce_prob(0.9, 0.9) + bce_prob(0.1, 0.0));
        assert!((l.d_loss - expected).abs() < 1e-15);
        assert!((bce_prob(0.9, 0.9) - 0.325_082_973).abs() < 1e-8);
        assert!((bce_prob(0.1, 0.0) - 0.105_360_516).abs() < 1e-8);
        assert!((l.d_loss - 0.107_610_872).abs() < 1e-8);
        let half = gan_losses(0.5, 0.5, &cfg);
        assert!((half.g_loss - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
