//! Finite-difference checks of every loss gradient on random 8x8 inputs.
//! Each check returns the worst relative error seen, or a description of
//! the first disagreement.

use ndarray::{Array1, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use railpatch::losses::{emd_loss, gan_losses, hist_loss, masked_bce, mi_loss, mse_loss, ssim_loss, LossConfig};

use super::{away_from_bin_centers, compare_gradients, numeric_gradient, random4};

pub const STEP: f64 = 1e-4;
pub const REL: f64 = 1e-3;
pub const SIDE: usize = 8;

fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Vec<f64> {
    a.iter().copied().collect()
}

/// Cross-entropy over two logit channels. Also requires an exactly zero
/// gradient on every pixel outside `valid`.
pub fn masked_bce_check(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = random4(&mut rng, (2, 2, SIDE, SIDE), -3.0, 3.0);
    let labels = Array3::from_shape_fn((2, SIDE, SIDE), |_| rng.random_bool(0.5));
    let mut valid = Array3::from_shape_fn((2, SIDE, SIDE), |_| rng.random_bool(0.6));
    valid[[0, 0, 0]] = true;
    valid[[1, SIDE - 1, SIDE - 1]] = false;
    let (_, grad) = masked_bce(logits.view(), labels.view(), valid.view());
    for ((b, c, i, j), &g) in grad.indexed_iter() {
        if !valid[[b, i, j]] && g != 0.0 {
            return Err(format!("masked pixel ({b},{c},{i},{j}) has gradient {g:e}"));
        }
    }
    let numeric = numeric_gradient(&logits, STEP, |x| masked_bce(x.view(), labels.view(), valid.view()).0);
    compare_gradients(&flat(&grad), &flat(&numeric), REL)
}

pub fn mse_check(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = random4(&mut rng, (1, 3, SIDE, SIDE), -1.0, 1.0);
    let pred = random4(&mut rng, (1, 3, SIDE, SIDE), -1.0, 1.0);
    let (_, grad) = mse_loss(target.view(), pred.view());
    let numeric = numeric_gradient(&pred, STEP, |p| mse_loss(target.view(), p.view()).0);
    compare_gradients(&flat(&grad), &flat(&numeric), REL)
}

/// SSIM with the default 11-wide window (wider than the image) and with a
/// 3-wide one.
pub fn ssim_check(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = random4(&mut rng, (1, 3, SIDE, SIDE), -1.0, 1.0);
    // Keep the prediction correlated with the target so SSIM is away from 0.
    let noise = random4(&mut rng, (1, 3, SIDE, SIDE), -0.5, 0.5);
    let pred = &target * 0.7 + &noise;
    let mut worst = 0.0f64;
    for window in [11, 3] {
        let cfg = LossConfig { ssim_window: window, ..LossConfig::default() };
        let (_, grad) = ssim_loss(target.view(), pred.view(), &cfg);
        let numeric = numeric_gradient(&pred, STEP, |p| ssim_loss(target.view(), p.view(), &cfg).0);
        worst = worst.max(compare_gradients(&flat(&grad), &flat(&numeric), REL).map_err(|e| format!("window {window}: {e}"))?);
    }
    Ok(worst)
}

/// Derivatives of the generator and discriminator losses with respect to
/// the discriminator outputs, over 64 random probability pairs.
pub fn gan_check(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LossConfig::default();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..SIDE * SIDE {
        let (real, fake) = (rng.random_range(0.02..0.98), rng.random_range(0.02..0.98));
        let l = gan_losses(real, fake, &cfg);
        let d = |f: &dyn Fn(f64) -> f64, x: f64| (f(x + STEP) - f(x - STEP)) / (2.0 * STEP);
        analytic.extend([l.g_grad_fake, l.d_grad_real, l.d_grad_fake]);
        numeric.push(d(&|x| gan_losses(real, x, &cfg).g_loss, fake));
        numeric.push(d(&|x| gan_losses(x, fake, &cfg).d_loss, real));
        numeric.push(d(&|x| gan_losses(real, x, &cfg).d_loss, fake));
    }
    compare_gradients(&analytic, &numeric, REL)
}

fn random_histogram(rng: &mut ChaCha8Rng, bins: usize) -> Array1<f64> {
    let h = Array1::from_shape_fn(bins, |_| rng.random_range(0.05..1.0));
    let s = h.sum();
    h / s
}

/// EMD between two random 64-bin histograms, gradient with respect to the
/// second.
pub fn emd_check(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bins = SIDE * SIDE;
    let h1 = random_histogram(&mut rng, bins);
    let h2 = random_histogram(&mut rng, bins);
    let (_, grad) = emd_loss(h1.view(), h2.view());
    let numeric = numeric_gradient(&h2, STEP * 1e-2, |h| emd_loss(h1.view(), h.view()).0);
    compare_gradients(&flat(&grad), &flat(&numeric), REL)
}

/// Negative mutual information of two 8x8 value sets, plus the combined
/// luminance histogram loss on RGB images. Values stay clear of the bin
/// centers, where the soft histogram is not differentiable.
pub fn mi_check(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bins = 8;
    let margin = 1e-3;
    let x: Vec<f64> = (0..SIDE * SIDE).map(|_| away_from_bin_centers(&mut rng, bins, margin)).collect();
    // Correlate y with x so the joint histogram is not uniform.
    let y: Vec<f64> = x
        .iter()
        .map(|&v| loop {
            let c: f64 = (v + rng.random_range(-0.2..0.2)).clamp(margin, 1.0 - margin);
            let pos = c * (bins - 1) as f64;
            if (pos - pos.round()).abs() / (bins - 1) as f64 >= margin {
                break c;
            }
        })
        .collect();
    let (_, grad) = mi_loss(&x, &y, bins);
    let y_arr = Array1::from(y);
    let numeric = numeric_gradient(&y_arr, STEP, |v| mi_loss(&x, v.as_slice().expect("contiguous"), bins).0);
    let worst = compare_gradients(&grad, &flat(&numeric), REL).map_err(|e| format!("mi: {e}"))?;

    let cfg = LossConfig { histogram_bins: bins, ..LossConfig::default() };
    let target = random4(&mut rng, (1, 3, SIDE, SIDE), -1.0, 1.0);
    // Gray pixels whose luminance sits at a chosen, kink-free value.
    let mut pred = Array4::<f64>::zeros((1, 3, SIDE, SIDE));
    for i in 0..SIDE {
        for j in 0..SIDE {
            let lum = away_from_bin_centers(&mut rng, bins, margin);
            let tint = rng.random_range(-0.05..0.05);
            // Opposite tints on red and green cancel in the luminance.
            pred[[0, 0, i, j]] = 2.0 * lum - 1.0 + tint / 0.299;
            pred[[0, 1, i, j]] = 2.0 * lum - 1.0 - tint / 0.587;
            pred[[0, 2, i, j]] = 2.0 * lum - 1.0;
        }
    }
    let (_, grad) = hist_loss(target.view(), pred.view(), &cfg);
    // The histogram has kinks at bin centers of the unit luminance; probe
    // with a step much smaller than the margin.
    let numeric = numeric_gradient(&pred, STEP * 1e-1, |p| hist_loss(target.view(), p.view(), &cfg).0);
    let hist_worst = compare_gradients(&flat(&grad), &flat(&numeric), REL).map_err(|e| format!("hist: {e}"))?;
    Ok(worst.max(hist_worst))
}

pub type Check = fn(u64) -> Result<f64, String>;

/// All six checks by name.
pub const CHECKS: [(&str, Check); 6] = [
    ("masked_bce", masked_bce_check),
    ("mse", mse_check),
    ("ssim", ssim_check),
    ("gan_losses", gan_check),
    ("emd", emd_check),
    ("mi", mi_check),
];
