//! Structural similarity with a Gaussian window.
//!
//! Local statistics use a separable Gaussian filter whose taps are truncated
//! at the image border and renormalized, so every local mean is a convex
//! combination of in-bounds pixels (constant images have exact statistics
//! everywhere, including the border).

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView4, Zip};

use super::LossConfig;

pub struct SsimResult {
    /// Mean SSIM over all pixels and images.
    pub mean: f64,
    /// Per-pixel SSIM, averaged over channels: `[N, H, W]`.
    pub map: Array3<f64>,
}

/// `n x n` matrix applying the normalized, border-truncated 1-D window.
fn window_matrix(n: usize, size: usize, sigma: f64) -> Array2<f64> {
    let r = (size / 2) as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let mut a = Array2::<f64>::zeros((n, n));
    for o in 0..n as isize {
        let mut z = 0.0;
        for d in -r..=r {
            let i = o + d;
            if i >= 0 && i < n as isize {
                a[[o as usize, i as usize]] = taps[(d + r) as usize];
                z += taps[(d + r) as usize];
            }
        }
        a.row_mut(o as usize).mapv_inplace(|v| v / z);
    }
    a
}

struct Blur {
    rows: Array2<f64>,
    cols: Array2<f64>,
}

impl Blur {
    fn new(h: usize, w: usize, size: usize, sigma: f64) -> Self {
        Blur { rows: window_matrix(h, size, sigma), cols: window_matrix(w, size, sigma) }
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.rows.dot(&x).dot(&self.cols.t())
    }

    fn adjoint(&self, d: ArrayView2<f64>) -> Array2<f64> {
        self.rows.t().dot(&d).dot(&self.cols)
    }
}

struct Stats {
    mu_x: Array2<f64>,
    mu_y: Array2<f64>,
    var_x: Array2<f64>,
    var_y: Array2<f64>,
    cov: Array2<f64>,
}

fn stats(blur: &Blur, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Stats {
    let mu_x = blur.apply(x);
    let mu_y = blur.apply(y);
    let var_x = blur.apply((&x * &x).view()) - &mu_x * &mu_x;
    let var_y = blur.apply((&y * &y).view()) - &mu_y * &mu_y;
    let cov = blur.apply((&x * &y).view()) - &mu_x * &mu_y;
    Stats { mu_x, mu_y, var_x, var_y, cov }
}

fn constants(cfg: &LossConfig) -> (f64, f64) {
    ((0.01 * cfg.dynamic_range).powi(2), (0.03 * cfg.dynamic_range).powi(2))
}

/// Per-pixel SSIM between two `[N, C, H, W]` batches.
pub fn ssim(x: ArrayView4<f64>, y: ArrayView4<f64>, cfg: &LossConfig) -> SsimResult {
    assert_eq!(x.dim(), y.dim());
    let (n, c, h, w) = x.dim();
    assert!(cfg.ssim_window <= h.min(w), "SSIM window larger than image");
    let (c1, c2) = constants(cfg);
    let blur = Blur::new(h, w, cfg.ssim_window, cfg.ssim_sigma);
    let mut map = Array3::<f64>::zeros((n, h, w));
    for b in 0..n {
        let mut acc = map.slice_mut(s![b, .., ..]);
        for ch in 0..c {
            let st = stats(&blur, x.slice(s![b, ch, .., ..]), y.slice(s![b, ch, .., ..]));
            Zip::from(&mut acc)
                .and(&st.mu_x)
                .and(&st.mu_y)
                .and(&st.var_x)
                .and(&st.var_y)
                .and(&st.cov)
                .for_each(|a, &mx, &my, &vx, &vy, &cv| {
                    let num = (2.0 * mx * my + c1) * (2.0 * cv + c2);
                    let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                    *a += num / den / c as f64;
                });
        }
    }
    let mean = map.mean().unwrap_or(1.0);
    SsimResult { mean, map }
}

/// `1 - mean SSIM` and its gradient with respect to `prediction`.
pub fn ssim_loss(target: ArrayView4<f64>, prediction: ArrayView4<f64>, cfg: &LossConfig) -> (f64, Array4<f64>) {
    assert_eq!(target.dim(), prediction.dim());
    let (n, c, h, w) = target.dim();
    let (c1, c2) = constants(cfg);
    let blur = Blur::new(h, w, cfg.ssim_window, cfg.ssim_sigma);
    let mut grad = Array4::<f64>::zeros(target.dim());
    let dl_ds = -1.0 / (n * c * h * w) as f64;
    let mut total = 0.0;
    for b in 0..n {
        for ch in 0..c {
            let x = target.slice(s![b, ch, .., ..]);
            let y = prediction.slice(s![b, ch, .., ..]);
            let st = stats(&blur, x, y);
            // S = A1 A2 / (B1 B2) as a function of mu_y, E[y^2], E[xy].
            let mut g_mu = Array2::<f64>::zeros((h, w));
            let mut g_yy = Array2::<f64>::zeros((h, w));
            let mut g_xy = Array2::<f64>::zeros((h, w));
            for i in 0..h {
                for j in 0..w {
                    let (mx, my) = (st.mu_x[[i, j]], st.mu_y[[i, j]]);
                    let a1 = 2.0 * mx * my + c1;
                    let a2 = 2.0 * st.cov[[i, j]] + c2;
                    let b1 = mx * mx + my * my + c1;
                    let b2 = st.var_x[[i, j]] + st.var_y[[i, j]] + c2;
                    let den = b1 * b2;
                    let s_val = a1 * a2 / den;
                    total += s_val;
                    let d_mu = 2.0 * mx * (a2 - a1) / den - s_val * 2.0 * my * (b2 - b1) / den;
                    g_mu[[i, j]] = dl_ds * d_mu;
                    g_yy[[i, j]] = dl_ds * (-s_val / b2);
                    g_xy[[i, j]] = dl_ds * (2.0 * a1 / den);
                }
            }
            let from_mu = blur.adjoint(g_mu.view());
            let from_yy = blur.adjoint(g_yy.view());
            let from_xy = blur.adjoint(g_xy.view());
            let mut gslice = grad.slice_mut(s![b, ch, .., ..]);
            Zip::from(&mut gslice)
                .and(&from_mu)
                .and(&from_yy)
                .and(&from_xy)
                .and(&x)
                .and(&y)
                .for_each(|g, &m, &yy, &xy, &xv, &yv| *g = m + 2.0 * yv * yy + xv * xy);
        }
    }
    let mean = total / (n * c * h * w) as f64;
    (1.0 - mean, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identical_images_score_one() {
        let x = random(1, (2, 3, 16, 16));
        let r = ssim(x.view(), x.view(), &LossConfig::default());
        assert!(r.map.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let (loss, grad) = ssim_loss(x.view(), x.view(), &LossConfig::default());
        assert!(loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn symmetric() {
        let x = random(2, (1, 3, 16, 16));
        let y = random(3, (1, 3, 16, 16));
        let cfg = LossConfig::default();
        let a = ssim(x.view(), y.view(), &cfg);
        let b = ssim(y.view(), x.view(), &cfg);
        for (p, q) in a.map.iter().zip(b.map.iter()) {
            assert!((p - q).abs() < 1e-7);
        }
    }

    #[test]
    fn constant_images_follow_closed_form() {
        let cfg = LossConfig::default();
        let (a, b) = (0.3, -0.4);
        let x = Array4::from_elem((1, 1, 12, 12), a);
        let y = Array4::from_elem((1, 1, 12, 12), b);
        let c1 = (0.01f64 * 2.0).powi(2);
        let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let r = ssim(x.view(), y.view(), &cfg);
        assert!(r.map.iter().all(|&v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn map_is_bounded() {
        let x = random(4, (2, 3, 12, 12));
        let y = random(5, (2, 3, 12, 12));
        let r = ssim(x.view(), y.view(), &LossConfig::default());
        assert!(r.map.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }
}
