//! Differentiable histogram losses.
//!
//! Values in `[0, 1]` are spread over `bins` evenly spaced centers
//! (`k / (bins - 1)`) with a triangular kernel one bin-spacing wide, so each
//! value splits its unit mass between the two nearest centers.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4};

use super::LossConfig;

/// Cumulative differences below this are treated as zero.
const CDF_TIE: f64 = 1e-12;

/// Lower bin index and the weight of the upper neighbour for value `v`.
fn split(v: f64, bins: usize) -> (usize, f64) {
    let pos = v.clamp(0.0, 1.0) * (bins - 1) as f64;
    let lo = (pos.floor() as usize).min(bins - 2);
    (lo, pos - lo as f64)
}

/// Soft histogram of `values` (any shape), normalized to sum to one.
pub fn soft_histogram<'a>(values: impl IntoIterator<Item = &'a f64>, bins: usize) -> Array1<f64> {
    assert!(bins >= 2);
    let mut hist = Array1::<f64>::zeros(bins);
    let mut count = 0usize;
    for &v in values {
        let (lo, t) = split(v, bins);
        hist[lo] += 1.0 - t;
        hist[lo + 1] += t;
        count += 1;
    }
    if count > 0 {
        hist /= count as f64;
    }
    hist
}

/// Pulls a histogram gradient `dh` back onto the values it was built from.
pub fn soft_histogram_backward(values: &[f64], bins: usize, dh: ArrayView1<f64>) -> Vec<f64> {
    let scale = (bins - 1) as f64 / values.len().max(1) as f64;
    values
        .iter()
        .map(|&v| {
            if !(0.0..=1.0).contains(&v) {
                return 0.0;
            }
            let (lo, _) = split(v, bins);
            (dh[lo + 1] - dh[lo]) * scale
        })
        .collect()
}

/// Mean absolute difference of the two cumulative distributions, and its
/// gradient with respect to `h2`.
pub fn emd_loss(h1: ArrayView1<f64>, h2: ArrayView1<f64>) -> (f64, Array1<f64>) {
    assert_eq!(h1.len(), h2.len());
    let b = h1.len();
    let mut signs = vec![0.0; b];
    let (mut c1, mut c2, mut total) = (0.0, 0.0, 0.0);
    for k in 0..b {
        c1 += h1[k];
        c2 += h2[k];
        let d = c1 - c2;
        total += d.abs();
        // Rounding-level differences count as ties (subgradient 0); the last
        // bin of two normalized histograms always lands here.
        signs[k] = if d > CDF_TIE { -1.0 } else if d < -CDF_TIE { 1.0 } else { 0.0 };
    }
    // d/dh2_j sums over every cumulative bin k >= j.
    let mut grad = Array1::<f64>::zeros(b);
    let mut acc = 0.0;
    for k in (0..b).rev() {
        acc += signs[k];
        grad[k] = acc / b as f64;
    }
    (total / b as f64, grad)
}

/// Negative mutual information between two equally sized value sets in
/// `[0, 1]`, from their joint soft histogram. Returns the gradient with
/// respect to `y`.
pub fn mi_loss(x: &[f64], y: &[f64], bins: usize) -> (f64, Vec<f64>) {
    assert_eq!(x.len(), y.len());
    let n = x.len().max(1) as f64;
    let sx: Vec<(usize, f64)> = x.iter().map(|&v| split(v, bins)).collect();
    let sy: Vec<(usize, f64)> = y.iter().map(|&v| split(v, bins)).collect();
    let mut joint = Array2::<f64>::zeros((bins, bins));
    for (&(a, ta), &(b, tb)) in sx.iter().zip(&sy) {
        let wa = [1.0 - ta, ta];
        let wb = [1.0 - tb, tb];
        for (da, &pa) in wa.iter().enumerate() {
            for (db, &pb) in wb.iter().enumerate() {
                joint[[a + da, b + db]] += pa * pb / n;
            }
        }
    }
    let px = joint.sum_axis(ndarray::Axis(1));
    let py = joint.sum_axis(ndarray::Axis(0));
    let mut mi = 0.0;
    for ((i, j), &p) in joint.indexed_iter() {
        if p > 0.0 {
            mi += p * (p / (px[i] * py[j])).ln();
        }
    }
    // dMI/dP_ab = ln P_ab - ln p_a - ln q_b (constant terms cancel because
    // each sample's joint weights always sum to one).
    let dmi = |a: usize, b: usize| {
        let p = joint[[a, b]];
        if p > 0.0 {
            p.ln() - px[a].ln() - py[b].ln()
        } else {
            0.0
        }
    };
    let step = (bins - 1) as f64;
    let grad = x
        .iter()
        .zip(y)
        .zip(sx.iter().zip(&sy))
        .map(|((_, &yv), (&(a, ta), &(b, _)))| {
            if !(0.0..=1.0).contains(&yv) {
                return 0.0;
            }
            let wa = [1.0 - ta, ta];
            let mut g = 0.0;
            for (da, &pa) in wa.iter().enumerate() {
                g += pa * (dmi(a + da, b + 1) - dmi(a + da, b)) * step;
            }
            -g / n
        })
        .collect();
    (-mi, grad)
}

/// Rec. 601 luminance of a `[3, H, W]` image.
pub fn luminance(rgb: ArrayView4<f64>, index: usize) -> Array2<f64> {
    let img = rgb.slice(s![index, .., .., ..]);
    &img.slice(s![0, .., ..]) * 0.299 + &img.slice(s![1, .., ..]) * 0.587 + &img.slice(s![2, .., ..]) * 0.114
}

fn to_unit(v: ArrayView2<f64>) -> Vec<f64> {
    v.iter().map(|&p| (p + 1.0) / 2.0).collect()
}

/// Histogram loss between tanh-range `[N, 3, H, W]` batches: EMD of the
/// luminance histograms plus negative mutual information of the luminance
/// pairs, per image, averaged over the batch. Gradient is with respect to
/// `prediction`.
pub fn hist_loss(target: ArrayView4<f64>, prediction: ArrayView4<f64>, cfg: &LossConfig) -> (f64, Array4<f64>) {
    assert_eq!(target.dim(), prediction.dim());
    let (n, c, _, w) = target.dim();
    assert_eq!(c, 3, "histogram loss expects RGB");
    let bins = cfg.histogram_bins;
    let mut grad = Array4::<f64>::zeros(target.dim());
    let mut total = 0.0;
    for b in 0..n {
        let lx = to_unit(luminance(target, b).view());
        let ly = to_unit(luminance(prediction, b).view());
        let hx = soft_histogram(&lx, bins);
        let hy = soft_histogram(&ly, bins);
        let (emd, dh) = emd_loss(hx.view(), hy.view());
        let (mi, dmi) = mi_loss(&lx, &ly, bins);
        total += emd + mi;
        let demd = soft_histogram_backward(&ly, bins, dh.view());
        for (p, (ge, gm)) in demd.iter().zip(&dmi).enumerate() {
            // luminance in unit range = ((0.299 r + 0.587 g + 0.114 b) + 1) / 2
            let g = (ge + gm) / 2.0 / n as f64;
            let (i, j) = (p / w, p % w);
            grad[[b, 0, i, j]] = g * 0.299;
            grad[[b, 1, i, j]] = g * 0.587;
            grad[[b, 2, i, j]] = g * 0.114;
        }
    }
    (total / n as f64, grad)
}
