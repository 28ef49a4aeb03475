use ndarray::{Array4, ArrayView3, ArrayView4, Axis};

/// Two-class cross-entropy over softmax logits, averaged over valid pixels.
///
/// `logits` is `[N, 2, H, W]`; channel 1 is the positive class (`labels ==
/// true`). Pixels with `valid == false` contribute neither loss nor gradient.
/// Returns 0 with an all-zero gradient when no pixel is valid.
pub fn masked_bce(
    logits: ArrayView4<f64>,
    labels: ArrayView3<bool>,
    valid: ArrayView3<bool>,
) -> (f64, Array4<f64>) {
    let (n, c, h, w) = logits.dim();
    assert_eq!(c, 2, "masked_bce expects two logit channels");
    assert_eq!(labels.dim(), (n, h, w));
    assert_eq!(valid.dim(), (n, h, w));
    let mut grad = Array4::<f64>::zeros(logits.dim());
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    for b in 0..n {
        let l = logits.index_axis(Axis(0), b);
        for i in 0..h {
            for j in 0..w {
                if !valid[[b, i, j]] {
                    continue;
                }
                let (l0, l1) = (l[[0, i, j]], l[[1, i, j]]);
                let m = l0.max(l1);
                let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
                let p1 = (l1 - lse).exp();
                let p0 = (l0 - lse).exp();
                let positive = labels[[b, i, j]];
                total += lse - if positive { l1 } else { l0 };
                let t1 = if positive { 1.0 } else { 0.0 };
                grad[[b, 1, i, j]] = (p1 - t1) * scale;
                grad[[b, 0, i, j]] = (p0 - (1.0 - t1)) * scale;
            }
        }
    }
    (total * scale, grad)
}
