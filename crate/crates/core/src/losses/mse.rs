use ndarray::{Array, ArrayView, Dimension, Zip};

/// Mean squared difference and its gradient with respect to `prediction`.
pub fn mse_loss<D: Dimension>(target: ArrayView<f64, D>, prediction: ArrayView<f64, D>) -> (f64, Array<f64, D>) {
    assert_eq!(target.shape(), prediction.shape());
    let n = target.len().max(1) as f64;
    let mut grad = Array::<f64, D>::zeros(prediction.raw_dim());
    let mut sum = 0.0;
    Zip::from(&mut grad).and(&target).and(&prediction).for_each(|g, &t, &p| {
        let d = p - t;
        sum += d * d;
        *g = 2.0 * d / n;
    });
    (sum / n, grad)
}
