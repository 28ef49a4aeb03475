//! Score maps from trained networks.

use ndarray::{s, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::{ClassificationMap, ScoreSource};
use crate::error::{Error, Result};
use crate::forge::RailwayScene;
use crate::losses::{ssim, LossConfig};
use crate::nn::{concat_channels, Model};

/// Anything that maps a `[N, 3, H, W]` image batch in `[-1, 1]` to a
/// reconstruction of the same shape.
pub trait Reconstruct {
    fn reconstruct(&self, x: &Array4<f32>) -> Result<Array4<f32>>;
}

impl Reconstruct for Model {
    fn reconstruct(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        if self.spec().in_channels != 3 || self.spec().out_channels != 3 {
            return Err(Error::ShapeMismatch(format!("`{}` is not a 3->3 channel generator", self.spec().name)));
        }
        self.forward(x)
    }
}

/// Reconstruction that returns its input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityGenerator;

impl Reconstruct for IdentityGenerator {
    fn reconstruct(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        Ok(x.clone())
    }
}

/// Probability of the negative class (channel 0) under a two-way softmax of
/// `[1, 2, H, W]` logits.
pub(crate) fn negative_probability(logits: &Array4<f32>) -> Array2<f64> {
    let l = logits.index_axis(Axis(0), 0);
    let (l0, l1) = (l.index_axis(Axis(0), 0), l.index_axis(Axis(0), 1));
    let mut out = Array2::zeros(l0.dim());
    ndarray::Zip::from(&mut out).and(&l0).and(&l1).for_each(|o, &a, &b| {
        *o = 1.0 / (1.0 + ((b - a) as f64).exp());
    });
    out
}

fn check_classifier(model: &Model, in_channels: usize, role: &str) -> Result<()> {
    let spec = model.spec();
    if spec.in_channels != in_channels || spec.out_channels != 2 {
        return Err(Error::ShapeMismatch(format!(
            "{role} needs a {in_channels}->2 channel network, `{}` is {}->{}",
            spec.name, spec.in_channels, spec.out_channels
        )));
    }
    Ok(())
}

/// Background probability of a patch classifier at every pixel.
pub fn score_map_local(model: &Model, scene: &RailwayScene) -> Result<ClassificationMap> {
    check_classifier(model, 3, "local scoring")?;
    let logits = model.forward(&scene.to_tensor())?;
    ClassificationMap::new(&scene.scene_id, negative_probability(&logits), scene.rail_mask.clone(), ScoreSource::Local)
}

/// Stacks an original and a reconstruction into the 6-channel pair input.
pub(crate) fn pair_input(original: &Array4<f32>, reconstruction: &Array4<f32>) -> Array4<f32> {
    concat_channels(&[original.view(), reconstruction.view()])
}

/// Per-pixel "semantically different" probability between the scene and its
/// reconstruction.
pub fn score_map_global(generator: &dyn Reconstruct, differentiator: &Model, scene: &RailwayScene) -> Result<ClassificationMap> {
    check_classifier(differentiator, 6, "global scoring")?;
    let x = scene.to_tensor();
    let recon = generator.reconstruct(&x)?;
    if recon.dim() != x.dim() {
        return Err(Error::ShapeMismatch(format!("reconstruction {:?} vs input {:?}", recon.dim(), x.dim())));
    }
    let logits = differentiator.forward(&pair_input(&x, &recon))?;
    ClassificationMap::new(&scene.scene_id, negative_probability(&logits), scene.rail_mask.clone(), ScoreSource::GlobalDiff)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconMetric {
    Mse,
    Ssim,
}

/// Reconstruction-error baseline. `Mse`: channel-mean squared error,
/// min-max normalized over the railway pixels (the whole image if there are
/// none). `Ssim`: `(1 - SSIM) / 2` clipped to `[0, 1]`.
pub fn reconstruction_error_map(
    generator: &dyn Reconstruct,
    scene: &RailwayScene,
    metric: ReconMetric,
    loss_cfg: &LossConfig,
) -> Result<ClassificationMap> {
    let x = scene.to_tensor();
    let recon = generator.reconstruct(&x)?;
    if recon.dim() != x.dim() {
        return Err(Error::ShapeMismatch(format!("reconstruction {:?} vs input {:?}", recon.dim(), x.dim())));
    }
    let (scores, source) = match metric {
        ReconMetric::Mse => {
            let diff = (&recon - &x).mapv(|d| (d as f64) * (d as f64));
            let err = diff.slice(s![0, .., .., ..]).mean_axis(Axis(0)).expect("three channels");
            (min_max_normalize(err, &scene.rail_mask), ScoreSource::ReconMse)
        }
        ReconMetric::Ssim => {
            let (h, w) = (scene.height(), scene.width());
            let mut cfg = loss_cfg.clone();
            // Shrink the window for images smaller than it, keeping it odd.
            let max_window = h.min(w) - (1 - h.min(w) % 2);
            cfg.ssim_window = cfg.ssim_window.min(max_window);
            let r = ssim(x.mapv(f64::from).view(), recon.mapv(f64::from).view(), &cfg);
            let map = r.map.index_axis(Axis(0), 0).mapv(|v| ((1.0 - v) / 2.0).clamp(0.0, 1.0));
            (map, ScoreSource::ReconSsim)
        }
    };
    ClassificationMap::new(&scene.scene_id, scores, scene.rail_mask.clone(), source)
}

fn min_max_normalize(err: Array2<f64>, roi: &Array2<bool>) -> Array2<f64> {
    let use_roi = roi.iter().any(|&v| v);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&v, &inside) in err.iter().zip(roi.iter()) {
        if inside || !use_roi {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if hi > lo {
        err.mapv(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
    } else {
        Array2::zeros(err.dim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::gen_toy_scene;
    use crate::netspec::{builtin_spec, BuiltinNet};

    /// Reconstruction that brightens one square region.
    struct Blemish;

    impl Reconstruct for Blemish {
        fn reconstruct(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
            let mut y = x.clone();
            y.slice_mut(s![.., .., 30..34, 30..34]).mapv_inplace(|v| (v + 0.5).min(1.0));
            Ok(y)
        }
    }

    #[test]
    fn local_scores_are_probabilities() {
        let model = Model::new(builtin_spec(BuiltinNet::Patchclass13), 1).unwrap();
        let scene = gen_toy_scene(32, 1, false, 2).unwrap();
        let a = score_map_local(&model, &scene).unwrap();
        assert_eq!(a, score_map_local(&model, &scene).unwrap());
        assert!(a.scores.iter().all(|v| (0.0..=1.0).contains(v)));
        let diff = Model::new(builtin_spec(BuiltinNet::Diff13), 1).unwrap();
        assert!(score_map_local(&diff, &scene).is_err());
    }

    #[test]
    fn global_scores_are_probabilities() {
        let diff = Model::new(builtin_spec(BuiltinNet::Diff13), 3).unwrap();
        let scene = gen_toy_scene(32, 1, true, 4).unwrap();
        let a = score_map_global(&IdentityGenerator, &diff, &scene).unwrap();
        assert_eq!(a, score_map_global(&IdentityGenerator, &diff, &scene).unwrap());
        assert!(a.scores.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identical_reconstruction_scores_zero() {
        let scene = gen_toy_scene(32, 1, false, 5).unwrap();
        let cfg = LossConfig::default();
        for metric in [ReconMetric::Mse, ReconMetric::Ssim] {
            let m = reconstruction_error_map(&IdentityGenerator, &scene, metric, &cfg).unwrap();
            assert!(m.scores.iter().all(|&v| v.abs() < 1e-9), "{metric:?}");
        }
    }

    #[test]
    fn mse_normalization_hits_one_at_max() {
        let mut scene = gen_toy_scene(64, 1, false, 6).unwrap();
        scene.rail_mask.fill(true);
        let m = reconstruction_error_map(&Blemish, &scene, ReconMetric::Mse, &LossConfig::default()).unwrap();
        // independent oracle: argmax of the raw squared error
        let x = scene.to_tensor();
        let y = Blemish.reconstruct(&x).unwrap();
        let raw = Array2::from_shape_fn((64, 64), |(r, c)| {
            (0..3).map(|k| ((y[[0, k, r, c]] - x[[0, k, r, c]]) as f64).powi(2)).sum::<f64>() / 3.0
        });
        let (argmax, _) = raw.indexed_iter().fold(((0, 0), f64::MIN), |best, (p, &v)| if v > best.1 { (p, v) } else { best });
        assert!((m.scores[argmax] - 1.0).abs() < 1e-12);
        assert!(m.scores.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
