use std::time::Instant;

use ndarray::{concatenate, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{checkpoint, common_size, segmentation_step, shuffled_chunks, stack_images, stack_masks, EpochAccumulator, Protocol, TrainConfig, TrainReport};
use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::forge::{derive_seed, RailwayScene};
use crate::localize::{pair_input, Reconstruct};
use crate::netspec::NetworkSpec;
use crate::nn::optim::Sgd;
use crate::nn::Model;

/// Reconstructions are computed in chunks of this many images.
const RECON_CHUNK: usize = 16;

/// Trains a pair classifier on `(image, G(scene))` inputs: the scene itself
/// makes a similar pair (channel 1), a random non-railway image a different
/// one (channel 0). Only rail-mask pixels are supervised. The generator is
/// frozen; its reconstructions are computed once up front.
pub fn train_differentiator(
    spec: NetworkSpec,
    generator: &dyn Reconstruct,
    railway_scenes: &[RailwayScene],
    nonrail_images: &[Array3<f32>],
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainReport)> {
    cfg.expect(Protocol::Differentiator)?;
    if nonrail_images.is_empty() {
        return Err(Error::EmptyInput("no non-railway images to train on"));
    }
    common_size(railway_scenes, nonrail_images)?;
    if spec.in_channels != 6 || spec.out_channels != 2 {
        return Err(Error::ShapeMismatch(format!("differentiator needs a 6->2 channel network, `{}` is not", spec.name)));
    }
    let start = Instant::now();
    let mut recon = Vec::with_capacity(railway_scenes.len());
    for chunk in railway_scenes.chunks(RECON_CHUNK) {
        let x = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>());
        let y = generator.reconstruct(&x)?;
        if y.dim() != x.dim() {
            return Err(Error::ShapeMismatch(format!("generator maps {:?} to {:?}", x.dim(), y.dim())));
        }
        recon.extend(y.outer_iter().map(|v| v.insert_axis(Axis(0)).to_owned()));
    }

    let mut model = Model::new(spec, derive_seed(cfg.seed, 0))?;
    let mut opt = Sgd::new(cfg.momentum_or_beta1 as f32, cfg.weight_decay as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut report =
        TrainReport { protocol: Protocol::Differentiator, seed: cfg.seed, epochs: Vec::new(), checkpoint: None, wall_clock_secs: 0.0 };
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut acc = EpochAccumulator::default();
        for chunk in shuffled_chunks(railway_scenes.len(), cfg.batch_size, &mut rng) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut similar = Vec::with_capacity(chunk.len());
            for &i in &chunk {
                let is_similar = rng.random_bool(0.5);
                let original = if is_similar {
                    stack_images(&[&railway_scenes[i].image])
                } else {
                    stack_images(&[&nonrail_images[rng.random_range(0..nonrail_images.len())]])
                };
                inputs.push(pair_input(&original, &recon[i]));
                similar.push(is_similar);
            }
            let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
            let x = concatenate(Axis(0), &views).expect("pairs share a size");
            let valid = stack_masks(&chunk.iter().map(|&i| &railway_scenes[i].rail_mask).collect::<Vec<_>>());
            let mut labels = valid.clone();
            for (mut l, &s) in labels.outer_iter_mut().zip(&similar) {
                l.fill(s);
            }
            let loss = segmentation_step(&mut model, &mut opt, &x, &labels, &valid, lr)?;
            acc.add(epoch, &[("masked_bce", loss)])?;
        }
        report.epochs.push(acc.finish(epoch, lr));
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((checkpoint(model, cfg, &report, "masked_bce"), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{gen_nonrail_image, gen_toy_scene};
    use crate::localize::{score_map_global, IdentityGenerator};
    use crate::netspec::{builtin_spec, BuiltinNet};

    fn data(n: usize, size: usize) -> (Vec<RailwayScene>, Vec<Array3<f32>>) {
        let scenes = (0..n as u64).map(|i| gen_toy_scene(size, 1, false, 900 + i).unwrap()).collect();
        let images = (0..n as u64).map(|i| gen_nonrail_image(size, 1900 + i)).collect();
        (scenes, images)
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 8, lr: 0.01, seed: 5, ..TrainConfig::differentiator() }
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let (s, i) = data(2, 32);
        let spec = builtin_spec(BuiltinNet::Diff13);
        let (ckpt, _) = train_differentiator(spec.clone(), &IdentityGenerator, &s, &i, &cfg(0)).unwrap();
        assert_eq!(ckpt.model, Model::new(spec, derive_seed(5, 0)).unwrap());
    }

    #[test]
    fn identity_generator_pairs_read_as_similar() {
        let (s, i) = data(24, 32);
        let (ckpt, report) = train_differentiator(builtin_spec(BuiltinNet::Diff13), &IdentityGenerator, &s, &i, &cfg(4)).unwrap();
        let c = report.curve("masked_bce");
        assert!(c[3] < c[0], "{c:?}");
        let held_out: Vec<_> = (0..4).map(|i| gen_toy_scene(32, 1, false, 5000 + i).unwrap()).collect();
        for scene in held_out.iter().chain(&s[..4]) {
            let map = score_map_global(&IdentityGenerator, &ckpt.model, scene).unwrap();
            let (sum, n) = map.scores.iter().zip(&map.roi).filter(|(_, &r)| r).fold((0.0, 0), |(s, n), (v, _)| (s + v, n + 1));
            assert!(sum / (n as f64) < 0.5, "{}: mean score {}", scene.scene_id, sum / n as f64);
        }
    }

    #[test]
    fn wrong_channels() {
        let (s, i) = data(1, 32);
        let err = train_differentiator(builtin_spec(BuiltinNet::Patchclass13), &IdentityGenerator, &s, &i, &cfg(1)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }
}
