use std::time::Instant;

use ndarray::{concatenate, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    checkpoint, common_size, pick, segmentation_step, shuffled_chunks, stack_images, stack_masks, EpochAccumulator,
    Protocol, TrainConfig, TrainReport,
};
use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::forge::{derive_seed, RailwayScene};
use crate::netspec::NetworkSpec;
use crate::nn::optim::Sgd;
use crate::nn::Model;

/// Railway samples per batch; at least one slot is left for non-railway
/// images whenever the batch has room for two.
pub(super) fn railway_slots(cfg: &TrainConfig) -> usize {
    let b = cfg.batch_size;
    if b == 1 {
        return 1;
    }
    ((b as f64 * cfg.railway_fraction).round() as usize).clamp(1, b - 1)
}

/// Trains a patch classifier to label railway pixels (channel 1) against
/// everything else. Railway scenes only supervise pixels inside their rail
/// mask; non-railway images are background everywhere.
pub fn train_local(
    spec: NetworkSpec,
    railway_scenes: &[RailwayScene],
    nonrail_images: &[Array3<f32>],
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainReport)> {
    cfg.expect(Protocol::Local)?;
    if nonrail_images.is_empty() {
        return Err(Error::EmptyInput("no non-railway images to train on"));
    }
    let (h, w) = common_size(railway_scenes, nonrail_images)?;
    if spec.in_channels != 3 || spec.out_channels != 2 {
        return Err(Error::ShapeMismatch(format!("local training needs a 3->2 channel network, `{}` is not", spec.name)));
    }
    let start = Instant::now();
    let mut model = Model::new(spec, derive_seed(cfg.seed, 0))?;
    let mut opt = Sgd::new(cfg.momentum_or_beta1 as f32, cfg.weight_decay as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let nr = railway_slots(cfg);
    let nn = cfg.batch_size - nr;

    let mut report = TrainReport { protocol: Protocol::Local, seed: cfg.seed, epochs: Vec::new(), checkpoint: None, wall_clock_secs: 0.0 };
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut acc = EpochAccumulator::default();
        for chunk in shuffled_chunks(railway_scenes.len(), nr, &mut rng) {
            let others = pick(nonrail_images.len(), nn, &mut rng);
            let mut images: Vec<&Array3<f32>> = chunk.iter().map(|&i| &railway_scenes[i].image).collect();
            images.extend(others.iter().map(|&i| &nonrail_images[i]));
            let x = stack_images(&images);

            let rail = stack_masks(&chunk.iter().map(|&i| &railway_scenes[i].rail_mask).collect::<Vec<_>>());
            let background = Array3::from_elem((others.len(), h, w), false);
            let everywhere = Array3::from_elem((others.len(), h, w), true);
            let labels = concatenate(Axis(0), &[rail.view(), background.view()]).expect("same size");
            let valid = concatenate(Axis(0), &[rail.view(), everywhere.view()]).expect("same size");

            let loss = segmentation_step(&mut model, &mut opt, &x, &labels, &valid, lr)?;
            acc.add(epoch, &[("masked_bce", loss)])?;
        }
        report.epochs.push(acc.finish(epoch, lr));
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((checkpoint(model, cfg, &report, "masked_bce"), report))
}
