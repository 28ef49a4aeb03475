use std::time::Instant;

use ndarray::{s, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{checkpoint, common_size, narrow, shuffled_chunks, stack_images, widen, EpochAccumulator, GenLoss, Protocol, TrainConfig, TrainReport};
use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::forge::{derive_seed, RailwayScene};
use crate::losses::{gan_losses, hist_loss, mse_loss, ssim_loss, LossConfig};
use crate::netspec::NetworkSpec;
use crate::nn::optim::{Adam, Sgd};
use crate::nn::{concat_channels, Model};

/// Discriminator outputs of one adversarial batch and the discriminator loss
/// computed from them during training.
#[derive(Clone, Debug, PartialEq)]
pub struct GanStep {
    pub d_real: Vec<f64>,
    pub d_fake: Vec<f64>,
    pub d_loss: f64,
}

/// `[N, 1, H, W]` rail mask channel with values in {0, 1}.
fn mask_channel(scenes: &[&RailwayScene]) -> Array4<f32> {
    let (h, w) = scenes[0].rail_mask.dim();
    Array4::from_shape_fn((scenes.len(), 1, h, w), |(b, _, i, j)| f32::from(u8::from(scenes[b].rail_mask[[i, j]])))
}

fn probabilities(out: &Array4<f32>) -> Result<Vec<f64>> {
    if out.shape()[1..] != [1, 1, 1] {
        return Err(Error::ShapeMismatch(format!("discriminator must output one value per image, got {:?}", out.dim())));
    }
    Ok(out.iter().map(|&p| f64::from(p)).collect())
}

fn per_image(values: &[f64], dim: (usize, usize, usize, usize)) -> Array4<f32> {
    Array4::from_shape_fn(dim, |(b, _, _, _)| values[b] as f32)
}

struct Adversary {
    model: Model,
    opt: Adam,
}

/// Trains an image-to-image generator to reproduce obstacle-free railway
/// scenes. `spec_d` is required for the adversarial losses, whose
/// discriminator sees the image (or reconstruction) stacked with the rail
/// mask. When `trace` is given, every adversarial batch is recorded in it.
pub fn train_generator(
    spec_g: NetworkSpec,
    spec_d: Option<NetworkSpec>,
    railway_scenes: &[RailwayScene],
    cfg: &TrainConfig,
    mut trace: Option<&mut Vec<GanStep>>,
) -> Result<(ModelCheckpoint, TrainReport)> {
    cfg.expect(Protocol::Generator)?;
    common_size(railway_scenes, &[])?;
    if spec_g.in_channels != 3 || spec_g.out_channels != 3 {
        return Err(Error::ShapeMismatch(format!("generator needs a 3->3 channel network, `{}` is not", spec_g.name)));
    }
    let start = Instant::now();
    let mut model = Model::new(spec_g, derive_seed(cfg.seed, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let (beta1, wd) = (cfg.momentum_or_beta1 as f32, cfg.weight_decay as f32);

    let mut sgd = Sgd::new(beta1, wd);
    let mut g_adam = Adam::new(beta1, 0.999, wd);
    let mut adversary = match (cfg.gen_loss.is_adversarial(), spec_d) {
        (false, _) => None,
        (true, None) => return Err(Error::Config(format!("gen_loss {} needs a discriminator", cfg.gen_loss.as_str()))),
        (true, Some(spec)) => {
            if spec.in_channels != 4 || spec.out_channels != 1 {
                return Err(Error::ShapeMismatch(format!("discriminator needs a 4->1 channel network, `{}` is not", spec.name)));
            }
            Some(Adversary { model: Model::new(spec, derive_seed(cfg.seed, 2))?, opt: Adam::new(beta1, 0.999, wd) })
        }
    };
    let primary = match cfg.gen_loss {
        GenLoss::Mse => "mse",
        GenLoss::Ssim => "ssim",
        GenLoss::Gan | GenLoss::GanHist => "g_total",
    };

    let mut report = TrainReport { protocol: Protocol::Generator, seed: cfg.seed, epochs: Vec::new(), checkpoint: None, wall_clock_secs: 0.0 };
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut acc = EpochAccumulator::default();
        for chunk in shuffled_chunks(railway_scenes.len(), cfg.batch_size, &mut rng) {
            let scenes: Vec<&RailwayScene> = chunk.iter().map(|&i| &railway_scenes[i]).collect();
            let x = stack_images(&scenes.iter().map(|s| &s.image).collect::<Vec<_>>());
            let target = widen(&x);
            let tape = model.forward_train(&x)?;
            if tape.output().dim() != x.dim() {
                return Err(Error::ShapeMismatch(format!("generator maps {:?} to {:?}", x.dim(), tape.output().dim())));
            }
            let recon = widen(tape.output());
            let grad = match (&mut adversary, cfg.gen_loss) {
                (None, GenLoss::Mse) => {
                    let (loss, grad) = mse_loss(target.view(), recon.view());
                    acc.add(epoch, &[("mse", loss)])?;
                    grad
                }
                (None, GenLoss::Ssim) => {
                    let (loss, grad) = ssim_loss(target.view(), recon.view(), &cfg.loss);
                    acc.add(epoch, &[("ssim", loss)])?;
                    grad
                }
                (Some(adv), loss) => {
                    let mask = mask_channel(&scenes);
                    let (terms, grad, step) = adversarial_step(adv, &x, tape.output(), &mask, loss, &cfg.loss, lr)?;
                    acc.add(epoch, &terms)?;
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(step);
                    }
                    grad
                }
                (None, _) => unreachable!("adversarial losses always have a discriminator"),
            };
            let (grads, _) = model.backward(&tape, &narrow(&grad));
            if adversary.is_some() {
                g_adam.step(&mut model, &grads, lr as f32);
            } else {
                sgd.step(&mut model, &grads, lr as f32);
            }
        }
        report.epochs.push(acc.finish(epoch, lr));
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((checkpoint(model, cfg, &report, primary), report))
}

type AdversarialOut = (Vec<(&'static str, f64)>, Array4<f64>, GanStep);

/// Updates the discriminator on one batch, then returns the generator's
/// loss terms and its gradient with respect to the reconstruction.
fn adversarial_step(
    adv: &mut Adversary,
    x: &Array4<f32>,
    recon: &Array4<f32>,
    mask: &Array4<f32>,
    loss: GenLoss,
    loss_cfg: &LossConfig,
    lr: f64,
) -> Result<AdversarialOut> {
    let n = x.dim().0;
    let real_in = concat_channels(&[x.view(), mask.view()]);
    let fake_in = concat_channels(&[recon.view(), mask.view()]);

    let real_tape = adv.model.forward_train(&real_in)?;
    let fake_tape = adv.model.forward_train(&fake_in)?;
    let d_real = probabilities(real_tape.output())?;
    let d_fake = probabilities(fake_tape.output())?;
    let per: Vec<_> = d_real.iter().zip(&d_fake).map(|(&r, &f)| gan_losses(r, f, loss_cfg)).collect();
    let d_loss = per.iter().map(|l| l.d_loss).sum::<f64>() / n as f64;
    let dy_real: Vec<f64> = per.iter().map(|l| l.d_grad_real / n as f64).collect();
    let dy_fake: Vec<f64> = per.iter().map(|l| l.d_grad_fake / n as f64).collect();
    let (mut grads, _) = adv.model.backward(&real_tape, &per_image(&dy_real, real_tape.output().dim()));
    let (fake_grads, _) = adv.model.backward(&fake_tape, &per_image(&dy_fake, fake_tape.output().dim()));
    grads.accumulate(&fake_grads);
    adv.opt.step(&mut adv.model, &grads, lr as f32);

    // Generator side: the updated discriminator judges the reconstruction.
    let g_tape = adv.model.forward_train(&fake_in)?;
    let d_fake_g = probabilities(g_tape.output())?;
    let per_g: Vec<_> = d_fake_g.iter().map(|&f| gan_losses(0.5, f, loss_cfg)).collect();
    let g_adv = per_g.iter().map(|l| l.g_loss).sum::<f64>() / n as f64;
    let dy: Vec<f64> = per_g.iter().map(|l| l.g_grad_fake / n as f64).collect();
    let (_, d_input) = adv.model.backward(&g_tape, &per_image(&dy, g_tape.output().dim()));
    let mut grad = widen(&d_input.slice(s![.., 0..3, .., ..]).to_owned());

    let mut terms = vec![("d_loss", d_loss), ("g_adv", g_adv)];
    let mut total = g_adv;
    if loss == GenLoss::GanHist {
        let (h, hgrad) = hist_loss(widen(x).view(), widen(recon).view(), loss_cfg);
        grad.zip_mut_with(&hgrad, |g, &d| *g += loss_cfg.hist_weight * d);
        total += loss_cfg.hist_weight * h;
        terms.push(("hist", h));
    }
    terms.push(("g_total", total));
    debug_assert_eq!(grad.len_of(Axis(1)), 3);
    Ok((terms, grad, GanStep { d_real, d_fake, d_loss }))
}
