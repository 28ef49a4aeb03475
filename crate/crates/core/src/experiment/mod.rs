//! Experiment orchestration: data, training, scoring, evaluation and
//! reporting driven by one [`ExperimentConfig`]. Every file a command writes
//! lives under its output directory.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{
    AblationConfig, AblationMethod, CompositeData, DataSource, DirData, ExperimentConfig, GlobalMethod, LocalMethod, Method,
    ReconMethod, Stage, ToyData,
};

use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::evalkit::{ablation_report, grid_search, AblationRow, AblationTable, MetricsReport};
use crate::forge::{
    composite_obstacle, derive_seed, gen_nonrail_image, gen_toy_scene, read_dataset, read_image_dir, read_object_dir,
    write_dataset, write_image_dir, RailwayScene,
};
use crate::fsutil::{write_atomic, write_json};
use crate::localize::{reconstruction_error_map, score_map_global, score_map_local, write_score_map, ClassificationMap};
use crate::netspec::{builtin_spec_by_name, discriminator_d};
use crate::trainer::{train_differentiator, train_generator, train_local, GenLoss, Protocol, TrainReport};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TEXT: &str = "ablation.txt";

/// Scenes and images an experiment works on.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Vec<RailwayScene>,
    pub eval: Vec<RailwayScene>,
    pub nonrail: Vec<Array3<f32>>,
}

/// Attempts per scene before compositing gives up.
const COMPOSITE_ATTEMPTS: u64 = 16;

/// Builds or reads the experiment's data. Toy and composited sets are
/// regenerated deterministically from the experiment seed.
pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    match &cfg.data {
        DataSource::Toy(t) => {
            let rails = |i: usize| 1 + i % t.max_rails;
            let (s_train, s_eval, s_nonrail) =
                (cfg.stage_seed(Stage::TrainData), cfg.stage_seed(Stage::EvalData), cfg.stage_seed(Stage::NonrailData));
            let train = (0..t.train_scenes)
                .map(|i| gen_toy_scene(t.size, rails(i), false, derive_seed(s_train, i as u64)))
                .collect::<Result<_>>()?;
            let eval = (0..t.eval_scenes + t.eval_clean_scenes)
                .map(|i| gen_toy_scene(t.size, rails(i), i < t.eval_scenes, derive_seed(s_eval, i as u64)))
                .collect::<Result<_>>()?;
            let nonrail = (0..t.nonrail_images).map(|i| gen_nonrail_image(t.size, derive_seed(s_nonrail, i as u64))).collect();
            Ok(ExperimentData { train, eval, nonrail })
        }
        DataSource::Dir(d) => {
            Ok(ExperimentData { train: read_dataset(&d.train)?, eval: read_dataset(&d.eval)?, nonrail: read_image_dir(&d.nonrail)? })
        }
        DataSource::Composite(c) => {
            let objects = read_object_dir(&c.objects)?;
            if objects.is_empty() {
                return Err(Error::Dataset { path: c.objects.clone(), reason: "no object cutouts".into() });
            }
            let base = cfg.stage_seed(Stage::Composite);
            let mut eval = Vec::new();
            for (i, scene) in read_dataset(&c.eval_clean)?.iter().enumerate() {
                eval.push(composite_one(scene, &objects, &c.augmentation, derive_seed(base, i as u64))?);
            }
            Ok(ExperimentData { train: read_dataset(&c.train)?, eval, nonrail: read_image_dir(&c.nonrail)? })
        }
    }
}

fn composite_one(
    scene: &RailwayScene,
    objects: &[crate::forge::ObjectCutout],
    params: &crate::forge::AugmentationParams,
    seed: u64,
) -> Result<RailwayScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = None;
    for _ in 0..COMPOSITE_ATTEMPTS {
        let object = &objects[rng.random_range(0..objects.len())];
        let p = crate::forge::AugmentationParams { rng_seed: rng.random(), ..params.clone() };
        match composite_obstacle(scene, &object.image, &object.mask, &p) {
            Ok(mut s) => {
                if let Some(o) = &mut s.obstacle {
                    o.source_label = object.label.clone();
                }
                return Ok(s);
            }
            Err(e @ (Error::ObstacleVanished | Error::ObstacleExceedsFrame)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(Error::InvalidScene {
        scene_id: scene.scene_id.clone(),
        reason: format!("no object could be composited: {}", last.expect("at least one attempt")),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub eval_with_obstacle: usize,
    pub nonrail_images: usize,
    pub dataset_dir: PathBuf,
}

/// Writes the experiment's data under `out/dataset/{train,eval,nonrail}`.
pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<SynthSummary> {
    let data = load_data(cfg)?;
    let dir = out.join("dataset");
    write_dataset(&data.train, &dir.join("train"))?;
    write_dataset(&data.eval, &dir.join("eval"))?;
    write_image_dir(&data.nonrail, &dir.join("nonrail"))?;
    let summary = SynthSummary {
        train_scenes: data.train.len(),
        eval_scenes: data.eval.len(),
        eval_with_obstacle: data.eval.iter().filter(|s| s.obstacle.is_some()).count(),
        nonrail_images: data.nonrail.len(),
        dataset_dir: dir.clone(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

fn save_stage(out: &Path, role: &str, ckpt: &ModelCheckpoint, mut report: TrainReport) -> Result<PathBuf> {
    let rel = format!("checkpoints/{role}.ckpt");
    let path = out.join(&rel);
    fs::create_dir_all(checkpoint_dir(out)).map_err(|e| Error::io(checkpoint_dir(out), e))?;
    ckpt.save(&path)?;
    report.checkpoint = Some(rel);
    write_json(&out.join(format!("train_{role}.json")), &report)?;
    Ok(path)
}

fn square_size(data: &ExperimentData) -> Result<usize> {
    let s = data.train.first().ok_or(Error::EmptyInput("no training scenes"))?;
    if s.height() != s.width() {
        return Err(Error::Config(format!("adversarial generator training needs square images, got {}x{}", s.height(), s.width())));
    }
    Ok(s.height())
}

fn train_generator_stage(cfg: &ExperimentConfig, data: &ExperimentData, net: &str, gen_loss: GenLoss) -> Result<(ModelCheckpoint, TrainReport)> {
    let tcfg = cfg.train_config(Protocol::Generator, Some(gen_loss))?;
    let spec_d = if gen_loss.is_adversarial() { Some(discriminator_d(square_size(data)?)) } else { None };
    train_generator(builtin_spec_by_name(net)?, spec_d, &data.train, &tcfg, None)
}

/// Loads a checkpoint and checks that it holds the configured network.
pub fn load_checkpoint(path: &Path, net: &str) -> Result<ModelCheckpoint> {
    let ckpt = ModelCheckpoint::load(path)?;
    if ckpt.spec().name != net {
        return Err(Error::Checkpoint { path: path.into(), reason: format!("holds `{}` but the config expects `{net}`", ckpt.spec().name) });
    }
    Ok(ckpt)
}

/// Trains the configured method and writes its checkpoints and training
/// reports. Returns the checkpoint paths written.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let method = cfg.method()?;
    let data = load_data(cfg)?;
    let mut written = Vec::new();
    match method {
        Method::Local(m) => {
            let tcfg = cfg.train_config(Protocol::Local, None)?;
            let (ckpt, report) = train_local(builtin_spec_by_name(&m.net)?, &data.train, &data.nonrail, &tcfg)?;
            written.push(save_stage(out, "local", &ckpt, report)?);
        }
        Method::Global(m) => {
            let generator = match &m.generator_checkpoint {
                Some(p) => load_checkpoint(p, &m.generator_net)?,
                None => {
                    let (ckpt, report) = train_generator_stage(cfg, &data, &m.generator_net, m.gen_loss)?;
                    written.push(save_stage(out, "generator", &ckpt, report)?);
                    ckpt
                }
            };
            let tcfg = cfg.train_config(Protocol::Differentiator, None)?;
            let spec = builtin_spec_by_name(&m.differentiator_net)?;
            let (ckpt, report) = train_differentiator(spec, &generator.model, &data.train, &data.nonrail, &tcfg)?;
            written.push(save_stage(out, "differentiator", &ckpt, report)?);
        }
        Method::Recon(m) => {
            if m.generator_checkpoint.is_none() {
                let (ckpt, report) = train_generator_stage(cfg, &data, &m.generator_net, m.gen_loss)?;
                written.push(save_stage(out, "generator", &ckpt, report)?);
            }
        }
    }
    Ok(written)
}

/// Label identifying a method in reports, e.g. `global:mse:diff13`.
pub fn method_label(method: &Method) -> String {
    match method {
        Method::Local(m) => format!("local:{}", m.net),
        Method::Global(m) => format!("global:{}:{}", m.gen_loss.as_str(), m.differentiator_net),
        Method::Recon(m) => format!("recon:{}:{}", m.gen_loss.as_str(), serde_json::to_value(m.metric).expect("enum").as_str().unwrap_or("?")),
    }
}

/// Score maps of every evaluation scene under the configured method.
/// `checkpoint` replaces the method's main checkpoint: the local network,
/// the differentiator, or the reconstruction generator.
pub fn score_eval_set(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>, scenes: &[RailwayScene]) -> Result<Vec<ClassificationMap>> {
    let ckpts = checkpoint_dir(out);
    let pick = |explicit: Option<&Path>, configured: &Option<PathBuf>, role: &str| -> PathBuf {
        explicit.map(Path::to_path_buf).or_else(|| configured.clone()).unwrap_or_else(|| ckpts.join(format!("{role}.ckpt")))
    };
    match cfg.method()? {
        Method::Local(m) => {
            let ckpt = load_checkpoint(&pick(checkpoint, &m.checkpoint, "local"), &m.net)?;
            scenes.iter().map(|s| score_map_local(&ckpt.model, s)).collect()
        }
        Method::Global(m) => {
            let g = load_checkpoint(&pick(None, &m.generator_checkpoint, "generator"), &m.generator_net)?;
            let d = load_checkpoint(&pick(checkpoint, &m.differentiator_checkpoint, "differentiator"), &m.differentiator_net)?;
            scenes.iter().map(|s| score_map_global(&g.model, &d.model, s)).collect()
        }
        Method::Recon(m) => {
            let g = load_checkpoint(&pick(checkpoint, &m.generator_checkpoint, "generator"), &m.generator_net)?;
            scenes.iter().map(|s| reconstruction_error_map(&g.model, s, m.metric, &cfg.loss)).collect()
        }
    }
}

/// Human-readable summary of a metrics report.
pub fn report_text(report: &MetricsReport) -> String {
    let auroc = report.auroc.map_or("-".to_string(), |a| format!("{a:.4}"));
    format!(
        "method     {}\nAUROC      {}\nprecision  {:.4}\nrecall     {:.4}\nF1         {:.4}\ntheta      {}\nK_d        {}\nimages     {}\n",
        report.method_label,
        auroc,
        report.precision,
        report.recall,
        report.f1,
        report.best_params.theta,
        report.best_params.density_size,
        report.per_image.len()
    )
}

/// Scores the evaluation set, runs the grid search and writes
/// `report.json` and `report.txt` (plus score maps when requested).
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>) -> Result<MetricsReport> {
    let method = cfg.method()?;
    let data = load_data(cfg)?;
    let maps = score_eval_set(cfg, out, checkpoint, &data.eval)?;
    if cfg.export_maps {
        for m in &maps {
            write_score_map(m, &out.join("maps"))?;
        }
    }
    let annotations: Vec<_> = data.eval.iter().map(|s| s.obstacle.as_ref()).collect();
    let report = grid_search(&maps, &annotations, &cfg.grid, &method_label(&method))?;
    write_json(&out.join(REPORT_JSON), &report)?;
    write_atomic(&out.join(REPORT_TEXT), report_text(&report).as_bytes())?;
    Ok(report)
}

/// Trains and evaluates every `(K_p, method)` of the ablation block and
/// writes `ablation.csv` and `ablation.txt`. Each generator is trained once
/// and shared across patch sizes.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<AblationTable> {
    let ab = &cfg.ablation;
    let global = ab.methods.contains(&AblationMethod::Global);
    if ab.patch_sizes.is_empty() || ab.methods.is_empty() || (global && ab.gen_losses.is_empty()) {
        return Err(Error::Config("ablation needs at least one patch size, method, and (for global) generator loss".into()));
    }
    let data = load_data(cfg)?;
    let dir = out.join("ablation");
    let annotations: Vec<_> = data.eval.iter().map(|s| s.obstacle.as_ref()).collect();
    let mut generators = Vec::new();
    if global {
        for &loss in &ab.gen_losses {
            let (ckpt, report) = train_generator_stage(cfg, &data, "generator_g", loss)?;
            save_stage(&dir, &format!("generator_{}", loss.as_str()), &ckpt, report)?;
            generators.push((loss, ckpt));
        }
    }
    let mut rows = Vec::new();
    let mut record = |name: &str, kp: usize, loss: Option<GenLoss>, label: String, maps: Vec<ClassificationMap>| -> Result<()> {
        let report = grid_search(&maps, &annotations, &cfg.grid, &label)?;
        write_json(&dir.join(format!("{}.json", label.replace(':', "_"))), &report)?;
        rows.push(AblationRow::from_report(name, Some(kp), loss.map(GenLoss::as_str), &report));
        Ok(())
    };
    for &kp in &ab.patch_sizes {
        if ab.methods.contains(&AblationMethod::Local) {
            let net = format!("patchclass{kp}");
            let tcfg = cfg.train_config(Protocol::Local, None)?;
            let (ckpt, report) = train_local(builtin_spec_by_name(&net)?, &data.train, &data.nonrail, &tcfg)?;
            save_stage(&dir, &net, &ckpt, report)?;
            let maps = data.eval.iter().map(|s| score_map_local(&ckpt.model, s)).collect::<Result<Vec<_>>>()?;
            record("PatchClass", kp, None, format!("local:{net}"), maps)?;
        }
        for (loss, g) in &generators {
            let net = format!("diff{kp}");
            let tcfg = cfg.train_config(Protocol::Differentiator, None)?;
            let (ckpt, report) = train_differentiator(builtin_spec_by_name(&net)?, &g.model, &data.train, &data.nonrail, &tcfg)?;
            save_stage(&dir, &format!("{net}_{}", loss.as_str()), &ckpt, report)?;
            let maps = data.eval.iter().map(|s| score_map_global(&g.model, &ckpt.model, s)).collect::<Result<Vec<_>>>()?;
            record("PatchDiff", kp, Some(*loss), format!("global:{}:{net}", loss.as_str()), maps)?;
        }
    }
    let table = ablation_report(&rows)?;
    write_atomic(&out.join(ABLATION_CSV), table.csv.as_bytes())?;
    write_atomic(&out.join(ABLATION_TEXT), table.text.as_bytes())?;
    Ok(table)
}

/// Re-renders the reports found in `out` as text and writes `summary.txt`.
pub fn cmd_report(out: &Path) -> Result<String> {
    let mut text = String::new();
    let report_path = out.join(REPORT_JSON);
    if report_path.exists() {
        let raw = fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
        let report: MetricsReport = serde_json::from_str(&raw)?;
        text.push_str(&report_text(&report));
    }
    let ablation_path = out.join(ABLATION_CSV);
    if ablation_path.exists() {
        let raw = fs::read_to_string(&ablation_path).map_err(|e| Error::io(&ablation_path, e))?;
        let rows = crate::evalkit::parse_ablation_csv(&raw)?;
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&ablation_report(&rows)?.text);
    }
    if text.is_empty() {
        return Err(Error::Dataset { path: out.into(), reason: format!("no {REPORT_JSON} or {ABLATION_CSV} to report on") });
    }
    write_atomic(&out.join("summary.txt"), text.as_bytes())?;
    Ok(text)
}
