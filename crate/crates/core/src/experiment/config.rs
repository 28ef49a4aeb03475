use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::evalkit::GridSpec;
use crate::forge::{derive_seed, AugmentationParams};
use crate::localize::ReconMetric;
use crate::losses::LossConfig;
use crate::netspec::builtin_spec_by_name;
use crate::trainer::{GenLoss, Protocol, TrainConfig};

/// Seed offsets for the stages of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    TrainData = 1,
    EvalData = 2,
    NonrailData = 3,
    Composite = 4,
    Local = 10,
    Generator = 11,
    Differentiator = 12,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyData {
    pub size: usize,
    pub train_scenes: usize,
    /// Evaluation scenes that carry an obstacle.
    pub eval_scenes: usize,
    /// Additional obstacle-free evaluation scenes.
    pub eval_clean_scenes: usize,
    pub nonrail_images: usize,
    /// Scenes cycle through 1..=max_rails tracks.
    pub max_rails: usize,
}

impl Default for ToyData {
    fn default() -> Self {
        ToyData { size: 64, train_scenes: 100, eval_scenes: 100, eval_clean_scenes: 0, nonrail_images: 100, max_rails: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirData {
    pub train: PathBuf,
    pub eval: PathBuf,
    pub nonrail: PathBuf,
}

/// Clean datasets plus object cutouts; the evaluation set is made by
/// pasting one object into every scene of `eval_clean`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeData {
    pub train: PathBuf,
    pub eval_clean: PathBuf,
    pub objects: PathBuf,
    pub nonrail: PathBuf,
    #[serde(default)]
    pub augmentation: AugmentationParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Toy(ToyData),
    Dir(DirData),
    Composite(CompositeData),
}

fn patchclass13() -> String {
    "patchclass13".into()
}

fn diff13() -> String {
    "diff13".into()
}

fn generator_g() -> String {
    "generator_g".into()
}

fn mse() -> GenLoss {
    GenLoss::Mse
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalMethod {
    #[serde(default = "patchclass13")]
    pub net: String,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalMethod {
    #[serde(default = "mse")]
    pub gen_loss: GenLoss,
    #[serde(default = "generator_g")]
    pub generator_net: String,
    #[serde(default = "diff13")]
    pub differentiator_net: String,
    /// Skips generator training and uses this checkpoint.
    #[serde(default)]
    pub generator_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub differentiator_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconMethod {
    #[serde(default = "mse")]
    pub gen_loss: GenLoss,
    #[serde(default = "recon_mse")]
    pub metric: ReconMetric,
    #[serde(default = "generator_g")]
    pub generator_net: String,
    #[serde(default)]
    pub generator_checkpoint: Option<PathBuf>,
}

fn recon_mse() -> ReconMetric {
    ReconMetric::Mse
}

#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Local(LocalMethod),
    Global(GlobalMethod),
    Recon(ReconMethod),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMethod {
    Local,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub patch_sizes: Vec<usize>,
    pub methods: Vec<AblationMethod>,
    /// Generator losses paired with the global method, one row each.
    pub gen_losses: Vec<GenLoss>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { patch_sizes: vec![13, 21, 29, 35, 51], methods: vec![AblationMethod::Local, AblationMethod::Global], gen_losses: vec![GenLoss::Mse] }
    }
}

/// One experiment: where the data comes from, which method to run, and how
/// to train and evaluate it. At most one of `local`, `global` and `recon`
/// may be present; `train` and `eval` need exactly one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub data: DataSource,
    #[serde(default)]
    pub local: Option<LocalMethod>,
    #[serde(default)]
    pub global: Option<GlobalMethod>,
    #[serde(default)]
    pub recon: Option<ReconMethod>,
    /// Overrides for the local or differentiator training settings.
    #[serde(default)]
    pub train: Map<String, Value>,
    /// Overrides for the generator training settings, on top of the preset
    /// for the chosen generator loss.
    #[serde(default)]
    pub generator_train: Map<String, Value>,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub ablation: AblationConfig,
    /// Write every evaluation score map under `maps/`.
    #[serde(default)]
    pub export_maps: bool,
}

const RESERVED_TRAIN_KEYS: [&str; 3] = ["protocol", "seed", "loss"];

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix_opt(&mut self.out);
        match &mut self.data {
            DataSource::Toy(_) => {}
            DataSource::Dir(d) => [&mut d.train, &mut d.eval, &mut d.nonrail].into_iter().for_each(fix),
            DataSource::Composite(d) => [&mut d.train, &mut d.eval_clean, &mut d.objects, &mut d.nonrail].into_iter().for_each(fix),
        }
        if let Some(m) = &mut self.local {
            fix_opt(&mut m.checkpoint);
        }
        if let Some(m) = &mut self.global {
            fix_opt(&mut m.generator_checkpoint);
            fix_opt(&mut m.differentiator_checkpoint);
        }
        if let Some(m) = &mut self.recon {
            fix_opt(&mut m.generator_checkpoint);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = [self.local.is_some(), self.global.is_some(), self.recon.is_some()];
        if blocks.iter().filter(|&&b| b).count() > 1 {
            return Err(Error::Config("only one of `local`, `global`, `recon` may be given".into()));
        }
        if let DataSource::Toy(t) = &self.data {
            if t.size < 32 || t.max_rails == 0 {
                return Err(Error::Config("toy data needs size >= 32 and max_rails >= 1".into()));
            }
        }
        if let DataSource::Composite(c) = &self.data {
            c.augmentation.validate()?;
        }
        self.loss.validate()?;
        self.grid.validate()?;
        let nets: Vec<String> = match self.method() {
            Ok(Method::Local(m)) => vec![m.net],
            Ok(Method::Global(m)) => {
                self.train_config(Protocol::Generator, Some(m.gen_loss))?;
                vec![m.generator_net, m.differentiator_net]
            }
            Ok(Method::Recon(m)) => {
                self.train_config(Protocol::Generator, Some(m.gen_loss))?;
                vec![m.generator_net]
            }
            Err(_) => Vec::new(),
        };
        for net in &nets {
            builtin_spec_by_name(net)?;
        }
        self.train_config(Protocol::Local, None)?;
        for &loss in &self.ablation.gen_losses {
            self.train_config(Protocol::Generator, Some(loss))?;
        }
        Ok(())
    }

    pub fn method(&self) -> Result<Method> {
        match (&self.local, &self.global, &self.recon) {
            (Some(m), None, None) => Ok(Method::Local(m.clone())),
            (None, Some(m), None) => Ok(Method::Global(m.clone())),
            (None, None, Some(m)) => Ok(Method::Recon(m.clone())),
            (None, None, None) => Err(Error::Config("no method block: add one of `local`, `global`, `recon`".into())),
            _ => Err(Error::Config("only one of `local`, `global`, `recon` may be given".into())),
        }
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, stage as u64)
    }

    /// Training settings for one protocol: the protocol's preset, then the
    /// matching override block, then the experiment's loss settings and
    /// derived seed.
    pub fn train_config(&self, protocol: Protocol, gen_loss: Option<GenLoss>) -> Result<TrainConfig> {
        let (preset, overrides, block, stage) = match protocol {
            Protocol::Local => (TrainConfig::default(), &self.train, "train", Stage::Local),
            Protocol::Differentiator => (TrainConfig::differentiator(), &self.train, "train", Stage::Differentiator),
            Protocol::Generator => {
                (TrainConfig::generator(gen_loss.unwrap_or(GenLoss::Mse)), &self.generator_train, "generator_train", Stage::Generator)
            }
        };
        if let Some(key) = RESERVED_TRAIN_KEYS.iter().find(|k| overrides.contains_key(**k)) {
            return Err(Error::Config(format!("`{block}.{key}` is set by the experiment, remove it")));
        }
        let mut value = serde_json::to_value(&preset)?;
        let obj = value.as_object_mut().expect("struct serializes to an object");
        for (k, v) in overrides {
            obj.insert(k.clone(), v.clone());
        }
        let mut cfg: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("{block}: {e}")))?;
        cfg.seed = self.stage_seed(stage);
        cfg.loss = self.loss.clone();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LOCAL: &str = r#"{"data": {"toy": {"size": 48}}, "local": {}, "train": {"epochs": 2}}"#;

    #[test]
    fn minimal_local_config() {
        let cfg = ExperimentConfig::from_json(LOCAL).unwrap();
        assert_eq!(cfg.method().unwrap(), Method::Local(LocalMethod { net: "patchclass13".into(), checkpoint: None }));
        let t = cfg.train_config(Protocol::Local, None).unwrap();
        assert_eq!(t.epochs, 2);
        assert_eq!(t.lr, 0.1);
        assert_eq!(t.seed, derive_seed(0, Stage::Local as u64));
    }

    #[test]
    fn two_method_blocks_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"data": {"toy": {}}, "local": {}, "global": {}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("only one of"), "{msg}");
        assert_eq!(msg.lines().count(), 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"data": {"toy": {}}, "local": {}, "sed": 1}"#,
            r#"{"data": {"toy": {"sise": 64}}}"#,
            r#"{"data": {"toy": {}}, "local": {"nett": "x"}}"#,
            r#"{"data": {"toy": {}}, "train": {"epoch": 3}}"#,
            r#"{"data": {"toy": {}}, "train": {"seed": 3}}"#,
            r#"{"data": {"toy": {}}, "local": {"net": "patchclass14"}}"#,
        ] {
            assert!(ExperimentConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn generator_preset_follows_loss() {
        let cfg = ExperimentConfig::from_json(r#"{"data": {"toy": {}}, "global": {"gen_loss": "gan"}, "generator_train": {"epochs": 3}}"#)
            .unwrap();
        let g = cfg.train_config(Protocol::Generator, Some(GenLoss::Gan)).unwrap();
        assert_eq!((g.lr, g.momentum_or_beta1, g.epochs, g.gen_loss), (1e-4, 0.5, 3, GenLoss::Gan));
        let d = cfg.train_config(Protocol::Differentiator, None).unwrap();
        assert_eq!(d.protocol, Protocol::Differentiator);
        assert_ne!(d.seed, g.seed);
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.json");
        std::fs::write(&path, r#"{"data": {"dir": {"train": "a", "eval": "/abs/b", "nonrail": "c"}}, "out": "runs"}"#).unwrap();
        let cfg = ExperimentConfig::from_file(&path).unwrap();
        let DataSource::Dir(d) = &cfg.data else { panic!() };
        assert_eq!(d.train, dir.path().join("a"));
        assert_eq!(d.eval, PathBuf::from("/abs/b"));
        assert_eq!(cfg.out, Some(dir.path().join("runs")));
    }
}
