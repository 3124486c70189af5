use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::auxseg::{AuxConfig, AuxTrainConfig};
use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::metrics::EvalConfig;
use crate::model::ModelConfig;
use crate::training::{PostConfig, TrainConfig};

/// Everything a run needs; files and flags overlay the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the data split and, unless overridden per stage, every stage.
    pub seed: u64,
    /// Worker threads; `None` leaves the choice to the runtime.
    pub threads: Option<usize>,
    /// Slides produced by `gen-data`.
    pub slides: usize,
    /// Train/val/test ratios.
    pub split: [f64; 3],
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub aux: AuxConfig,
    pub aux_train: AuxTrainConfig,
    pub post: PostConfig,
    pub eval: EvalConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            threads: None,
            slides: 40,
            split: [0.6, 0.2, 0.2],
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            aux: AuxConfig::default(),
            aux_train: AuxTrainConfig::default(),
            post: PostConfig::default(),
            eval: EvalConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with a TOML or JSON file (chosen by extension).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing {
                what: "config file",
                path: path.to_path_buf(),
            },
            _ => Error::io(path, e),
        })?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        let parsed = match ext.as_str() {
            "toml" => toml::from_str::<RunConfig>(&text).map_err(|e| e.to_string()),
            "json" => serde_json::from_str::<RunConfig>(&text).map_err(|e| e.to_string()),
            _ => return Err(Error::Config(format!("config file {} must end in .toml or .json", path.display()))),
        };
        parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `seed` to the run and to every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.generator.seed = seed;
        self.train.seed = seed;
        self.aux_train.seed = seed;
        self.post.seed = seed;
    }

    /// Cross-section checks, run before any compute.
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.aux.validate()?;
        self.post.validate()?;
        self.eval.validate()?;
        if self.slides == 0 {
            return Err(Error::Config("slides must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        let c = self.model.categories;
        if self.eval.categories != c || self.aux.categories != c {
            return Err(Error::Config(format!(
                "category counts disagree: model {c}, eval {}, aux {}",
                self.eval.categories, self.aux.categories
            )));
        }
        if self.aux.d_m != self.model.d_m {
            return Err(Error::Config(format!("morphology width: model {} vs aux {}", self.model.d_m, self.aux.d_m)));
        }
        if (self.aux.patch_h, self.aux.patch_w) != (self.model.patch_h, self.model.patch_w) {
            return Err(Error::Config("aux and detector window sizes differ".into()));
        }
        if !(self.inference.lfov_factor >= 0.0 && self.inference.lfov_factor.is_finite()) {
            return Err(Error::Config(format!("lfov_factor {} must be non-negative", self.inference.lfov_factor)));
        }
        if let Some(t) = self.inference.theta_det {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("theta_det {t} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.resolved.json");
        std::fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_overlays_defaults() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n[model]\ndelta = 2\n[train]\nepochs = 5\n").unwrap();
        let c = RunConfig::from_file(&p).unwrap();
        assert_eq!((c.seed, c.model.delta, c.train.epochs), (3, 2, 5));
        assert_eq!(c.model.s, ModelConfig::default().s);
    }

    #[test]
    fn json_and_snapshot_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.set_seed(9);
        c.write_snapshot(tmp.path()).unwrap();
        let back = RunConfig::from_file(&tmp.path().join("config.resolved.json")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_conflicts_are_config_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("c.json");
        std::fs::write(&p, r#"{"sed": 1}"#).unwrap();
        assert!(RunConfig::from_file(&p).unwrap_err().is_config());
        let mut c = RunConfig::default();
        c.model.s = 9;
        assert!(c.validate().unwrap_err().is_config());
        let mut c = RunConfig::default();
        c.eval.categories = 2;
        assert!(c.validate().unwrap_err().is_config());
    }
}
