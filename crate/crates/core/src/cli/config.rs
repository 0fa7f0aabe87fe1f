use std::fs;
use std::path::Path;

use crate::data::{GroundTruthMap, SceneTask, SyntheticSceneConfig};
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, OracleConfig};
use crate::train::TrainConfig;

/// Dataset keys understood in addition to [`TrainConfig::KEYS`].
/// `image_size` is shared by the scene and the model.
pub const DATA_KEYS: &[&str] = &["frames", "task", "gt_map", "smoothness", "speed", "texture_seed", "data_seed"];

pub const EVAL_KEYS: &[&str] = &["oracle_steps", "oracle_batch", "oracle_lr", "oracle_width", "oracle_seed", "diversity_sample"];

/// Every setting a subcommand may read, resolved from built-in defaults, an
/// optional `key=value` file and command-line overrides, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scene: SyntheticSceneConfig,
    /// Seed of the X stream; the Y stream uses `data_seed + 1`.
    pub data_seed: u64,
    pub oracle: OracleConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            scene: SyntheticSceneConfig {
                image_size: train.model.image_size,
                ..Default::default()
            },
            train,
            data_seed: 1,
            oracle: OracleConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn keys() -> Vec<&'static str> {
        TrainConfig::KEYS.iter().chain(DATA_KEYS).chain(EVAL_KEYS).copied().collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "image_size" => {
                self.train.set(key, value)?;
                self.scene.image_size = self.train.model.image_size;
            }
            "frames" => self.scene.length = parse(key, value)?,
            "task" => {
                self.scene.task = SceneTask::parse(value.trim())
                    .ok_or_else(|| Error::Config(format!("task: unknown value {value:?}")))?
            }
            "gt_map" => self.scene.gt_map = GroundTruthMap::parse(value.trim())?,
            "smoothness" => self.scene.smoothness = parse(key, value)?,
            "speed" => self.scene.speed = parse(key, value)?,
            "texture_seed" => self.scene.texture_seed = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "oracle_steps" => self.oracle.steps = parse(key, value)?,
            "oracle_batch" => self.oracle.batch_size = parse(key, value)?,
            "oracle_lr" => self.oracle.lr = parse(key, value)?,
            "oracle_width" => self.oracle.base_width = parse(key, value)?,
            "oracle_seed" => self.oracle.seed = parse(key, value)?,
            "diversity_sample" => self.eval.diversity_sample = parse(key, value)?,
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    /// Current values of every key, in [`Self::keys`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut v = self.train.entries();
        v.extend(self.data_entries().into_iter().filter(|(k, _)| *k != "image_size"));
        v.extend([
            ("oracle_steps", self.oracle.steps.to_string()),
            ("oracle_batch", self.oracle.batch_size.to_string()),
            ("oracle_lr", self.oracle.lr.to_string()),
            ("oracle_width", self.oracle.base_width.to_string()),
            ("oracle_seed", self.oracle.seed.to_string()),
            ("diversity_sample", self.eval.diversity_sample.to_string()),
        ]);
        v
    }

    /// The dataset-defining subset, as recorded in a dataset manifest.
    pub fn data_entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.scene;
        vec![
            ("image_size", s.image_size.to_string()),
            ("frames", s.length.to_string()),
            ("task", s.task.tag().to_string()),
            ("gt_map", s.gt_map.describe()),
            ("smoothness", s.smoothness.to_string()),
            ("speed", s.speed.to_string()),
            ("texture_seed", s.texture_seed.to_string()),
            ("data_seed", self.data_seed.to_string()),
        ]
    }

    /// Applies a `key=value` text; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Defaults, then `file`, then `overrides`; validated before return.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let cfg = Self::layered(file, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// As [`Self::resolve`] without the final validation.
    pub fn layered(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.scene.validate()?;
        if self.eval.diversity_sample < 2 {
            return Err(Error::Config(format!(
                "diversity_sample must be at least 2, got {}",
                self.eval.diversity_sample
            )));
        }
        if self.oracle.steps == 0 || self.oracle.batch_size == 0 || self.oracle.base_width == 0 {
            return Err(Error::Config("oracle steps, batch and width must be positive".into()));
        }
        if !(self.oracle.lr.is_finite() && self.oracle.lr > 0.0) {
            return Err(Error::Config(format!("oracle_lr must be positive, got {}", self.oracle.lr)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A parseable value for `key` different from `current`.
    fn alternative(key: &str, current: &str) -> String {
        let cycle = |opts: &[&str]| {
            let i = opts.iter().position(|o| *o == current).map_or(0, |i| i + 1);
            opts[i % opts.len()].to_string()
        };
        match key {
            "adversarial" => cycle(&["log", "least_squares"]),
            "loss" => cycle(&["cycle", "recycle", "combined"]),
            "distance" => cycle(&["l1", "l2"]),
            "task" => cycle(&["images", "labels"]),
            "gt_map" => cycle(&["2,0,1;mirror", "1,2,0;plain", "0,2,1;mirror"]),
            _ => match current.parse::<u64>() {
                Ok(v) => (v + 3).to_string(),
                Err(_) => (current.parse::<f64>().unwrap() * 0.5 + 0.125).to_string(),
            },
        }
    }

    fn lookup(cfg: &RunConfig, key: &str) -> String {
        cfg.entries().into_iter().find(|(k, _)| *k == key).unwrap().1
    }

    #[test]
    fn every_key_round_trips() {
        let keys = RunConfig::keys();
        let cfg = RunConfig::default();
        let entries = cfg.entries();
        assert_eq!(entries.iter().map(|(k, _)| *k).collect::<Vec<_>>(), keys);
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), "t").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn precedence_per_field() {
        let dir = tempfile::tempdir().unwrap();
        let defaults = RunConfig::default();
        for key in RunConfig::keys() {
            let d = lookup(&defaults, key);
            let file_value = alternative(key, &d);
            let cli_value = alternative(key, &file_value);
            assert!(d != file_value && file_value != cli_value, "{key}");
            let path = dir.path().join(format!("{key}.cfg"));
            fs::write(&path, format!("# test\n{key}={file_value}\n")).unwrap();

            let plain = RunConfig::layered(None, &[]).unwrap();
            assert_eq!(lookup(&plain, key), d, "{key}: default");
            let from_file = RunConfig::layered(Some(&path), &[]).unwrap();
            assert_eq!(lookup(&from_file, key), file_value, "{key}: file over default");
            let from_cli = RunConfig::layered(Some(&path), &[(key.to_string(), cli_value.clone())]).unwrap();
            assert_eq!(lookup(&from_cli, key), cli_value, "{key}: flag over file");
            let cli_only = RunConfig::layered(None, &[(key.to_string(), cli_value.clone())]).unwrap();
            assert_eq!(lookup(&cli_only, key), cli_value, "{key}: flag over default");
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("stepz=3\n", "f").unwrap_err().to_string().contains("f:1"));
        assert!(c.apply_text("steps\n", "f").is_err());
        assert!(RunConfig::resolve(None, &[("frames".into(), "2".into())]).is_err());
        assert!(RunConfig::resolve(None, &[("diversity_sample".into(), "1".into())]).is_err());
        assert!(RunConfig::resolve(None, &[("loss".into(), "both".into())]).is_err());
    }

    #[test]
    fn image_size_is_shared() {
        let c = RunConfig::resolve(None, &[("image_size".into(), "64".into())]).unwrap();
        assert_eq!((c.scene.image_size, c.train.model.image_size), (64, 64));
    }
}
