//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. [`RunConfig::to_text`] writes every key with its current value.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::synthetic::Family;
use crate::error::{Error, Result};
use crate::latent::{ClassifierConfig, MatchMode};
use crate::model::ModelConfig;
use crate::partseg::PartNetConfig;
use crate::trainer::TrainConfig;

/// Synthetic dataset settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub families: Vec<Family>,
    pub per_family: usize,
    /// Extra shapes per family drawn from an independent seed stream.
    pub held_out_per_family: usize,
    pub jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            families: Family::ALL.to_vec(),
            per_family: 1,
            held_out_per_family: 0,
            jitter: 0.005,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub threads: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub partnet: PartNetConfig,
    pub filter_k: usize,
    pub latent_match: MatchMode,
    pub classifier: ClassifierConfig,
    pub data: DataConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            threads: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            partnet: PartNetConfig::default(),
            filter_k: 9,
            latent_match: MatchMode::default(),
            classifier: ClassifierConfig::default(),
            data: DataConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("`{key}` cannot take `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!(
            "`{key}` expects true or false, got `{v}`"
        ))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Model keys and values, also stored in checkpoint headers.
pub fn model_meta(m: &ModelConfig) -> BTreeMap<String, String> {
    let e = &m.encoder;
    let r = &m.routing;
    let d = &m.decoder;
    [
        ("encoder.n_points", e.n_points.to_string()),
        ("encoder.point_dim", e.point_dim.to_string()),
        ("encoder.mlp_widths", list(&e.mlp_widths)),
        ("encoder.branch_count", e.branch_count.to_string()),
        ("encoder.branch_width", e.branch_width.to_string()),
        ("routing.latent_count", r.latent_count.to_string()),
        ("routing.latent_dim", r.latent_dim.to_string()),
        ("routing.iterations", r.iterations.to_string()),
        ("routing.mode", r.mode.as_str().to_string()),
        ("decoder.replicas", d.replicas.to_string()),
        ("decoder.mlp_widths", list(&d.mlp_widths)),
        ("decoder.grid_mode", d.grid_mode.as_str().to_string()),
        ("decoder.grid_seed", d.grid_seed.to_string()),
        ("batchnorm.momentum", m.batchnorm.momentum.to_string()),
        ("batchnorm.epsilon", m.batchnorm.epsilon.to_string()),
        ("loss.chamfer", m.chamfer.as_str().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn set_model(m: &mut ModelConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "encoder.n_points" => m.encoder.n_points = num(key, v)?,
        "encoder.point_dim" => m.encoder.point_dim = num(key, v)?,
        "encoder.mlp_widths" => m.encoder.mlp_widths = parse_list(key, v)?,
        "encoder.branch_count" => m.encoder.branch_count = num(key, v)?,
        "encoder.branch_width" => m.encoder.branch_width = num(key, v)?,
        "routing.latent_count" => m.routing.latent_count = num(key, v)?,
        "routing.latent_dim" => m.routing.latent_dim = num(key, v)?,
        "routing.iterations" => m.routing.iterations = num(key, v)?,
        "routing.mode" => m.routing.mode = v.parse()?,
        "decoder.replicas" => m.decoder.replicas = num(key, v)?,
        "decoder.mlp_widths" => m.decoder.mlp_widths = parse_list(key, v)?,
        "decoder.grid_mode" => m.decoder.grid_mode = v.parse()?,
        "decoder.grid_seed" => m.decoder.grid_seed = num(key, v)?,
        "batchnorm.momentum" => m.batchnorm.momentum = num(key, v)?,
        "batchnorm.epsilon" => m.batchnorm.epsilon = num(key, v)?,
        "loss.chamfer" => m.chamfer = v.parse()?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Model configuration recorded in a checkpoint header.
pub fn model_from_meta(meta: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    for key in model_meta(&m).keys() {
        let v = meta
            .get(key)
            .ok_or_else(|| Error::Truncated(format!("header lacks `{key}`")))?;
        set_model(&mut m, key, v)?;
    }
    m.validate()?;
    Ok(m)
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let p = &self.partnet;
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("deterministic".into(), self.deterministic.to_string()),
            ("threads".into(), self.threads.to_string()),
        ];
        out.extend(model_meta(&self.model));
        let rest: [(&str, String); 27] = [
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.learning_rate", t.adam.learning_rate.to_string()),
            ("train.beta1", t.adam.beta1.to_string()),
            ("train.beta2", t.adam.beta2.to_string()),
            ("train.epsilon", t.adam.epsilon.to_string()),
            ("train.lr_decay", t.lr_decay.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.eval_grid_seed", t.eval_grid_seed.to_string()),
            ("partnet.hidden_widths", list(&p.hidden_widths)),
            ("partnet.learning_rate", p.learning_rate.to_string()),
            ("partnet.epochs", p.epochs.to_string()),
            ("segment.filter_k", self.filter_k.to_string()),
            ("latent.match", self.latent_match.as_str().to_string()),
            ("classifier.epochs", self.classifier.epochs.to_string()),
            ("classifier.l2", self.classifier.l2.to_string()),
            ("classifier.step", self.classifier.step.to_string()),
            (
                "data.families",
                self.data
                    .families
                    .iter()
                    .map(|f| f.as_str())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("data.per_family", self.data.per_family.to_string()),
            (
                "data.held_out_per_family",
                self.data.held_out_per_family.to_string(),
            ),
            ("data.jitter", self.data.jitter.to_string()),
            ("paths.data", path(&self.paths.data)),
            ("paths.checkpoint", path(&self.paths.checkpoint)),
            ("paths.checkpoint_dir", path(&t.checkpoint_dir)),
            ("paths.out", path(&self.paths.out)),
            ("paths.log", path(&self.paths.log)),
        ];
        out.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if set_model(&mut self.model, key, v)? {
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "seed" => self.seed = num(key, v)?,
            "deterministic" => self.deterministic = flag(key, v)?,
            "threads" => self.threads = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.learning_rate" => t.adam.learning_rate = num(key, v)?,
            "train.beta1" => t.adam.beta1 = num(key, v)?,
            "train.beta2" => t.adam.beta2 = num(key, v)?,
            "train.epsilon" => t.adam.epsilon = num(key, v)?,
            "train.lr_decay" => t.lr_decay = num(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = num(key, v)?,
            "train.eval_every" => t.eval_every = num(key, v)?,
            "train.eval_grid_seed" => t.eval_grid_seed = num(key, v)?,
            "partnet.hidden_widths" => self.partnet.hidden_widths = parse_list(key, v)?,
            "partnet.learning_rate" => self.partnet.learning_rate = num(key, v)?,
            "partnet.epochs" => self.partnet.epochs = num(key, v)?,
            "segment.filter_k" => self.filter_k = num(key, v)?,
            "latent.match" => self.latent_match = v.parse()?,
            "classifier.epochs" => self.classifier.epochs = num(key, v)?,
            "classifier.l2" => self.classifier.l2 = num(key, v)?,
            "classifier.step" => self.classifier.step = num(key, v)?,
            "data.families" => {
                self.data.families = v
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<_>>()?;
            }
            "data.per_family" => self.data.per_family = num(key, v)?,
            "data.held_out_per_family" => self.data.held_out_per_family = num(key, v)?,
            "data.jitter" => self.data.jitter = num(key, v)?,
            "paths.data" => self.paths.data = opt_path(v),
            "paths.checkpoint" => self.paths.checkpoint = opt_path(v),
            "paths.checkpoint_dir" => t.checkpoint_dir = opt_path(v),
            "paths.out" => self.paths.out = opt_path(v),
            "paths.log" => self.paths.log = opt_path(v),
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected `key = value`".into()))?;
            let key = key.trim();
            if let Some(first) = seen.insert(key.to_string(), i + 1) {
                return Err(parse_err(format!("`{key}` already set on line {first}")));
            }
            self.set(key, value.trim())
                .map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, path)
    }

    /// Copies the run-wide seed and determinism flag into the sub-configs
    /// and checks every section.
    pub fn resolved(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.train.deterministic = self.deterministic;
        self.partnet.seed = super::derive_seed(self.seed, 7);
        if self.threads == 0 {
            return Err(Error::config("threads must be at least 1"));
        }
        if self.data.families.is_empty() {
            return Err(Error::config("data.families is empty"));
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_covers_every_key() {
        let mut cfg = RunConfig::default();
        cfg.set("routing.mode", "conv-ablation").unwrap();
        cfg.set("encoder.mlp_widths", "3,32,64").unwrap();
        cfg.set("paths.out", "runs/a").unwrap();
        cfg.set("data.families", "barbell,torus-on-box").unwrap();
        let text = cfg.to_text();
        assert_eq!(RunConfig::from_text(&text, Path::new("x")).unwrap(), cfg);
        let defaults = RunConfig::default();
        for (k, v) in defaults.entries() {
            let mut c = RunConfig::default();
            c.set(&k, &v).unwrap();
            assert_eq!(c, defaults, "{k}");
        }
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::from_text("seed = 3\n\n# note\nbogus = 1\n", Path::new("run.cfg"))
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
        let err = RunConfig::from_text("seed = 3\nseed = 4\n", Path::new("run.cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(RunConfig::from_text("train.epochs = many\n", Path::new("r")).is_err());
        let bad = RunConfig {
            threads: 0,
            ..RunConfig::default()
        };
        assert!(bad.resolved().is_err());
    }

    #[test]
    fn model_meta_round_trip() {
        let mut m = ModelConfig::default();
        m.encoder.branch_width = 128;
        m.decoder.grid_seed = 9;
        assert_eq!(model_from_meta(&model_meta(&m)).unwrap(), m);
        let mut partial = model_meta(&m);
        partial.remove("routing.iterations");
        assert!(model_from_meta(&partial).is_err());
    }
}
