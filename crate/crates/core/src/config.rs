//! Run configuration: flat `key = value` text, `#` starts a comment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sparse::CorpusFormat;
use crate::train::TrainConfig;

/// Training hyperparameters plus data locations and evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_data: Option<PathBuf>,
    /// Held-out documents, or the fold-in part of held-out users when
    /// `valid_targets` is set.
    pub valid_data: Option<PathBuf>,
    pub valid_targets: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub test_targets: Option<PathBuf>,
    pub data_format: CorpusFormat,
    /// Vocabulary size; inferred from the data when absent.
    pub vocab_size: Option<usize>,
    pub out_dir: PathBuf,
    /// Validate every this many epochs; 0 disables.
    pub eval_every: usize,
    /// Write `last.ckpt` every this many epochs; 0 writes only at the end.
    pub checkpoint_every: usize,
    pub ranking_n: Vec<usize>,
    /// Refinement steps used for ψ* at evaluation time.
    pub eval_inner_steps: usize,
    /// Stop after this many validations without improvement; 0 disables.
    pub patience: usize,
    pub exclude_fold_in: bool,
    pub rare_frac: f64,
    /// Worker threads; 0 uses the rayon default.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            train_data: None,
            valid_data: None,
            valid_targets: None,
            test_data: None,
            test_targets: None,
            data_format: CorpusFormat::Triples,
            vocab_size: None,
            out_dir: PathBuf::from("runs"),
            eval_every: 1,
            checkpoint_every: 1,
            ranking_n: vec![50, 100],
            eval_inner_steps: 100,
            patience: 0,
            exclude_fold_in: true,
            rare_frac: 0.05,
            threads: 0,
        }
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse list entry {s:?}")))
        })
        .collect()
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        let path = |v: &str| if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        match key {
            "mode" => t.mode = parse_value(key, v)?,
            "inner_steps" | "M" => t.inner_steps = parse_value(key, v)?,
            "batch_size" => t.batch_size = parse_value(key, v)?,
            "epochs" => t.epochs = parse_value(key, v)?,
            "seed" => t.seed = parse_value(key, v)?,
            "latent_dim" => t.latent_dim = parse_value(key, v)?,
            "generator_hidden" => t.generator_hidden = parse_list(key, v)?,
            "encoder_hidden" => t.encoder_hidden = parse_list(key, v)?,
            "activation" => t.activation = parse_value(key, v)?,
            "features" => t.features = parse_value(key, v)?,
            "anneal_updates" => t.anneal_updates = parse_value(key, v)?,
            "lr_theta" => t.lr_theta = parse_value(key, v)?,
            "lr_phi" => t.lr_phi = parse_value(key, v)?,
            "lr_psi" => t.lr_psi = parse_value(key, v)?,
            "beta1" => t.beta1 = parse_value(key, v)?,
            "beta2" => t.beta2 = parse_value(key, v)?,
            "adam_eps" => t.adam_eps = parse_value(key, v)?,
            "psi_optimizer" => t.psi_optimizer = parse_value(key, v)?,
            "logvar_min" => t.logvar_min = parse_value(key, v)?,
            "logvar_max" => t.logvar_max = parse_value(key, v)?,
            "samples" => t.samples = parse_value(key, v)?,
            "inner_tol" => t.inner_tol = parse_value(key, v)?,
            "train_data" => self.train_data = path(v),
            "valid_data" => self.valid_data = path(v),
            "valid_targets" => self.valid_targets = path(v),
            "test_data" => self.test_data = path(v),
            "test_targets" => self.test_targets = path(v),
            "data_format" => self.data_format = parse_value(key, v)?,
            "vocab_size" => {
                self.vocab_size = if v.is_empty() {
                    None
                } else {
                    Some(parse_value(key, v)?)
                }
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            "eval_every" => self.eval_every = parse_value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "ranking_n" => self.ranking_n = parse_list(key, v)?,
            "eval_inner_steps" => self.eval_inner_steps = parse_value(key, v)?,
            "patience" => self.patience = parse_value(key, v)?,
            "exclude_fold_in" => self.exclude_fold_in = parse_bool(key, v)?,
            "rare_frac" => self.rare_frac = parse_value(key, v)?,
            "threads" => self.threads = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: "config".into(),
                line: n + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            cfg.set(k.trim(), v).map_err(|e| Error::Parse {
                path: "config".into(),
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                msg,
            },
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.ranking_n.contains(&0) {
            return Err(Error::Config("ranking_n entries must be >= 1".into()));
        }
        if !(self.rare_frac > 0.0) {
            return Err(Error::Config("rare_frac must be positive".into()));
        }
        Ok(())
    }

    /// Every key, always in the same order; `parse(serialize())` returns an
    /// equal config.
    pub fn serialize(&self) -> String {
        let t = &self.train;
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("mode", t.mode.to_string());
        kv("inner_steps", t.inner_steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("seed", t.seed.to_string());
        kv("latent_dim", t.latent_dim.to_string());
        kv("generator_hidden", join(&t.generator_hidden));
        kv("encoder_hidden", join(&t.encoder_hidden));
        kv("activation", t.activation.to_string());
        kv("features", t.features.to_string());
        kv("anneal_updates", t.anneal_updates.to_string());
        kv("lr_theta", t.lr_theta.to_string());
        kv("lr_phi", t.lr_phi.to_string());
        kv("lr_psi", t.lr_psi.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("adam_eps", t.adam_eps.to_string());
        kv("psi_optimizer", t.psi_optimizer.to_string());
        kv("logvar_min", t.logvar_min.to_string());
        kv("logvar_max", t.logvar_max.to_string());
        kv("samples", t.samples.to_string());
        kv("inner_tol", t.inner_tol.to_string());
        kv("train_data", p(&self.train_data));
        kv("valid_data", p(&self.valid_data));
        kv("valid_targets", p(&self.valid_targets));
        kv("test_data", p(&self.test_data));
        kv("test_targets", p(&self.test_targets));
        kv("data_format", self.data_format.to_string());
        kv("vocab_size", self.vocab_size.map(|v| v.to_string()).unwrap_or_default());
        kv("out_dir", self.out_dir.display().to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("ranking_n", join(&self.ranking_n));
        kv("eval_inner_steps", self.eval_inner_steps.to_string());
        kv("patience", self.patience.to_string());
        kv("exclude_fold_in", self.exclude_fold_in.to_string());
        kv("rare_frac", self.rare_frac.to_string());
        kv("threads", self.threads.to_string());
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }

    /// True for ranking runs (held-out users with separate targets).
    pub fn is_ranking(&self) -> bool {
        self.valid_targets.is_some() || self.test_targets.is_some()
    }
}
