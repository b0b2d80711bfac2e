use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inner::AdaptMode;
use crate::meta::{Component, MamlOrder, Strategy, StrategyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKind {
    Gaussian,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adaptive,
}

/// A complete, declarative experiment description.
///
/// Every field maps to one `key = value` line of a config file; keys are the
/// field names. Relative paths are resolved against the config file's
/// directory when loaded through [`ExperimentConfig::load`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub components: Vec<Component>,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub anil_mode: AdaptMode,
    pub maml_order: MamlOrder,
    pub detach_task_params: bool,
    pub mlp_hidden: usize,

    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    pub meta_batch: usize,
    pub eval_episodes: usize,
    pub val_episodes: usize,

    pub in_dim: usize,
    /// Widths of the embedding layers after the input.
    pub embedding_dims: Vec<usize>,

    pub source: SourceKind,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub pool_classes: usize,
    pub train_csv: Option<PathBuf>,
    pub eval_csv: Option<PathBuf>,
    pub split_fractions: [f64; 3],
    pub data_seed: u64,

    pub seed: u64,
    pub eval_seed: u64,
    pub meta_lr: f64,
    pub optimizer: OptimizerKind,

    pub checkpoint_path: PathBuf,
    pub results_path: PathBuf,
    pub bench_path: PathBuf,
    pub log_path: Option<PathBuf>,
    pub record_timing: bool,
    pub bench_blocks: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = StrategyConfig::default();
        Self {
            strategy: s.strategy,
            components: s.components,
            inner_steps: s.inner_steps,
            inner_lr: s.inner_lr,
            anil_mode: s.anil_mode,
            maml_order: s.maml_order,
            detach_task_params: s.detach_task_params,
            mlp_hidden: s.mlp_hidden,
            ways: 5,
            shots: 1,
            queries: 15,
            episodes_per_epoch: 500,
            epochs: 4,
            meta_batch: 1,
            eval_episodes: 600,
            val_episodes: 100,
            in_dim: 16,
            embedding_dims: vec![64, 64],
            source: SourceKind::Gaussian,
            class_separation: 4.0,
            noise_sigma: 1.0,
            pool_classes: 64,
            train_csv: None,
            eval_csv: None,
            split_fractions: [0.64, 0.16, 0.20],
            data_seed: 7,
            seed: 1,
            eval_seed: 1001,
            meta_lr: 0.01,
            optimizer: OptimizerKind::Sgd,
            checkpoint_path: PathBuf::from("model.a2mc"),
            results_path: PathBuf::from("results.csv"),
            bench_path: PathBuf::from("bench.csv"),
            log_path: None,
            record_timing: true,
            bench_blocks: 3,
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("expected a number, got `{v}`"))
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| format!("bad list element `{}`", s.trim())))
        .collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Every recognised key, in canonical order.
    pub const KEYS: [&'static str; 36] = [
        "strategy",
        "components",
        "inner_steps",
        "inner_lr",
        "anil_mode",
        "maml_order",
        "detach_task_params",
        "mlp_hidden",
        "ways",
        "shots",
        "queries",
        "episodes_per_epoch",
        "epochs",
        "meta_batch",
        "eval_episodes",
        "val_episodes",
        "in_dim",
        "embedding_dims",
        "source",
        "class_separation",
        "noise_sigma",
        "pool_classes",
        "train_csv",
        "eval_csv",
        "split_fractions",
        "data_seed",
        "seed",
        "eval_seed",
        "meta_lr",
        "optimizer",
        "checkpoint_path",
        "results_path",
        "bench_path",
        "log_path",
        "record_timing",
        "bench_blocks",
    ];

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let e = |e: Error| e.to_string();
        match key {
            "strategy" => self.strategy = v.parse().map_err(e)?,
            "components" => {
                self.components = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|c| c.trim().parse()).collect::<Result<_>>().map_err(e)?
                }
            }
            "inner_steps" => self.inner_steps = parse_num(v)?,
            "inner_lr" => self.inner_lr = parse_num(v)?,
            "anil_mode" => self.anil_mode = v.parse().map_err(e)?,
            "maml_order" => self.maml_order = v.parse().map_err(e)?,
            "detach_task_params" => self.detach_task_params = parse_bool(v)?,
            "mlp_hidden" => self.mlp_hidden = parse_num(v)?,
            "ways" => self.ways = parse_num(v)?,
            "shots" => self.shots = parse_num(v)?,
            "queries" => self.queries = parse_num(v)?,
            "episodes_per_epoch" => self.episodes_per_epoch = parse_num(v)?,
            "epochs" => self.epochs = parse_num(v)?,
            "meta_batch" => self.meta_batch = parse_num(v)?,
            "eval_episodes" => self.eval_episodes = parse_num(v)?,
            "val_episodes" => self.val_episodes = parse_num(v)?,
            "in_dim" => self.in_dim = parse_num(v)?,
            "embedding_dims" => self.embedding_dims = parse_list(v)?,
            "source" => {
                self.source = match v {
                    "gaussian" => SourceKind::Gaussian,
                    "csv" => SourceKind::Csv,
                    _ => return Err(format!("unknown source `{v}` (expected gaussian or csv)")),
                }
            }
            "class_separation" => self.class_separation = parse_num(v)?,
            "noise_sigma" => self.noise_sigma = parse_num(v)?,
            "pool_classes" => self.pool_classes = parse_num(v)?,
            "train_csv" => self.train_csv = opt_path(v),
            "eval_csv" => self.eval_csv = opt_path(v),
            "split_fractions" => {
                let f: Vec<f64> = parse_list(v)?;
                self.split_fractions = f
                    .try_into()
                    .map_err(|_| "split_fractions needs exactly three values".to_string())?;
            }
            "data_seed" => self.data_seed = parse_num(v)?,
            "seed" => self.seed = parse_num(v)?,
            "eval_seed" => self.eval_seed = parse_num(v)?,
            "meta_lr" => self.meta_lr = parse_num(v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "adaptive" => OptimizerKind::Adaptive,
                    _ => return Err(format!("unknown optimizer `{v}` (expected sgd or adaptive)")),
                }
            }
            "checkpoint_path" => self.checkpoint_path = PathBuf::from(v),
            "results_path" => self.results_path = PathBuf::from(v),
            "bench_path" => self.bench_path = PathBuf::from(v),
            "log_path" => self.log_path = opt_path(v),
            "record_timing" => self.record_timing = parse_bool(v)?,
            "bench_blocks" => self.bench_blocks = parse_num(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Textual value of a key, as it would appear in a config file.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "strategy" => self.strategy.as_str().into(),
            "components" => self.components.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(","),
            "inner_steps" => self.inner_steps.to_string(),
            "inner_lr" => self.inner_lr.to_string(),
            "anil_mode" => self.anil_mode.as_str().into(),
            "maml_order" => self.maml_order.as_str().into(),
            "detach_task_params" => self.detach_task_params.to_string(),
            "mlp_hidden" => self.mlp_hidden.to_string(),
            "ways" => self.ways.to_string(),
            "shots" => self.shots.to_string(),
            "queries" => self.queries.to_string(),
            "episodes_per_epoch" => self.episodes_per_epoch.to_string(),
            "epochs" => self.epochs.to_string(),
            "meta_batch" => self.meta_batch.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "val_episodes" => self.val_episodes.to_string(),
            "in_dim" => self.in_dim.to_string(),
            "embedding_dims" => join(&self.embedding_dims),
            "source" => match self.source {
                SourceKind::Gaussian => "gaussian".into(),
                SourceKind::Csv => "csv".into(),
            },
            "class_separation" => self.class_separation.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "pool_classes" => self.pool_classes.to_string(),
            "train_csv" => show_path(&self.train_csv),
            "eval_csv" => show_path(&self.eval_csv),
            "split_fractions" => join(&self.split_fractions),
            "data_seed" => self.data_seed.to_string(),
            "seed" => self.seed.to_string(),
            "eval_seed" => self.eval_seed.to_string(),
            "meta_lr" => self.meta_lr.to_string(),
            "optimizer" => match self.optimizer {
                OptimizerKind::Sgd => "sgd".into(),
                OptimizerKind::Adaptive => "adaptive".into(),
            },
            "checkpoint_path" => self.checkpoint_path.display().to_string(),
            "results_path" => self.results_path.display().to_string(),
            "bench_path" => self.bench_path.display().to_string(),
            "log_path" => show_path(&self.log_path),
            "record_timing" => self.record_timing.to_string(),
            "bench_blocks" => self.bench_blocks.to_string(),
            _ => return None,
        })
    }

    /// Parses config text. `origin` is used in error messages only.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let Some((k, v)) = line.split_once('=') else {
                return Err(perr(format!("expected `key = value`, got `{line}`")));
            };
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(perr(format!("duplicate key `{k}`")));
            }
            cfg.set(k, v).map_err(perr)?;
        }
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.checkpoint_path);
        fix(&mut self.results_path);
        fix(&mut self.bench_path);
        for p in [&mut self.train_csv, &mut self.eval_csv, &mut self.log_path].into_iter().flatten() {
            fix(p);
        }
    }

    /// All keys with their values, one `key = value` per line, in fixed order.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).unwrap_or_default());
        }
        out
    }

    /// SHA-256 over the canonical form, excluding output paths and timing.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for k in Self::KEYS {
            if matches!(
                k,
                "checkpoint_path" | "results_path" | "bench_path" | "log_path" | "record_timing"
            ) {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(self.get(k).unwrap_or_default().as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }

    pub fn strategy_config(&self) -> StrategyConfig {
        StrategyConfig {
            strategy: self.strategy,
            components: self.components.clone(),
            inner_steps: self.inner_steps,
            inner_lr: self.inner_lr,
            anil_mode: self.anil_mode,
            maml_order: self.maml_order,
            detach_task_params: self.detach_task_params,
            mlp_hidden: self.mlp_hidden,
        }
    }

    /// Embedding layer widths including the input.
    pub fn network_dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim];
        d.extend(&self.embedding_dims);
        d
    }

    /// Checks everything that can be checked without touching the filesystem.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ways", self.ways),
            ("shots", self.shots),
            ("queries", self.queries),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("meta_batch", self.meta_batch),
            ("in_dim", self.in_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("bench_blocks", self.bench_blocks),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("{k} must be positive")));
            }
        }
        if self.eval_episodes < 2 {
            return Err(Error::validation(format!(
                "eval_episodes must be at least 2 for a confidence interval, got {}",
                self.eval_episodes
            )));
        }
        if self.embedding_dims.is_empty() || self.embedding_dims.contains(&0) {
            return Err(Error::validation("embedding_dims must list positive widths"));
        }
        if !(self.meta_lr >= 0.0 && self.meta_lr.is_finite()) {
            return Err(Error::validation(format!("meta_lr must be finite and non-negative, got {}", self.meta_lr)));
        }
        if self.source == SourceKind::Csv && self.train_csv.is_none() {
            return Err(Error::validation("source = csv needs train_csv"));
        }
        if self.source == SourceKind::Gaussian && self.pool_classes < self.ways {
            return Err(Error::validation(format!(
                "pool_classes ({}) is smaller than ways ({})",
                self.pool_classes, self.ways
            )));
        }
        if self.source == SourceKind::Gaussian {
            crate::episodes::split_counts(self.pool_classes, self.split_fractions)?;
        } else {
            // the class count is only known once the table is loaded
            let f = self.split_fractions;
            if f.iter().any(|&v| !(v > 0.0 && v.is_finite())) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::validation(format!("split fractions must be positive and sum to 1, got {f:?}")));
            }
        }
        self.strategy_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_fractions_checked_without_the_table() {
        let c = ExperimentConfig::parse("source = csv\ntrain_csv = d.csv\n", "t").unwrap();
        c.validate().unwrap();
        let c = ExperimentConfig::parse("source = csv\ntrain_csv = d.csv\nsplit_fractions = 1,0,0\n", "t").unwrap();
        assert!(matches!(c.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_config_is_the_default() {
        let c = ExperimentConfig::parse("# nothing\n\n", "t").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn parses_keys_and_comments() {
        let c = ExperimentConfig::parse(
            "strategy = coupled_maml  # trailing\nembedding_dims=8, 4\ncomponents = mlp,init_based\nrecord_timing = false\n",
            "t",
        )
        .unwrap();
        assert_eq!(c.strategy, Strategy::CoupledMaml);
        assert_eq!(c.embedding_dims, vec![8, 4]);
        assert_eq!(c.components, vec![Component::Mlp, Component::InitBased]);
        assert!(!c.record_timing);
    }

    #[test]
    fn unknown_key_reports_line() {
        match ExperimentConfig::parse("ways = 5\nwidth = 3\n", "cfg") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("width"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(ExperimentConfig::parse("ways\n", "c"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("ways = x\n", "c"), Err(Error::Parse { .. })));
        assert!(matches!(ExperimentConfig::parse("ways = 2\nways = 3\n", "c"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn canonical_round_trip() {
        let mut c = ExperimentConfig::default();
        c.set("strategy", "a2m_single").unwrap();
        c.set("components", "init_based").unwrap();
        c.set("eval_csv", "x.csv").unwrap();
        c.set("split_fractions", "0.5,0.25,0.25").unwrap();
        let back = ExperimentConfig::parse(&c.canonical(), "c").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn digest_tracks_substance_not_outputs() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.results_path = PathBuf::from("elsewhere.csv");
        b.record_timing = false;
        assert_eq!(a.digest(), b.digest());
        b.seed = 2;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn validation_failures() {
        for (k, v) in [
            ("eval_episodes", "1"),
            ("ways", "0"),
            ("embedding_dims", "4,0"),
            ("components", ""),
            ("source", "csv"),
            ("pool_classes", "3"),
            ("split_fractions", "1,0,0"),
        ] {
            let mut c = ExperimentConfig::default();
            c.set(k, v).unwrap();
            assert!(matches!(c.validate(), Err(Error::Validation(_))), "{k}={v}");
        }
    }
}
