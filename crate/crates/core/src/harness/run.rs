use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::{ExperimentConfig, OptimizerKind, SourceKind};
use super::results::{append_results, mean_ci95, RunRecord};
use crate::episodes::{load_dataset_csv, make_gaussian_dist, split_classes, EpisodeSource};
use crate::error::{Error, Result};
use crate::meta::{
    components_label, evaluate_episode, meta_gradient, train_step, Component, EpisodeOutcome, MamlOrder,
    MetaGrads, MetaModel, MetaOptimizer, Strategy, StrategyConfig,
};

const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;
const TEST_STREAM: u64 = 3;
const BENCH_STREAM: u64 = 4;
const WARMUP_STREAM: u64 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of episode `index` in `stream` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream.wrapping_mul(0x1000_0000_0000_0001) ^ splitmix64(index)))
}

/// Train, validation and test episode sources.
pub struct Sources {
    pub train: Box<dyn EpisodeSource>,
    pub val: Box<dyn EpisodeSource>,
    pub test: Box<dyn EpisodeSource>,
}

fn check_source(name: &str, src: &dyn EpisodeSource, cfg: &ExperimentConfig) -> Result<()> {
    if src.in_dim() != cfg.in_dim {
        return Err(Error::validation(format!(
            "{name} source has {} features but in_dim = {}",
            src.in_dim(),
            cfg.in_dim
        )));
    }
    if src.num_classes() < cfg.ways {
        return Err(Error::validation(format!(
            "{name} split has {} classes, fewer than ways = {}",
            src.num_classes(),
            cfg.ways
        )));
    }
    Ok(())
}

/// Builds the sources described by `cfg`. Classes are split into disjoint
/// train/val/test sets; with `eval_csv`, validation and test classes come
/// from that second table instead.
pub fn build_sources(cfg: &ExperimentConfig) -> Result<Sources> {
    let s = match cfg.source {
        SourceKind::Gaussian => {
            let dist = make_gaussian_dist(
                cfg.in_dim,
                cfg.class_separation,
                cfg.noise_sigma,
                cfg.pool_classes,
                cfg.data_seed,
            )?;
            let [tr, va, te] = dist.split(cfg.split_fractions, cfg.data_seed)?;
            Sources {
                train: Box::new(tr),
                val: Box::new(va),
                test: Box::new(te),
            }
        }
        SourceKind::Csv => {
            let path = cfg.train_csv.as_ref().ok_or_else(|| Error::validation("source = csv needs train_csv"))?;
            let table = load_dataset_csv(path)?;
            let [tr, va, te] = split_classes(&table, cfg.split_fractions, cfg.data_seed)?;
            match &cfg.eval_csv {
                None => Sources {
                    train: Box::new(tr),
                    val: Box::new(va),
                    test: Box::new(te),
                },
                Some(other) => {
                    let t2 = load_dataset_csv(other)?;
                    let [_, va2, te2] = split_classes(&t2, cfg.split_fractions, cfg.data_seed)?;
                    Sources {
                        train: Box::new(tr),
                        val: Box::new(va2),
                        test: Box::new(te2),
                    }
                }
            }
        }
    };
    check_source("train", s.train.as_ref(), cfg)?;
    check_source("validation", s.val.as_ref(), cfg)?;
    check_source("test", s.test.as_ref(), cfg)?;
    Ok(s)
}

/// Row label for a strategy configuration.
pub fn strategy_label(cfg: &StrategyConfig) -> String {
    match cfg.strategy {
        Strategy::A2mEnsemble | Strategy::A2mSingle => {
            format!("{}:{}", cfg.strategy.as_str(), components_label(&cfg.sorted_components()))
        }
        Strategy::CoupledProtonet => cfg.strategy.as_str().to_string(),
        Strategy::CoupledMaml => format!("coupled_maml:{}", cfg.maml_order.as_str()),
    }
}

/// Evaluates `n` episodes (in parallel), returned in episode order.
pub fn evaluate_many(
    model: &MetaModel,
    source: &dyn EpisodeSource,
    cfg: &ExperimentConfig,
    n: usize,
    stream: u64,
) -> Result<Vec<EpisodeOutcome>> {
    let scfg = cfg.strategy_config();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let ep = source.sample_episode(cfg.ways, cfg.shots, cfg.queries, derive_seed(cfg.eval_seed, stream, i as u64))?;
            evaluate_episode(model, &ep, &scfg)
        })
        .collect()
}

fn accuracies(outcomes: &[EpisodeOutcome]) -> Vec<f64> {
    outcomes.iter().map(|o| o.query_accuracy).collect()
}

fn mean_ms(total: Duration, n: usize) -> f64 {
    total.as_secs_f64() * 1e3 / n.max(1) as f64
}

pub fn init_model(cfg: &ExperimentConfig) -> Result<MetaModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    MetaModel::init(&cfg.network_dims(), cfg.ways, cfg.meta_lr, &mut rng)
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: MetaModel,
    pub log: Vec<String>,
    pub train_ms_per_ep: f64,
    /// Validation accuracy and CI after the last epoch, if validation ran.
    pub final_val: Option<(f64, f64)>,
}

/// Meta-trains a fresh model; no files are written.
pub fn train_model(cfg: &ExperimentConfig, sources: &Sources) -> Result<TrainReport> {
    cfg.validate()?;
    let scfg = cfg.strategy_config();
    let mut model = init_model(cfg)?;
    let mut opt = match cfg.optimizer {
        OptimizerKind::Sgd => MetaOptimizer::Sgd,
        OptimizerKind::Adaptive => MetaOptimizer::adaptive(),
    };
    let mut log = Vec::new();
    let mut final_val = None;
    let mut train_time = Duration::ZERO;
    let mut batch: Vec<MetaGrads> = Vec::with_capacity(cfg.meta_batch);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        for i in 0..cfg.episodes_per_epoch {
            let idx = (epoch * cfg.episodes_per_epoch + i) as u64;
            let ep = sources
                .train
                .sample_episode(cfg.ways, cfg.shots, cfg.queries, derive_seed(cfg.seed, TRAIN_STREAM, idx))?;
            let g = meta_gradient(&model, &ep, &scfg)?;
            loss_sum += g.query_loss;
            acc_sum += g.query_accuracy;
            batch.push(g.grads);
            if batch.len() == cfg.meta_batch || i + 1 == cfg.episodes_per_epoch {
                model = opt.apply(&model, &MetaGrads::mean(&batch)?)?;
                batch.clear();
            }
        }
        train_time += start.elapsed();
        if !model.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged in epoch {} (non-finite parameters); lower meta_lr",
                epoch + 1
            )));
        }
        let n = cfg.episodes_per_epoch as f64;
        let mut line = format!(
            "epoch {}/{}: train_loss {:.4} train_acc {:.4}",
            epoch + 1,
            cfg.epochs,
            loss_sum / n,
            acc_sum / n
        );
        if cfg.val_episodes >= 2 {
            let out = evaluate_many(&model, sources.val.as_ref(), cfg, cfg.val_episodes, VAL_STREAM)?;
            let (m, h) = mean_ci95(&accuracies(&out))?;
            let _ = write!(line, " val_acc {m:.4} ± {h:.4}");
            final_val = Some((m, h));
        }
        log.push(line);
    }
    let episodes = cfg.epochs * cfg.episodes_per_epoch;
    Ok(TrainReport {
        model,
        log,
        train_ms_per_ep: if cfg.record_timing { mean_ms(train_time, episodes) } else { 0.0 },
        final_val,
    })
}

/// `train`: meta-trains, writes the checkpoint and (optionally) the log.
pub fn run_train(cfg: &ExperimentConfig) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    let sources = build_sources(cfg)?;
    let report = train_model(cfg, &sources)?;
    let ck = save_checkpoint(&report.model, &cfg.digest(), &cfg.checkpoint_path)?;
    if let Some(p) = &cfg.log_path {
        let mut text = report.log.join("\n");
        text.push('\n');
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok((ck, report))
}

fn check_compatible(model: &MetaModel, cfg: &ExperimentConfig) -> Result<()> {
    let want = cfg.network_dims();
    let got = model.embedding.dims();
    if got != want {
        return Err(Error::validation(format!(
            "checkpoint embedding has widths {got:?} but the config describes {want:?}"
        )));
    }
    if model.ways() != cfg.ways {
        return Err(Error::validation(format!(
            "checkpoint head has {} ways but the config has ways = {}",
            model.ways(),
            cfg.ways
        )));
    }
    Ok(())
}

/// Evaluates `model` on the test split and builds a result row.
pub fn evaluate_model(model: &MetaModel, cfg: &ExperimentConfig, sources: &Sources, train_ms_per_ep: f64) -> Result<RunRecord> {
    let out = evaluate_many(model, sources.test.as_ref(), cfg, cfg.eval_episodes, TEST_STREAM)?;
    let (mean_acc, ci95) = mean_ci95(&accuracies(&out))?;
    let eval_time: Duration = out.iter().map(|o| o.wall_time).sum();
    Ok(RunRecord {
        strategy: strategy_label(&cfg.strategy_config()),
        ways: cfg.ways,
        shots: cfg.shots,
        eval_episodes: cfg.eval_episodes,
        mean_acc,
        ci95,
        train_ms_per_ep,
        eval_ms_per_ep: if cfg.record_timing { mean_ms(eval_time, out.len()) } else { 0.0 },
        seed: cfg.seed,
        config_digest: cfg.digest_hex(),
    })
}

/// `eval`: scores a checkpoint and appends one row to the results file.
/// The checkpoint file is only read.
pub fn run_eval(checkpoint: &Path, cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let model = load_checkpoint(checkpoint)?.to_model(cfg.meta_lr)?;
    check_compatible(&model, cfg)?;
    let sources = build_sources(cfg)?;
    let record = evaluate_model(&model, cfg, &sources, 0.0)?;
    append_results(&cfg.results_path, std::slice::from_ref(&record))?;
    Ok(record)
}

/// The seven non-empty component subsets in reporting order.
pub fn ablation_subsets() -> [Vec<Component>; 7] {
    use Component::*;
    [
        vec![MeanCentroid],
        vec![Mlp],
        vec![InitBased],
        vec![MeanCentroid, Mlp],
        vec![Mlp, InitBased],
        vec![MeanCentroid, InitBased],
        vec![MeanCentroid, Mlp, InitBased],
    ]
}

/// `ablate`: trains and evaluates every component subset under the same
/// seeds and budget, appending seven rows to the results file.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    if cfg.strategy != Strategy::A2mEnsemble {
        return Err(Error::validation(format!(
            "ablation needs strategy = a2m_ensemble, got {}",
            cfg.strategy.as_str()
        )));
    }
    let sources = build_sources(cfg)?;
    let mut rows = Vec::with_capacity(7);
    for subset in ablation_subsets() {
        let mut sub = cfg.clone();
        sub.components = subset;
        let report = train_model(&sub, &sources)?;
        rows.push(evaluate_model(&report.model, &sub, &sources, report.train_ms_per_ep)?);
    }
    append_results(&cfg.results_path, &rows)?;
    Ok(rows)
}

/// Per-episode timing of one strategy variant.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: String,
    pub train_ms_per_ep: f64,
    pub eval_ms_per_ep: f64,
}

pub const BENCH_BLOCK: usize = 100;

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// The benchmarked variants: prototype-only and ensemble decoupled training,
/// and coupled MAML in both orders.
pub fn bench_variants(cfg: &ExperimentConfig) -> Vec<(String, StrategyConfig)> {
    let base = cfg.strategy_config();
    let a2m = |components: &[Component]| StrategyConfig {
        strategy: Strategy::A2mEnsemble,
        components: components.to_vec(),
        ..base.clone()
    };
    let maml = |order| StrategyConfig {
        strategy: Strategy::CoupledMaml,
        maml_order: order,
        ..base.clone()
    };
    vec![
        ("a2m_protonet".into(), a2m(&[Component::MeanCentroid])),
        ("a2m_ensemble".into(), a2m(&Component::ALL)),
        ("maml_first".into(), maml(MamlOrder::First)),
        ("maml_second".into(), maml(MamlOrder::Second)),
    ]
}

/// `bench`: wall time per episode over 100-episode blocks, median of
/// `bench_blocks` blocks. Variants are interleaved block by block.
pub fn run_bench(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let sources = build_sources(cfg)?;
    let variants = bench_variants(cfg);
    let episodes = |stream: u64, block: usize, src: &dyn EpisodeSource| -> Result<Vec<_>> {
        (0..BENCH_BLOCK)
            .map(|i| {
                let idx = (block * BENCH_BLOCK + i) as u64;
                src.sample_episode(cfg.ways, cfg.shots, cfg.queries, derive_seed(cfg.seed, stream, idx))
            })
            .collect()
    };
    let mut models: Vec<MetaModel> = variants.iter().map(|_| init_model(cfg)).collect::<Result<_>>()?;
    let mut train_ms = vec![Vec::new(); variants.len()];
    let mut eval_ms = vec![Vec::new(); variants.len()];

    // untimed warm-up
    let warm = episodes(WARMUP_STREAM, 0, sources.train.as_ref())?;
    for (v, (_, scfg)) in variants.iter().enumerate() {
        for ep in warm.iter().take(10) {
            train_step(&models[v], ep, scfg)?;
        }
    }

    for block in 0..cfg.bench_blocks {
        let train_eps = episodes(BENCH_STREAM, block, sources.train.as_ref())?;
        let test_eps = episodes(TEST_STREAM, block, sources.test.as_ref())?;
        for (v, (_, scfg)) in variants.iter().enumerate() {
            let start = Instant::now();
            for ep in &train_eps {
                models[v] = train_step(&models[v], ep, scfg)?.0;
            }
            train_ms[v].push(mean_ms(start.elapsed(), BENCH_BLOCK));
            let start = Instant::now();
            for ep in &test_eps {
                evaluate_episode(&models[v], ep, scfg)?;
            }
            eval_ms[v].push(mean_ms(start.elapsed(), BENCH_BLOCK));
        }
    }
    let rows: Vec<BenchRow> = variants
        .iter()
        .enumerate()
        .map(|(v, (name, _))| BenchRow {
            variant: name.clone(),
            train_ms_per_ep: median(&mut train_ms[v]),
            eval_ms_per_ep: median(&mut eval_ms[v]),
        })
        .collect();

    let mut text = String::from("variant,train_ms_per_ep,eval_ms_per_ep,train_ratio,eval_ratio\n");
    let (bt, be) = (rows[0].train_ms_per_ep, rows[0].eval_ms_per_ep);
    for r in &rows {
        let _ = writeln!(
            text,
            "{},{:.4},{:.4},{:.3},{:.3}",
            r.variant,
            r.train_ms_per_ep,
            r.eval_ms_per_ep,
            r.train_ms_per_ep / bt,
            r.eval_ms_per_ep / be
        );
    }
    if let Some(dir) = cfg.bench_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&cfg.bench_path, text).map_err(|e| Error::io(&cfg.bench_path, e))?;
    Ok(rows)
}
