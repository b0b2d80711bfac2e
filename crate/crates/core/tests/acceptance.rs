//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion; exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use a2m::autodiff::{backward, softmax_cross_entropy, Tape, Tensor};
use a2m::episodes::{load_dataset_csv, make_gaussian_dist, sample_episode, Episode, EpisodeSource};
use a2m::harness::{run_ablation, run_bench, run_eval, run_train, ExperimentConfig};
use a2m::inner::{ensemble_logits, predict_logits, ridge_fit, TaskParams};
use a2m::meta::{
    a2m_meta_gradient, adapt_components, coupled_protonet_gradient, maml_meta_gradient, Component, MamlOrder,
    MetaModel, StrategyConfig,
};
use a2m::networks::{pairwise_sq_dist, EmbeddingNet, Head, LinearHead, Parameterized};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn flat(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.to_vec()).collect()
}

/// Central differences of `f` over every entry of `at`.
fn central_diff(f: impl Fn(&[Tensor]) -> f64, at: &[Tensor], eps: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, t) in at.iter().enumerate() {
        for j in 0..t.numel() {
            let nudged = |d: f64| {
                let mut ps = at.to_vec();
                let mut v = t.to_vec();
                v[j] += d;
                ps[i] = Tensor::from_vec(t.shape().dims(), v).unwrap();
                f(&ps)
            };
            out.push((nudged(eps) - nudged(-eps)) / (2.0 * eps));
        }
    }
    out
}

/// Largest elementwise `|a - b| / max(|a|, |b|, 1e-6)`.
fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn net_loss(net: &EmbeddingNet, params: &[Tensor], x: &Tensor, y: &[usize]) -> Tensor {
    let split = params.len() - 2;
    let net = net.with_params(params[..split].to_vec()).unwrap();
    let head = LinearHead::new(params[split].clone(), params[split + 1].clone()).unwrap();
    softmax_cross_entropy(&head.logits(&net.forward(x).unwrap()).unwrap(), y).unwrap()
}

fn gradient_exactness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h1, h2, k, n) = (
            rng.random_range(2..6),
            rng.random_range(2..7),
            rng.random_range(2..7),
            rng.random_range(2..5),
            rng.random_range(3..9),
        );
        let dims = [d, h1, h2];
        let net = EmbeddingNet::init(&dims, &mut rng).map_err(err)?;
        let head = LinearHead::init(h2, k, &mut rng).map_err(err)?;
        let x = random(&[n, d], &mut rng);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();

        let mut params: Vec<Tensor> = net.params().into_iter().cloned().collect();
        params.extend(head.params().into_iter().cloned());
        let tape = Tape::new();
        let tracked: Vec<Tensor> = params.iter().map(|p| p.track(&tape)).collect();
        let refs: Vec<&Tensor> = tracked.iter().collect();
        let loss = net_loss(&net, &tracked, &x, &y);
        let analytic = flat(&backward(&loss, &refs, false).map_err(err)?.ordered(&refs).map_err(err)?);
        let numeric = central_diff(|p| net_loss(&net, p, &x, &y).item().unwrap(), &params, 1e-6);
        worst = worst.max(max_rel(&analytic, &numeric));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < 1e-4, format!("max rel err {worst:.2e} >= 1e-4"))?;
    ensure(secs < 10.0, format!("took {secs:.1} s"))?;
    Ok(format!("max rel err {worst:.2e} over 20 seeds in {secs:.2} s"))
}

fn second_order_exactness() -> Outcome {
    let half_sq = |p: &[Tensor]| p[0].mul(&p[0])?.sum()?.scale(0.5);
    let mut worst: f64 = 0.0;
    for w in [-2.3, 0.4, 1.7] {
        for alpha in [0.1, 0.5, 1.0] {
            let p = [Tensor::scalar(w)];
            let second = maml_meta_gradient(&p, alpha, MamlOrder::Second, half_sq, half_sq).map_err(err)?;
            let first = maml_meta_gradient(&p, alpha, MamlOrder::First, half_sq, half_sq).map_err(err)?;
            let e2 = (second.grads[0].item().map_err(err)? - (1.0 - alpha) * (1.0 - alpha) * w).abs();
            let e1 = (first.grads[0].item().map_err(err)? - (1.0 - alpha) * w).abs();
            worst = worst.max(e1).max(e2);
        }
    }
    ensure(worst < 1e-10, format!("max abs err {worst:.2e}"))?;
    Ok(format!("max abs err {worst:.2e} for alpha in {{0.1, 0.5, 1.0}}"))
}

fn ridge_oracle() -> Outcome {
    let lambda = 0.5;
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (n, d, k) = (20, 8, 5);
        let x = random(&[n, d], &mut rng);
        let y = Tensor::from_vec(&[n, k], (0..n * k).map(|i| f64::from(i % k == (i / k) % k)).collect()).unwrap();
        let fit = ridge_fit(&x, &y, lambda).map_err(err)?;

        // gradient descent on ½|XW - Y|² + ½λ|W|², step below 1 / trace(XᵀX + λI)
        let xv = x.values();
        let yv = y.values();
        let trace: f64 = xv.iter().map(|v| v * v).sum::<f64>() + lambda * d as f64;
        let step = 1.0 / trace;
        let mut w = vec![0.0; d * k];
        for _ in 0..2_000_000 {
            let mut g: Vec<f64> = w.iter().map(|wi| lambda * wi).collect();
            for r in 0..n {
                for c in 0..k {
                    let pred: f64 = (0..d).map(|j| xv[r * d + j] * w[j * k + c]).sum();
                    let resid = pred - yv[r * k + c];
                    for j in 0..d {
                        g[j * k + c] += xv[r * d + j] * resid;
                    }
                }
            }
            let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= step * gi;
            }
            if gmax < 1e-12 {
                break;
            }
        }
        let e = fit.weight.values().iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(e);
    }
    ensure(worst < 1e-6, format!("max abs err {worst:.2e}"))?;
    Ok(format!("max abs err {worst:.2e} on 10 systems of 20x8"))
}

fn small_model(seed: u64) -> MetaModel {
    MetaModel::init(&[6, 8, 7], 4, 0.1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn small_episode(seed: u64) -> Episode {
    let dist = make_gaussian_dist(6, 2.0, 1.0, 10, 5).unwrap();
    sample_episode(&dist, 4, 2, 3, seed).unwrap()
}

fn emb_params(m: &MetaModel) -> Vec<Tensor> {
    m.embedding.params().into_iter().cloned().collect()
}

fn detachment_invariant() -> Outcome {
    let mut worst_frozen: f64 = 0.0;
    let mut worst_branch: f64 = 0.0;
    for seed in 0..5u64 {
        let m = small_model(seed);
        let ep = small_episode(50 + seed);
        let cfg = StrategyConfig {
            inner_steps: 3,
            inner_lr: 0.2,
            mlp_hidden: 5,
            ..StrategyConfig::a2m(&Component::ALL)
        };

        // frozen task parameters: the query loss as a function of θ′ alone
        let g = a2m_meta_gradient(&m, &ep, &cfg).map_err(err)?;
        let support = m.embedding.forward(&ep.support_x).map_err(err)?;
        let task: Vec<TaskParams> = adapt_components(&cfg, &m.shared_head, &support, &ep.support_y, ep.ways, ep.seed)
            .map_err(err)?
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        let frozen = |th: &[Tensor]| {
            let net = m.embedding.with_params(th.to_vec()).unwrap();
            let q = net.forward(&ep.query_x).unwrap();
            let parts: Vec<Tensor> = task.iter().map(|p| predict_logits(p, &q).unwrap()).collect();
            softmax_cross_entropy(&ensemble_logits(&parts).unwrap(), &ep.query_y).unwrap().item().unwrap()
        };
        let num = central_diff(frozen, &emb_params(&m), 1e-6);
        worst_frozen = worst_frozen.max(max_rel(&flat(g.grads.embedding(&m)), &num));

        // coupled ProtoNet minus decoupled prototypes = derivative through the support embedding only
        let a2m = a2m_meta_gradient(&m, &ep, &StrategyConfig::a2m(&[Component::MeanCentroid])).map_err(err)?;
        let coupled = coupled_protonet_gradient(&m, &ep).map_err(err)?;
        let diff: Vec<f64> = flat(coupled.grads.embedding(&m))
            .iter()
            .zip(flat(a2m.grads.embedding(&m)))
            .map(|(c, a)| c - a)
            .collect();
        let q_fixed = m.embedding.forward(&ep.query_x).map_err(err)?;
        let support_branch = |th: &[Tensor]| {
            let net = m.embedding.with_params(th.to_vec()).unwrap();
            let s = net.forward(&ep.support_x).unwrap();
            let mut centers = vec![0.0; ep.ways * s.shape().dims()[1]];
            let width = s.shape().dims()[1];
            let mut counts = vec![0.0; ep.ways];
            for (r, &y) in ep.support_y.iter().enumerate() {
                counts[y] += 1.0;
                for j in 0..width {
                    centers[y * width + j] += s.at(r, j);
                }
            }
            for (k, c) in counts.iter().enumerate() {
                for j in 0..width {
                    centers[k * width + j] /= c;
                }
            }
            let centers = Tensor::from_vec(&[ep.ways, width], centers).unwrap();
            let logits = pairwise_sq_dist(&q_fixed, &centers).unwrap().neg().unwrap();
            softmax_cross_entropy(&logits, &ep.query_y).unwrap().item().unwrap()
        };
        let num = central_diff(support_branch, &emb_params(&m), 1e-6);
        worst_branch = worst_branch.max(max_rel(&diff, &num));
    }
    ensure(worst_frozen < 1e-4, format!("frozen-task rel err {worst_frozen:.2e}"))?;
    ensure(worst_branch < 1e-4, format!("support-branch rel err {worst_branch:.2e}"))?;
    Ok(format!("frozen-task rel err {worst_frozen:.2e}, support-branch rel err {worst_branch:.2e}"))
}

fn reference_config(dir: &Path, name: &str) -> Result<ExperimentConfig, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    let mut cfg = ExperimentConfig::load(&path).map_err(err)?;
    cfg.checkpoint_path = dir.join("model.a2mc");
    cfg.results_path = dir.join("results.csv");
    cfg.bench_path = dir.join("bench.csv");
    cfg.log_path = None;
    Ok(cfg)
}

fn desk_scale_learning() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = reference_config(dir.path(), "reference.conf")?;
    ensure(cfg.ways == 5 && cfg.shots == 1 && cfg.class_separation == 4.0, "reference workload changed")?;
    let episodes = cfg.epochs * cfg.episodes_per_epoch;
    ensure(episodes == 2000 && cfg.eval_episodes == 600, "reference budget changed")?;
    let start = Instant::now();
    run_train(&cfg).map_err(err)?;
    let rec = run_eval(&cfg.checkpoint_path, &cfg).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    ensure(rec.mean_acc >= 0.85, format!("accuracy {:.4} < 0.85", rec.mean_acc))?;
    ensure(secs < 300.0, format!("took {secs:.1} s"))?;
    Ok(format!(
        "accuracy {:.4} ± {:.4} over 600 episodes after {episodes} training episodes, {secs:.1} s",
        rec.mean_acc, rec.ci95
    ))
}

fn ablation() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = reference_config(dir.path(), "reference.conf")?;
    let rows = run_ablation(&cfg).map_err(err)?;
    ensure(rows.len() == 7, format!("{} rows", rows.len()))?;
    let best = rows[..3]
        .iter()
        .max_by(|a, b| a.mean_acc.total_cmp(&b.mean_acc))
        .expect("three singletons");
    let triple = &rows[6];
    let bound = best.mean_acc - best.ci95;
    let summary = rows
        .iter()
        .map(|r| format!("{}={:.4}", r.strategy.rsplit(':').next().unwrap_or(""), r.mean_acc))
        .collect::<Vec<_>>()
        .join(" ");
    ensure(
        triple.mean_acc >= bound,
        format!("triple {:.4} < {:.4} ({summary})", triple.mean_acc, bound),
    )?;
    Ok(format!("triple {:.4} >= best singleton {:.4} - {:.4} ({summary})", triple.mean_acc, best.mean_acc, best.ci95))
}

fn efficiency() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = reference_config(dir.path(), "reference.conf")?;
    let rows = run_bench(&cfg).map_err(err)?;
    let get = |name: &str| rows.iter().find(|r| r.variant == name).ok_or(format!("no {name} row"));
    let (proto, ens) = (get("a2m_protonet")?, get("a2m_ensemble")?);
    let (first, second) = (get("maml_first")?, get("maml_second")?);
    let train_ratio = ens.train_ms_per_ep / proto.train_ms_per_ep;
    let eval_ratio = ens.eval_ms_per_ep / proto.eval_ms_per_ep;
    ensure(train_ratio <= 3.0, format!("ensemble training {train_ratio:.2}x protonet"))?;
    ensure(eval_ratio <= 3.0, format!("ensemble evaluation {eval_ratio:.2}x protonet"))?;
    ensure(
        second.train_ms_per_ep >= first.train_ms_per_ep,
        format!("second order {:.4} ms < first order {:.4} ms", second.train_ms_per_ep, first.train_ms_per_ep),
    )?;
    Ok(format!(
        "ensemble/protonet train {train_ratio:.2}x eval {eval_ratio:.2}x; maml second/first {:.2}x",
        second.train_ms_per_ep / first.train_ms_per_ep
    ))
}

fn write_config(dir: &Path, record_timing: bool) -> Result<PathBuf, String> {
    let base = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/reference.conf"))
        .map_err(err)?;
    let mut text: String = base
        .lines()
        .filter(|l| !["checkpoint_path", "results_path", "bench_path", "record_timing"].iter().any(|k| l.starts_with(k)))
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str("checkpoint_path = model.a2mc\nresults_path = results.csv\n");
    text.push_str(&format!("record_timing = {record_timing}\n"));
    let path = dir.join("run.conf");
    std::fs::write(&path, text).map_err(err)?;
    Ok(path)
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_a2m")).args(args).output().map_err(err)?;
    ensure(
        out.status.success(),
        format!("a2m {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()),
    )
}

/// Trains and evaluates through the CLI in a fresh directory.
fn cli_run(record_timing: bool) -> Result<(Vec<u8>, String), String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let conf = write_config(dir.path(), record_timing)?;
    let conf = conf.to_str().ok_or("non-UTF-8 temp path")?;
    let ck = dir.path().join("model.a2mc");
    cli(&["train", "--config", conf])?;
    cli(&["eval", "--config", conf, "--checkpoint", ck.to_str().ok_or("non-UTF-8 temp path")?])?;
    let bytes = std::fs::read(&ck).map_err(err)?;
    let results = std::fs::read_to_string(dir.path().join("results.csv")).map_err(err)?;
    let row = results.lines().nth(1).ok_or("results file has no row")?.to_string();
    Ok((bytes, row))
}

fn without_timing(row: &str) -> Vec<String> {
    row.split(',')
        .enumerate()
        .filter(|(i, _)| *i != 6 && *i != 7)
        .map(|(_, f)| f.to_string())
        .collect()
}

fn determinism() -> Outcome {
    let (ck_a, row_a) = cli_run(false)?;
    let (ck_b, row_b) = cli_run(false)?;
    ensure(ck_a == ck_b, "checkpoints differ")?;
    ensure(row_a == row_b, format!("rows differ:\n  {row_a}\n  {row_b}"))?;
    let (ck_c, row_c) = cli_run(true)?;
    ensure(ck_c == ck_a, "checkpoint depends on record_timing")?;
    ensure(without_timing(&row_c) == without_timing(&row_a), "timed run changed non-timing columns")?;
    Ok(format!("{} checkpoint bytes and result rows identical", ck_a.len()))
}

fn data_pipeline() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("data.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut text = String::from("label,f0,f1,f2\n");
    let mut row_class = Vec::new();
    for c in 0..12usize {
        let rows = 20 + 3 * c;
        for r in 0..rows {
            // the first feature encodes (class, row) so every row is identifiable
            let id = (c * 1000 + r) as f64;
            text.push_str(&format!("cls{c},{id},{},{}\n", rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            row_class.push(format!("cls{c}"));
        }
    }
    std::fs::write(&path, text).map_err(err)?;
    let table = load_dataset_csv(&path).map_err(err)?;
    ensure(table.rows() == row_class.len(), "row count")?;

    let mut violations = Vec::new();
    let (ways, shots, queries) = (5, 3, 4);
    for i in 0..1000u64 {
        let ep = table.sample_episode(ways, shots, queries, 9000 + i).map_err(err)?;
        let ids = |x: &Tensor| (0..x.shape().dims()[0]).map(|r| x.at(r, 0) as usize).collect::<Vec<_>>();
        let (s_ids, q_ids) = (ids(&ep.support_x), ids(&ep.query_x));
        let class_of = |id: usize| format!("cls{}", id / 1000);

        if s_ids.iter().any(|s| q_ids.contains(s)) {
            violations.push(format!("episode {i}: support and query share a row"));
        }
        let mut all = s_ids.clone();
        all.extend(&q_ids);
        all.sort_unstable();
        all.dedup();
        if all.len() != s_ids.len() + q_ids.len() {
            violations.push(format!("episode {i}: repeated row"));
        }
        for (ids, labels, per) in [(&s_ids, &ep.support_y, shots), (&q_ids, &ep.query_y, queries)] {
            if ids.len() != ways * per || labels.len() != ways * per {
                violations.push(format!("episode {i}: {} rows, expected {}", ids.len(), ways * per));
                continue;
            }
            for k in 0..ways {
                if labels.iter().filter(|&&y| y == k).count() != per {
                    violations.push(format!("episode {i}: class {k} count"));
                }
            }
            // relabeled classes must be consistent: one original class per label
            for k in 0..ways {
                let mut names: Vec<String> = ids.iter().zip(labels.iter()).filter(|(_, &y)| y == k).map(|(&id, _)| class_of(id)).collect();
                names.dedup();
                if names.len() != 1 {
                    violations.push(format!("episode {i}: label {k} mixes classes"));
                }
            }
            if labels.iter().any(|&y| y >= ways) {
                violations.push(format!("episode {i}: label out of range"));
            }
        }
        let s_class: Vec<String> = (0..ways)
            .map(|k| class_of(s_ids[ep.support_y.iter().position(|&y| y == k).unwrap_or(0)]))
            .collect();
        for (id, &y) in q_ids.iter().zip(&ep.query_y) {
            if y < ways && class_of(*id) != s_class[y] {
                violations.push(format!("episode {i}: query label {y} disagrees with support"));
            }
        }
        let mut distinct = s_class.clone();
        distinct.sort();
        distinct.dedup();
        if distinct.len() != ways {
            violations.push(format!("episode {i}: repeated class"));
        }
    }
    ensure(
        violations.is_empty(),
        format!("{} violations, first: {}", violations.len(), violations.first().cloned().unwrap_or_default()),
    )?;
    Ok("1000 episodes, 0 violations".into())
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 9] = [
        ("gradient exactness", gradient_exactness),
        ("second-order exactness", second_order_exactness),
        ("ridge oracle", ridge_oracle),
        ("detachment invariant", detachment_invariant),
        ("desk-scale learning", desk_scale_learning),
        ("ablation", ablation),
        ("efficiency", efficiency),
        ("determinism", determinism),
        ("data pipeline", data_pipeline),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS {}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}. {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
