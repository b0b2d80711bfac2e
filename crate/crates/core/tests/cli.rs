use std::path::Path;
use std::process::{Command, Output};

fn a2m(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a2m")).args(args).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Asserts a single-line `error[kind]: ...` message and the exit code.
fn assert_error(out: &Output, kind: &str, code: i32) {
    let err = stderr(out);
    assert_eq!(out.status.code(), Some(code), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{kind}]: ")), "{err}");
}

fn write_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        "ways = 3\nshots = 1\nqueries = 3\nepisodes_per_epoch = 10\nepochs = 1\n\
         eval_episodes = 10\nval_episodes = 0\nin_dim = 4\nembedding_dims = 8\nmlp_hidden = 4\n\
         pool_classes = 20\ncheckpoint_path = model.a2mc\nresults_path = results.csv\n{extra}"
    );
    let overridden: Vec<&str> = extra.lines().filter_map(|l| l.split('=').next()).map(str::trim).collect();
    let text: String = text
        .lines()
        .filter(|l| !overridden.contains(&l.split('=').next().unwrap_or("").trim()) || extra.contains(*l))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.join("run.conf");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "");
    let ck = dir.path().join("seeded.a2mc");
    let out = a2m(&["train", "--config", &conf, "--seed", "9", "--out", ck.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("epoch 1/1"));
    assert!(ck.exists() && !dir.path().join("model.a2mc").exists());

    let results = dir.path().join("elsewhere.csv");
    let out = a2m(&["eval", "--config", &conf, "--seed", "9", "--checkpoint", ck.to_str().unwrap(), "--out", results.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&results).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "a2m_ensemble:mean_centroid+mlp+init_based");
    assert_eq!(row[8], "9");
}

#[test]
fn missing_config_is_an_io_error() {
    assert_error(&a2m(&["train", "--config", "/nonexistent/x.conf"]), "io", 1);
}

#[test]
fn usage_errors_exit_2() {
    assert_error(&a2m(&["frobnicate"]), "usage", 2);
    assert_error(&a2m(&["eval", "--config", "x.conf"]), "usage", 2);
    assert_error(&a2m(&["train", "--config", "x.conf", "--seed", "minus one"]), "usage", 2);
}

#[test]
fn bad_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "shots = many\n");
    let out = a2m(&["train", "--config", &conf]);
    assert_error(&out, "parse", 1);
    let line = std::fs::read_to_string(&conf).unwrap().lines().position(|l| l == "shots = many").unwrap() + 1;
    assert!(stderr(&out).contains(&format!(":{line}:")), "{}", stderr(&out));

    let conf = write_config(dir.path(), "colour = blue\n");
    assert_error(&a2m(&["train", "--config", &conf]), "parse", 1);
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "");
    let ck = dir.path().join("junk.a2mc");
    std::fs::write(&ck, b"A2MC\x01\x00").unwrap();
    let out = a2m(&["eval", "--config", &conf, "--checkpoint", ck.to_str().unwrap()]);
    assert_error(&out, "format", 1);
    assert!(!dir.path().join("results.csv").exists());
}

#[test]
fn invalid_values_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "pool_classes = 4\n");
    assert_error(&a2m(&["train", "--config", &conf]), "validation", 1);
}

#[test]
fn help_succeeds() {
    let out = a2m(&["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("ablate"));
}
