use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const RESULTS_HEADER: &str =
    "strategy,ways,shots,eval_episodes,mean_acc,ci95,train_ms_per_ep,eval_ms_per_ep,seed,config_digest";

/// One persisted evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub strategy: String,
    pub ways: usize,
    pub shots: usize,
    pub eval_episodes: usize,
    pub mean_acc: f64,
    pub ci95: f64,
    pub train_ms_per_ep: f64,
    pub eval_ms_per_ep: f64,
    pub seed: u64,
    pub config_digest: String,
}

impl RunRecord {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{:.4},{:.4},{},{}",
            self.strategy,
            self.ways,
            self.shots,
            self.eval_episodes,
            self.mean_acc,
            self.ci95,
            self.train_ms_per_ep,
            self.eval_ms_per_ep,
            self.seed,
            self.config_digest
        );
        s
    }

    /// `0.8512 ± 0.0123` style summary.
    pub fn summary(&self) -> String {
        format!(
            "{:<32} {:.4} ± {:.4}  ({} episodes, train {:.3} ms/ep, eval {:.3} ms/ep)",
            self.strategy, self.mean_acc, self.ci95, self.eval_episodes, self.train_ms_per_ep, self.eval_ms_per_ep
        )
    }
}

/// Mean and 95% half-width `1.96 · s / √n` with the sample standard deviation.
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::validation(format!("a confidence interval needs at least 2 values, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * var.sqrt() / (n as f64).sqrt()))
}

/// Appends rows to a results file, writing the header first if the file is
/// new or empty. An existing file with a different header is rejected.
pub fn append_results(path: &Path, records: &[RunRecord]) -> Result<()> {
    let existing = match std::fs::read_to_string(path) {
        Ok(s) => s,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = String::new();
    if existing.is_empty() {
        out.push_str(RESULTS_HEADER);
        out.push('\n');
    } else {
        let first = existing.lines().next().unwrap_or("");
        if first != RESULTS_HEADER {
            return Err(Error::validation(format!(
                "{} is not a results file (unexpected header `{first}`)",
                path.display()
            )));
        }
        if !existing.ends_with('\n') {
            out.push('\n');
        }
    }
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seed: u64) -> RunRecord {
        RunRecord {
            strategy: "a2m_ensemble".into(),
            ways: 5,
            shots: 1,
            eval_episodes: 600,
            mean_acc: 0.9,
            ci95: 0.01,
            train_ms_per_ep: 1.5,
            eval_ms_per_ep: 0.5,
            seed,
            config_digest: "ab".into(),
        }
    }

    #[test]
    fn ci_cases() {
        assert_eq!(mean_ci95(&[1.0; 10]).unwrap(), (1.0, 0.0));
        assert_eq!(mean_ci95(&[0.7, 0.7]).unwrap().1, 0.0);
        let (m, h) = mean_ci95(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        assert!((h - 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-15);
        assert!(mean_ci95(&[1.0]).is_err());
    }

    #[test]
    fn append_keeps_prior_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        append_results(&p, &[rec(1)]).unwrap();
        let first = std::fs::read_to_string(&p).unwrap();
        append_results(&p, &[rec(2), rec(3)]).unwrap();
        let all = std::fs::read_to_string(&p).unwrap();
        assert!(all.starts_with(&first));
        assert_eq!(all.lines().count(), 4);
        assert_eq!(all.lines().next().unwrap(), RESULTS_HEADER);
        assert!(all.lines().nth(3).unwrap().contains(",3,ab"));
    }

    #[test]
    fn foreign_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, "a,b\n").unwrap();
        assert!(matches!(append_results(&p, &[rec(1)]), Err(Error::Validation(_))));
    }
}
