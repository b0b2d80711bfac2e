//! Episodic task sampling from synthetic Gaussian tasks or CSV feature tables.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One few-shot task: a K-way support set with m shots per class and a query
/// set with q samples per class, labels relabeled to `0..K` by sampled order.
#[derive(Clone, Debug)]
pub struct Episode {
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub seed: u64,
    /// Source class of each episode label.
    pub classes: Vec<usize>,
    /// Source instance id of each support row.
    pub support_rows: Vec<usize>,
    /// Source instance id of each query row.
    pub query_rows: Vec<usize>,
}

impl Episode {
    pub fn in_dim(&self) -> usize {
        self.support_x.shape().dims()[1]
    }
}

/// Anything episodes can be drawn from.
pub trait EpisodeSource: Sync {
    fn in_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn sample_episode(&self, ways: usize, shots: usize, queries: usize, seed: u64)
        -> Result<Episode>;
}

/// Draws one episode from `source`.
pub fn sample_episode(
    source: &dyn EpisodeSource,
    ways: usize,
    shots: usize,
    queries: usize,
    seed: u64,
) -> Result<Episode> {
    source.sample_episode(ways, shots, queries, seed)
}

fn check_episode_shape(ways: usize, shots: usize, queries: usize) -> Result<()> {
    if ways == 0 || shots == 0 || queries == 0 {
        return Err(Error::validation(format!(
            "episode needs positive ways, shots and queries, got K={ways} m={shots} q={queries}"
        )));
    }
    Ok(())
}

/// Assembles an episode from per-class instance lists (in sampled class order).
/// The first `shots` instances of each class go to the support set.
fn assemble(
    per_class: &[Vec<(usize, Vec<f64>)>],
    classes: Vec<usize>,
    shots: usize,
    queries: usize,
    seed: u64,
) -> Result<Episode> {
    let ways = per_class.len();
    let mut sx = Vec::new();
    let mut qx = Vec::new();
    let (mut sy, mut qy) = (Vec::new(), Vec::new());
    let (mut srows, mut qrows) = (Vec::new(), Vec::new());
    let mut dim = 0;
    for (label, insts) in per_class.iter().enumerate() {
        for (i, (row, x)) in insts.iter().enumerate() {
            dim = x.len();
            if i < shots {
                sx.extend_from_slice(x);
                sy.push(label);
                srows.push(*row);
            } else {
                qx.extend_from_slice(x);
                qy.push(label);
                qrows.push(*row);
            }
        }
    }
    Ok(Episode {
        support_x: Tensor::from_vec(&[ways * shots, dim], sx)?,
        support_y: sy,
        query_x: Tensor::from_vec(&[ways * queries, dim], qx)?,
        query_y: qy,
        ways,
        shots,
        queries,
        seed,
        classes,
        support_rows: srows,
        query_rows: qrows,
    })
}

/// Synthetic task distribution: each latent class is a spherical Gaussian.
///
/// `noise_sigma` is the root-mean-square length of a noise vector, so each
/// coordinate has standard deviation `noise_sigma / sqrt(in_dim)`. Class means
/// are placed on mutually orthogonal directions (in blocks of `in_dim`) so that
/// any two means within a block are exactly `class_separation * noise_sigma`
/// apart. With `noise_sigma = 0` the separation is measured in absolute units.
#[derive(Clone, Debug)]
pub struct GaussianTaskDist {
    pub in_dim: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub pool_classes: usize,
    pub seed: u64,
    means: Vec<Vec<f64>>,
    /// Pool classes available for sampling.
    available: Vec<usize>,
}

/// Builds a Gaussian task distribution, drawing the class means once.
pub fn make_gaussian_dist(
    in_dim: usize,
    class_separation: f64,
    noise_sigma: f64,
    pool_classes: usize,
    seed: u64,
) -> Result<GaussianTaskDist> {
    if in_dim == 0 || pool_classes == 0 {
        return Err(Error::validation(format!(
            "gaussian source needs positive in_dim and pool_classes, got {in_dim} and {pool_classes}"
        )));
    }
    if !(class_separation >= 0.0 && class_separation.is_finite()) {
        return Err(Error::validation(format!(
            "class_separation must be finite and non-negative, got {class_separation}"
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::validation(format!(
            "noise_sigma must be finite and non-negative, got {noise_sigma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = if noise_sigma > 0.0 { noise_sigma } else { 1.0 };
    let radius = class_separation * unit / std::f64::consts::SQRT_2;
    let mut means = Vec::with_capacity(pool_classes);
    while means.len() < pool_classes {
        let block = (pool_classes - means.len()).min(in_dim);
        for dir in orthonormal(&mut rng, in_dim, block) {
            means.push(dir.into_iter().map(|v| v * radius).collect());
        }
    }
    Ok(GaussianTaskDist {
        in_dim,
        class_separation,
        noise_sigma,
        pool_classes,
        seed,
        means,
        available: (0..pool_classes).collect(),
    })
}

/// `count` orthonormal vectors in `dim` dimensions (Gram-Schmidt on Gaussian draws).
fn orthonormal(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

impl GaussianTaskDist {
    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class]
    }

    /// Pool classes this distribution samples from.
    pub fn classes(&self) -> &[usize] {
        &self.available
    }

    /// The same distribution restricted to a subset of pool classes.
    pub fn restrict(&self, classes: &[usize]) -> Result<Self> {
        if let Some(&c) = classes.iter().find(|&&c| c >= self.pool_classes) {
            return Err(Error::validation(format!(
                "class {c} is outside the pool of {}",
                self.pool_classes
            )));
        }
        Ok(Self {
            available: classes.to_vec(),
            ..self.clone()
        })
    }

    /// Partitions the pool classes into train/val/test distributions.
    pub fn split(&self, fractions: [f64; 3], seed: u64) -> Result<[Self; 3]> {
        let parts = partition_classes(self.available.len(), fractions, seed)?;
        let pick = |ids: &[usize]| -> Vec<usize> { ids.iter().map(|&i| self.available[i]).collect() };
        Ok([
            self.restrict(&pick(&parts[0]))?,
            self.restrict(&pick(&parts[1]))?,
            self.restrict(&pick(&parts[2]))?,
        ])
    }
}

impl EpisodeSource for GaussianTaskDist {
    fn in_dim(&self) -> usize {
        self.in_dim
    }

    fn num_classes(&self) -> usize {
        self.available.len()
    }

    fn sample_episode(&self, ways: usize, shots: usize, queries: usize, seed: u64) -> Result<Episode> {
        check_episode_shape(ways, shots, queries)?;
        if self.available.len() < ways {
            return Err(Error::validation(format!(
                "cannot sample a {ways}-way episode from {} classes",
                self.available.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chosen: Vec<usize> = index::sample(&mut rng, self.available.len(), ways)
            .into_iter()
            .map(|i| self.available[i])
            .collect();
        let std = self.noise_sigma / (self.in_dim as f64).sqrt();
        let mut next_row = 0;
        let per_class: Vec<Vec<(usize, Vec<f64>)>> = chosen
            .iter()
            .map(|&c| {
                (0..shots + queries)
                    .map(|_| {
                        let x = self.means[c]
                            .iter()
                            .map(|&mu| mu + std * rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        next_row += 1;
                        (next_row - 1, x)
                    })
                    .collect()
            })
            .collect();
        assemble(&per_class, chosen, shots, queries, seed)
    }
}

/// A labeled feature table, typically loaded from CSV.
#[derive(Clone, Debug)]
pub struct DatasetTable {
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Original label text of each class index.
    pub class_names: Vec<String>,
    /// Row ids of each class.
    pub class_index: Vec<Vec<usize>>,
}

impl DatasetTable {
    pub fn new(features: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let (rows, _) = features.expect_matrix("DatasetTable", "features")?;
        if labels.len() != rows {
            return Err(Error::validation(format!(
                "{} labels for {rows} feature rows",
                labels.len()
            )));
        }
        let mut class_index = vec![Vec::new(); class_names.len()];
        for (r, &y) in labels.iter().enumerate() {
            let slot = class_index.get_mut(y).ok_or_else(|| {
                Error::validation(format!("row {r} has label {y} but only {} classes", class_names.len()))
            })?;
            slot.push(r);
        }
        Ok(Self {
            features,
            labels,
            class_names,
            class_index,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    /// A table holding only `classes` (relabeled in the given order).
    pub fn subset(&self, classes: &[usize]) -> Result<Self> {
        let d = self.in_dim();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut names = Vec::new();
        for (new, &c) in classes.iter().enumerate() {
            let rows = self
                .class_index
                .get(c)
                .ok_or_else(|| Error::validation(format!("class {c} is not in the table")))?;
            names.push(self.class_names[c].clone());
            for &r in rows {
                values.extend_from_slice(self.features.row(r));
                labels.push(new);
            }
        }
        if labels.is_empty() {
            return Err(Error::validation("class subset has no rows"));
        }
        Self::new(Tensor::from_vec(&[labels.len(), d], values)?, labels, names)
    }
}

impl EpisodeSource for DatasetTable {
    fn in_dim(&self) -> usize {
        self.features.shape().dims()[1]
    }

    fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Classes with fewer than `shots + queries` rows are never chosen.
    fn sample_episode(&self, ways: usize, shots: usize, queries: usize, seed: u64) -> Result<Episode> {
        check_episode_shape(ways, shots, queries)?;
        let need = shots + queries;
        let eligible: Vec<usize> = (0..self.num_classes())
            .filter(|&c| self.class_index[c].len() >= need)
            .collect();
        if eligible.len() < ways {
            return Err(Error::validation(format!(
                "cannot sample a {ways}-way episode: {} of {} classes have at least {need} instances",
                eligible.len(),
                self.num_classes()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chosen: Vec<usize> = index::sample(&mut rng, eligible.len(), ways)
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        let per_class: Vec<Vec<(usize, Vec<f64>)>> = chosen
            .iter()
            .map(|&c| {
                let rows = &self.class_index[c];
                index::sample(&mut rng, rows.len(), need)
                    .into_iter()
                    .map(|i| (rows[i], self.features.row(rows[i]).to_vec()))
                    .collect()
            })
            .collect();
        assemble(&per_class, chosen, shots, queries, seed)
    }
}

/// Reads a `label,f0,f1,...` CSV file. Labels may be integers or strings;
/// class indices are assigned in order of first appearance.
pub fn load_dataset_csv(path: &Path) -> Result<DatasetTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset_csv(&text, path)
}

fn parse_dataset_csv(text: &str, path: &Path) -> Result<DatasetTable> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some(h) => break h,
            None => return Err(Error::validation(format!("{}: dataset file is empty", path.display()))),
        }
    };
    let cols: Vec<&str> = header.1.split(',').collect();
    if cols[0] != "label" || cols.len() < 2 {
        return Err(perr(header.0, "header must be `label,f0,f1,...`".into()));
    }
    for (i, c) in cols[1..].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(perr(header.0, format!("unexpected header column `{c}`, expected `f{i}`")));
        }
    }
    let dim = cols.len() - 1;

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(perr(
                lineno,
                format!("expected {} fields, found {}", dim + 1, fields.len()),
            ));
        }
        let name = fields[0].trim();
        if name.is_empty() {
            return Err(perr(lineno, "empty label".into()));
        }
        let id = *ids.entry(name.to_string()).or_insert_with(|| {
            names.push(name.to_string());
            names.len() - 1
        });
        labels.push(id);
        for (j, f) in fields[1..].iter().enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| perr(lineno, format!("feature f{j} is not a number: `{f}`")))?;
            if !v.is_finite() {
                return Err(perr(lineno, format!("feature f{j} is not finite")));
            }
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::validation(format!("{}: dataset has no rows", path.display())));
    }
    DatasetTable::new(Tensor::from_vec(&[labels.len(), dim], values)?, labels, names)
}

/// Writes a table in the format read by [`load_dataset_csv`].
pub fn write_dataset_csv(table: &DatasetTable, path: &Path) -> Result<()> {
    let d = table.in_dim();
    let mut out = String::from("label");
    for j in 0..d {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for (r, &y) in table.labels.iter().enumerate() {
        out.push_str(&table.class_names[y]);
        for v in table.features.row(r) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Class counts for a three-way split of `n` classes by largest remainder.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(Error::validation(format!("split fractions must be non-negative, got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!("split fractions must sum to 1, got {total}")));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    let empty: Vec<&str> = ["train", "val", "test"]
        .iter()
        .zip(counts)
        .filter(|(_, c)| *c == 0)
        .map(|(s, _)| *s)
        .collect();
    if !empty.is_empty() {
        return Err(Error::validation(format!(
            "splitting {n} classes by {fractions:?} leaves no classes in: {}",
            empty.join(", ")
        )));
    }
    Ok(counts)
}

/// Seeded partition of class ids `0..n` into train/val/test sets.
pub fn partition_classes(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let counts = split_counts(n, fractions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = index::sample(&mut rng, n, n).into_vec();
    let (a, rest) = order.split_at(counts[0]);
    let (b, c) = rest.split_at(counts[1]);
    Ok([a.to_vec(), b.to_vec(), c.to_vec()])
}

/// Splits a table by class (not by row) into train/val/test tables.
pub fn split_classes(table: &DatasetTable, fractions: [f64; 3], seed: u64) -> Result<[DatasetTable; 3]> {
    let [a, b, c] = partition_classes(table.num_classes(), fractions, seed)?;
    Ok([table.subset(&a)?, table.subset(&b)?, table.subset(&c)?])
}
