//! Inner-task algorithms.
//!
//! Each algorithm consumes an embedded support set and produces
//! task-specific parameters ([`TaskParams`]) that can score query embeddings
//! through [`predict_logits`].
//!
//! Whether an adaptation is coupled to the embedding network is decided by
//! the caller: pass tracked embeddings and the adaptation is differentiable
//! end to end, pass detached ones and it is a plain numeric solve.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, sgd_step, softmax_cross_entropy, Shape, Tape, Tensor};
use crate::error::{Error, Result};
use crate::networks::{pairwise_sq_dist, Head, LinearHead, MlpArch, MlpHead, Parameterized};

/// Class centers, one row per class.
#[derive(Clone, Debug)]
pub struct Prototypes {
    pub centers: Tensor,
}

/// How the meta-gradient reaches the shared head of the init-based learner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdaptMode {
    /// The shared head never receives a meta-gradient.
    Detached,
    /// The query-loss gradient at the adapted head is applied to the shared head.
    FirstOrder,
    /// The inner steps are differentiated, giving the exact gradient w.r.t. the shared head.
    SecondOrder,
}

impl AdaptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptMode::Detached => "detached",
            AdaptMode::FirstOrder => "first_order",
            AdaptMode::SecondOrder => "second_order",
        }
    }
}

impl std::str::FromStr for AdaptMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detached" => Ok(AdaptMode::Detached),
            "first_order" => Ok(AdaptMode::FirstOrder),
            "second_order" => Ok(AdaptMode::SecondOrder),
            _ => Err(Error::validation(format!(
                "unknown adaptation mode `{s}` (expected detached, first_order or second_order)"
            ))),
        }
    }
}

/// A linear head adapted from the shared head by a few gradient steps.
#[derive(Clone, Debug)]
pub struct AdaptedHead {
    pub head: LinearHead,
    pub steps_taken: usize,
    /// The shared head the adaptation started from.
    pub source: LinearHead,
}

/// A freshly initialised MLP head trained on the support set.
#[derive(Clone, Debug)]
pub struct MlpHeadParams {
    pub head: MlpHead,
    pub seed: u64,
    pub steps_taken: usize,
}

/// Closed-form ridge-regression weights mapping embeddings to one-hot targets.
#[derive(Clone, Debug)]
pub struct RidgeWeights {
    pub weight: Tensor,
    pub lambda: f64,
}

/// Task-specific parameters produced by an inner-task algorithm.
#[derive(Clone, Debug)]
pub enum TaskParams {
    Prototypes(Prototypes),
    AdaptedHead(AdaptedHead),
    Mlp(MlpHeadParams),
    Ridge(RidgeWeights),
    Ensemble(Vec<TaskParams>),
}

impl TaskParams {
    pub fn ways(&self) -> usize {
        match self {
            TaskParams::Prototypes(p) => p.centers.shape().dims()[0],
            TaskParams::AdaptedHead(a) => a.head.ways(),
            TaskParams::Mlp(m) => m.head.ways(),
            TaskParams::Ridge(r) => r.weight.shape().dims()[1],
            TaskParams::Ensemble(v) => v.first().map_or(0, TaskParams::ways),
        }
    }
}

/// Per-class mean of the support embeddings.
///
/// The mean is computed as a product with a fixed averaging matrix, so it is
/// differentiable whenever `emb` is tracked.
pub fn mean_centroid(emb: &Tensor, labels: &[usize], ways: usize) -> Result<Prototypes> {
    let (n, _) = emb.expect_matrix("mean_centroid", "emb")?;
    if labels.len() != n {
        return Err(Error::validation(format!(
            "mean_centroid: {} labels for {n} embeddings",
            labels.len()
        )));
    }
    if ways == 0 {
        return Err(Error::validation("mean_centroid: way count must be positive"));
    }
    let mut counts = vec![0usize; ways];
    for &y in labels {
        if y >= ways {
            return Err(Error::validation(format!(
                "mean_centroid: label {y} is outside 0..{ways}"
            )));
        }
        counts[y] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::validation(format!(
            "mean_centroid: class {k} has no support samples"
        )));
    }
    let mut avg = vec![0.0; ways * n];
    for (j, &y) in labels.iter().enumerate() {
        avg[y * n + j] = 1.0 / counts[y] as f64;
    }
    let avg = Tensor::from_vec(&[ways, n], avg)?;
    Ok(Prototypes {
        centers: avg.matmul(emb)?,
    })
}

/// Runs `steps` gradient-descent steps of support cross-entropy from `start`.
///
/// With `differentiable` set, every step is recorded (gradients taken with
/// `create_graph`), so the result stays a function of `start` and `emb`.
/// Otherwise each step runs on a throwaway tape and the result is constant.
fn descend_head<H>(
    start: &H,
    emb: &Tensor,
    labels: &[usize],
    mut steps: usize,
    lr: f64,
    differentiable: bool,
) -> Result<H>
where
    H: Head + Parameterized + DirectGrad,
{
    if !differentiable {
        let emb = emb.detach();
        let mut head = start.detach();
        while let Some(grads) = (steps > 0).then(|| head.direct_grads(&emb, labels)).flatten() {
            let updated = head
                .params()
                .iter()
                .zip(grads)
                .map(|(p, g)| {
                    let v = p.values().iter().zip(&g).map(|(a, b)| a - lr * b).collect();
                    Tensor::from_vec(p.shape().dims(), v)
                })
                .collect::<Result<Vec<_>>>()?;
            head = head.with_params(updated)?;
            steps -= 1;
        }
        // Shape or label problems fall through to the taped step, which reports them.
        for _ in 0..steps {
            let tape = Tape::new();
            let tracked = head.track(&tape);
            let params = tracked.params();
            let loss = softmax_cross_entropy(&tracked.logits(&emb)?, labels)?;
            let grads = backward(&loss, &params, false)?;
            head = head.with_params(sgd_step(&params, &grads, lr)?)?;
        }
        return Ok(head);
    }

    let start_tracked = start.params().iter().all(|p| p.is_tracked());
    let mut head = match (start_tracked, emb.tape()) {
        (true, _) => start.with_params(start.params().into_iter().cloned().collect())?,
        (false, Some(tape)) => start.track(tape),
        (false, None) => start.track(&Tape::new()),
    };
    for _ in 0..steps {
        let params = head.params();
        let loss = softmax_cross_entropy(&head.logits(emb)?, labels)?;
        let grads = backward(&loss, &params, true)?.ordered(&params)?;
        let updated = params
            .iter()
            .zip(&grads)
            .map(|(p, g)| p.sub(&g.scale(lr)?))
            .collect::<Result<Vec<_>>>()?;
        head = head.with_params(updated)?;
    }
    Ok(head)
}

/// Support cross-entropy gradients computed without a tape, in
/// [`Parameterized::params`] order. `None` when `emb` or `labels` do not fit.
trait DirectGrad {
    fn direct_grads(&self, emb: &Tensor, labels: &[usize]) -> Option<Vec<Vec<f64>>>;
}

impl DirectGrad for LinearHead {
    fn direct_grads(&self, emb: &Tensor, labels: &[usize]) -> Option<Vec<Vec<f64>>> {
        let n = fits(emb, self.layer.fan_in(), labels, self.layer.fan_out())?;
        let z = affine(emb.values(), n, &self.layer);
        let g = ce_grad(z, labels, self.layer.fan_out());
        let (dw, db) = dense_grads(emb.values(), &g, n, &self.layer);
        Some(vec![dw, db])
    }
}

impl DirectGrad for MlpHead {
    fn direct_grads(&self, emb: &Tensor, labels: &[usize]) -> Option<Vec<Vec<f64>>> {
        let n = fits(emb, self.hidden.fan_in(), labels, self.output.fan_out())?;
        if self.output.fan_in() != self.hidden.fan_out() {
            return None;
        }
        let pre = affine(emb.values(), n, &self.hidden);
        let act: Vec<f64> = pre.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let z = affine(&act, n, &self.output);
        let g = ce_grad(z, labels, self.output.fan_out());
        let (dw2, db2) = dense_grads(&act, &g, n, &self.output);

        let (h, k) = (self.output.fan_in(), self.output.fan_out());
        let w2 = self.output.weight.values();
        let mut dpre = vec![0.0; n * h];
        for r in 0..n {
            let gr = &g[r * k..(r + 1) * k];
            for i in 0..h {
                if pre[r * h + i] > 0.0 {
                    dpre[r * h + i] = w2[i * k..(i + 1) * k].iter().zip(gr).map(|(w, g)| w * g).sum();
                }
            }
        }
        let (dw1, db1) = dense_grads(emb.values(), &dpre, n, &self.hidden);
        Some(vec![dw1, db1, dw2, db2])
    }
}

fn fits(emb: &Tensor, in_dim: usize, labels: &[usize], ways: usize) -> Option<usize> {
    match emb.shape().dims() {
        &[n, d] if d == in_dim && labels.len() == n && labels.iter().all(|&y| y < ways) => Some(n),
        _ => None,
    }
}

/// `x · W + b` for an `n`-row matrix `x`.
fn affine(x: &[f64], n: usize, layer: &crate::networks::Dense) -> Vec<f64> {
    let (d, o) = (layer.fan_in(), layer.fan_out());
    let w = layer.weight.values();
    let mut out = Vec::with_capacity(n * o);
    for r in 0..n {
        out.extend_from_slice(layer.bias.values());
        let row = &mut out[r * o..];
        for (i, &xv) in x[r * d..(r + 1) * d].iter().enumerate() {
            for (acc, &wv) in row.iter_mut().zip(&w[i * o..(i + 1) * o]) {
                *acc += xv * wv;
            }
        }
    }
    out
}

/// Gradient of mean cross-entropy with respect to the logits, in place.
fn ce_grad(mut z: Vec<f64>, labels: &[usize], k: usize) -> Vec<f64> {
    let n = labels.len() as f64;
    for (row, &y) in z.chunks_exact_mut(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum * n;
        }
        row[y] -= 1.0 / n;
    }
    z
}

/// Weight and bias gradients of a dense layer given its input and output gradient.
fn dense_grads(x: &[f64], g: &[f64], n: usize, layer: &crate::networks::Dense) -> (Vec<f64>, Vec<f64>) {
    let (d, o) = (layer.fan_in(), layer.fan_out());
    let mut dw = vec![0.0; d * o];
    let mut db = vec![0.0; o];
    for r in 0..n {
        let gr = &g[r * o..(r + 1) * o];
        for (b, gv) in db.iter_mut().zip(gr) {
            *b += gv;
        }
        for (i, &xv) in x[r * d..(r + 1) * d].iter().enumerate() {
            for (acc, &gv) in dw[i * o..(i + 1) * o].iter_mut().zip(gr) {
                *acc += xv * gv;
            }
        }
    }
    (dw, db)
}

fn check_step_args(steps: usize, lr: f64) -> Result<()> {
    let _ = steps;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::validation(format!(
            "inner learning rate must be finite and non-negative, got {lr}"
        )));
    }
    Ok(())
}

/// Adapts the shared linear head to the support set by gradient descent.
///
/// In [`AdaptMode::SecondOrder`] the steps are recorded so the result is a
/// differentiable function of `shared` (which should then be tracked). The
/// other modes start from a detached copy. Tracked `emb` always makes the
/// adaptation differentiable with respect to the embeddings.
pub fn init_based_adapt(
    shared: &LinearHead,
    emb: &Tensor,
    labels: &[usize],
    steps: usize,
    lr: f64,
    mode: AdaptMode,
) -> Result<AdaptedHead> {
    check_step_args(steps, lr)?;
    let differentiable = mode == AdaptMode::SecondOrder || emb.is_tracked();
    let start = match mode {
        AdaptMode::SecondOrder => shared.clone(),
        _ => shared.detach(),
    };
    let head = descend_head(&start, emb, labels, steps, lr, differentiable)?;
    Ok(AdaptedHead {
        head,
        steps_taken: steps,
        source: shared.clone(),
    })
}

/// Trains a freshly seeded two-layer MLP head on the support set.
pub fn mlp_adapt(
    arch: MlpArch,
    emb: &Tensor,
    labels: &[usize],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<MlpHeadParams> {
    check_step_args(steps, lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = MlpHead::init(arch, &mut rng)?;
    let head = descend_head(&init, emb, labels, steps, lr, emb.is_tracked())?;
    Ok(MlpHeadParams {
        head,
        seed,
        steps_taken: steps,
    })
}

/// `n×K` one-hot encoding of `labels`.
pub fn one_hot(labels: &[usize], ways: usize) -> Result<Tensor> {
    let n = labels.len();
    let mut v = vec![0.0; n * ways];
    for (i, &y) in labels.iter().enumerate() {
        if y >= ways {
            return Err(Error::validation(format!("label {y} is outside 0..{ways}")));
        }
        v[i * ways + y] = 1.0;
    }
    Tensor::new(Shape::new(vec![n, ways])?, v)
}

/// Ridge regression `W = (XᵀX + λI)⁻¹ XᵀY`, solved by Cholesky factorisation.
///
/// The solve runs on detached values; the result is a constant.
pub fn ridge_fit(emb: &Tensor, targets: &Tensor, lambda: f64) -> Result<RidgeWeights> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::validation(format!(
            "ridge lambda must be positive and finite, got {lambda}"
        )));
    }
    let (n, d) = emb.expect_matrix("ridge_fit", "emb")?;
    let (n2, k) = targets.expect_matrix("ridge_fit", "labels_onehot")?;
    if n != n2 {
        return Err(Error::Dimension {
            op: "ridge_fit",
            operand: "labels_onehot",
            expected: format!("{n} rows"),
            got: targets.shape().to_string(),
        });
    }
    if !emb.is_finite() || !targets.is_finite() {
        return Err(Error::Numeric("ridge_fit: non-finite input".into()));
    }
    let (x, y) = (emb.values(), targets.values());
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d * k];
    for r in 0..n {
        let xr = &x[r * d..(r + 1) * d];
        let yr = &y[r * k..(r + 1) * k];
        for i in 0..d {
            for j in 0..d {
                gram[i * d + j] += xr[i] * xr[j];
            }
            for c in 0..k {
                rhs[i * k + c] += xr[i] * yr[c];
            }
        }
    }
    for i in 0..d {
        gram[i * d + i] += lambda;
    }
    let w = cholesky_solve(&gram, d, &rhs, k)?;
    Ok(RidgeWeights {
        weight: Tensor::from_vec(&[d, k], w)?,
        lambda,
    })
}

/// Solves `A X = B` for symmetric positive-definite `A` (`d×d`), `B` (`d×k`).
fn cholesky_solve(a: &[f64], d: usize, b: &[f64], k: usize) -> Result<Vec<f64>> {
    // A = L Lᵀ
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|p| l[i * d + p] * l[j * d + p]).sum();
            if i == j {
                let diag = a[i * d + i] - s;
                if !diag.is_finite() || diag <= 0.0 {
                    return Err(Error::Numeric(format!(
                        "ridge_fit: system is not positive definite at pivot {i}"
                    )));
                }
                l[i * d + i] = diag.sqrt();
            } else {
                l[i * d + j] = (a[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    let mut x = b.to_vec();
    for c in 0..k {
        // forward: L z = b
        for i in 0..d {
            let s: f64 = (0..i).map(|p| l[i * d + p] * x[p * k + c]).sum();
            x[i * k + c] = (x[i * k + c] - s) / l[i * d + i];
        }
        // backward: Lᵀ x = z
        for i in (0..d).rev() {
            let s: f64 = (i + 1..d).map(|p| l[p * d + i] * x[p * k + c]).sum();
            x[i * k + c] = (x[i * k + c] - s) / l[i * d + i];
        }
    }
    Ok(x)
}

/// Query logits under a set of task-specific parameters.
pub fn predict_logits(params: &TaskParams, query_emb: &Tensor) -> Result<Tensor> {
    match params {
        TaskParams::Prototypes(p) => pairwise_sq_dist(query_emb, &p.centers)?.neg(),
        TaskParams::AdaptedHead(a) => a.head.logits(query_emb),
        TaskParams::Mlp(m) => m.head.logits(query_emb),
        TaskParams::Ridge(r) => query_emb.matmul(&r.weight),
        TaskParams::Ensemble(members) => {
            let parts = members
                .iter()
                .map(|m| predict_logits(m, query_emb))
                .collect::<Result<Vec<_>>>()?;
            ensemble_logits(&parts)
        }
    }
}

/// Elementwise sum of per-component logits.
pub fn ensemble_logits(per_component: &[Tensor]) -> Result<Tensor> {
    let Some((first, rest)) = per_component.split_first() else {
        return Err(Error::validation("ensemble_logits: no components"));
    };
    let mut acc = first.clone();
    for (i, part) in rest.iter().enumerate() {
        if part.shape() != first.shape() {
            return Err(Error::validation(format!(
                "ensemble_logits: component {} has shape {}, expected {}",
                i + 1,
                part.shape(),
                first.shape()
            )));
        }
        acc = acc.add(part)?;
    }
    Ok(acc)
}
