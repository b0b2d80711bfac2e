//! Meta-training strategies and episode evaluation.
//!
//! Gradient computation is kept separate from parameter updates: the
//! `*_gradient` functions return a [`MetaGrads`] that the `*_step` functions
//! apply with plain SGD, and that the harness can average over a meta-batch
//! or feed to [`MetaOptimizer`].

use std::time::{Duration, Instant};

use rand::Rng;

use crate::autodiff::{backward, descend, softmax_cross_entropy, Tape, Tensor};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::inner::{
    init_based_adapt, mean_centroid, mlp_adapt, predict_logits, AdaptMode, TaskParams,
};
use crate::networks::{pairwise_sq_dist, EmbeddingNet, Head, LinearHead, MlpArch, Parameterized};

/// The meta-parameters: embedding network and the shared init-based head.
#[derive(Clone, Debug)]
pub struct MetaModel {
    pub embedding: EmbeddingNet,
    pub shared_head: LinearHead,
    pub meta_lr: f64,
}

impl MetaModel {
    pub fn new(embedding: EmbeddingNet, shared_head: LinearHead, meta_lr: f64) -> Result<Self> {
        if shared_head.in_dim() != embedding.out_dim() {
            return Err(Error::Dimension {
                op: "MetaModel",
                operand: "shared_head",
                expected: format!("input width {}", embedding.out_dim()),
                got: format!("{}", shared_head.in_dim()),
            });
        }
        Ok(Self {
            embedding,
            shared_head,
            meta_lr,
        })
    }

    /// Glorot-initialised model. `dims` includes the input width.
    pub fn init(dims: &[usize], ways: usize, meta_lr: f64, rng: &mut impl Rng) -> Result<Self> {
        let embedding = EmbeddingNet::init(dims, rng)?;
        let shared_head = LinearHead::init(embedding.out_dim(), ways, rng)?;
        Self::new(embedding, shared_head, meta_lr)
    }

    pub fn ways(&self) -> usize {
        self.shared_head.ways()
    }

    /// Embedding parameters followed by head parameters.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.embedding.params();
        p.extend(self.shared_head.params());
        p
    }

    pub fn with_params(&self, mut params: Vec<Tensor>) -> Result<Self> {
        let n = self.embedding.params().len();
        if params.len() < n {
            return Err(Error::validation(format!(
                "expected at least {n} parameter arrays, got {}",
                params.len()
            )));
        }
        let head = params.split_off(n);
        Self::new(
            self.embedding.with_params(params)?,
            self.shared_head.with_params(head)?,
            self.meta_lr,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// True when every parameter is bitwise identical.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.params(), other.params());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.bit_eq(y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    A2mEnsemble,
    A2mSingle,
    CoupledProtonet,
    CoupledMaml,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::A2mEnsemble,
        Strategy::A2mSingle,
        Strategy::CoupledProtonet,
        Strategy::CoupledMaml,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::A2mEnsemble => "a2m_ensemble",
            Strategy::A2mSingle => "a2m_single",
            Strategy::CoupledProtonet => "coupled_protonet",
            Strategy::CoupledMaml => "coupled_maml",
        }
    }

    pub fn is_a2m(self) -> bool {
        matches!(self, Strategy::A2mEnsemble | Strategy::A2mSingle)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown strategy `{s}`")))
    }
}

/// Inner-task algorithms available to the decoupled strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    MeanCentroid,
    Mlp,
    InitBased,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::MeanCentroid, Component::Mlp, Component::InitBased];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::MeanCentroid => "mean_centroid",
            Component::Mlp => "mlp",
            Component::InitBased => "init_based",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Component::MeanCentroid => 0x6d63,
            Component::Mlp => 0x6d6c70,
            Component::InitBased => 0x696e6974,
        }
    }
}

impl std::str::FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown component `{s}`")))
    }
}

/// Short label for a component set, e.g. `mean_centroid+mlp`.
pub fn components_label(components: &[Component]) -> String {
    components.iter().map(|c| c.as_str()).collect::<Vec<_>>().join("+")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MamlOrder {
    First,
    Second,
}

impl MamlOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            MamlOrder::First => "first",
            MamlOrder::Second => "second",
        }
    }
}

impl std::str::FromStr for MamlOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(MamlOrder::First),
            "second" => Ok(MamlOrder::Second),
            _ => Err(Error::validation(format!("unknown maml_order `{s}` (expected first or second)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub components: Vec<Component>,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub anil_mode: AdaptMode,
    pub maml_order: MamlOrder,
    pub detach_task_params: bool,
    pub mlp_hidden: usize,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::A2mEnsemble,
            components: Component::ALL.to_vec(),
            inner_steps: 5,
            inner_lr: 0.01,
            anil_mode: AdaptMode::FirstOrder,
            maml_order: MamlOrder::Second,
            detach_task_params: true,
            mlp_hidden: 32,
        }
    }
}

impl StrategyConfig {
    pub fn a2m(components: &[Component]) -> Self {
        let strategy = if components.len() == 1 {
            Strategy::A2mSingle
        } else {
            Strategy::A2mEnsemble
        };
        Self {
            strategy,
            components: components.to_vec(),
            ..Self::default()
        }
    }

    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            components: if strategy == Strategy::A2mSingle {
                vec![Component::MeanCentroid]
            } else {
                Component::ALL.to_vec()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy.is_a2m() {
            if self.components.is_empty() {
                return Err(Error::validation(format!(
                    "strategy {} needs at least one component",
                    self.strategy.as_str()
                )));
            }
            if self.strategy == Strategy::A2mSingle && self.components.len() != 1 {
                return Err(Error::validation(format!(
                    "a2m_single needs exactly one component, got {}",
                    components_label(&self.components)
                )));
            }
            let mut seen = self.components.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != self.components.len() {
                return Err(Error::validation("components must not repeat"));
            }
        }
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::validation(format!(
                "inner_lr must be finite and non-negative, got {}",
                self.inner_lr
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::validation("mlp_hidden must be positive"));
        }
        Ok(())
    }

    /// Components in canonical order.
    pub fn sorted_components(&self) -> Vec<Component> {
        let mut c = self.components.clone();
        c.sort();
        c
    }
}

/// Result of one training or evaluation episode.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub query_loss: f64,
    pub query_accuracy: f64,
    pub wall_time: Duration,
    pub grads_applied: bool,
}

/// Gradients for every meta-parameter, in [`MetaModel::params`] order.
#[derive(Clone, Debug)]
pub struct MetaGrads {
    pub grads: Vec<Tensor>,
}

impl MetaGrads {
    pub fn zeros_like(model: &MetaModel) -> Self {
        Self {
            grads: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Elementwise mean of several gradient sets, reduced in the given order.
    pub fn mean(all: &[MetaGrads]) -> Result<MetaGrads> {
        let Some(first) = all.first() else {
            return Err(Error::validation("cannot average an empty gradient list"));
        };
        let mut acc: Vec<Vec<f64>> = first.grads.iter().map(Tensor::to_vec).collect();
        for g in &all[1..] {
            for (a, t) in acc.iter_mut().zip(&g.grads) {
                a.iter_mut().zip(t.values()).for_each(|(x, y)| *x += y);
            }
        }
        let n = all.len() as f64;
        let grads = acc
            .into_iter()
            .zip(&first.grads)
            .map(|(v, t)| Tensor::new(t.shape().clone(), v.into_iter().map(|x| x / n).collect()))
            .collect::<Result<_>>()?;
        Ok(MetaGrads { grads })
    }

    /// Slice of the embedding-network gradients.
    pub fn embedding<'a>(&'a self, model: &MetaModel) -> &'a [Tensor] {
        &self.grads[..model.embedding.params().len()]
    }

    /// Slice of the shared-head gradients.
    pub fn head<'a>(&'a self, model: &MetaModel) -> &'a [Tensor] {
        &self.grads[model.embedding.params().len()..]
    }
}

/// Meta-gradient with the query loss and accuracy it was computed from.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub grads: MetaGrads,
    pub query_loss: f64,
    pub query_accuracy: f64,
}

/// Applies `grads` with SGD at the model's meta learning rate.
pub fn sgd_apply(model: &MetaModel, grads: &MetaGrads) -> Result<MetaModel> {
    let params = model.params();
    if params.len() != grads.grads.len() {
        return Err(Error::validation("gradient count does not match the model"));
    }
    let updated = params
        .iter()
        .zip(&grads.grads)
        .map(|(p, g)| descend(p, g, model.meta_lr))
        .collect();
    model.with_params(updated)
}

/// Meta-optimiser: plain SGD or an Adam-style adaptive method.
#[derive(Clone, Debug)]
pub enum MetaOptimizer {
    Sgd,
    Adaptive(AdamState),
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl MetaOptimizer {
    pub fn adaptive() -> Self {
        MetaOptimizer::Adaptive(AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn apply(&mut self, model: &MetaModel, grads: &MetaGrads) -> Result<MetaModel> {
        let st = match self {
            MetaOptimizer::Sgd => return sgd_apply(model, grads),
            MetaOptimizer::Adaptive(st) => st,
        };
        let params = model.params();
        if params.len() != grads.grads.len() {
            return Err(Error::validation("gradient count does not match the model"));
        }
        if st.m.is_empty() {
            st.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            st.v = st.m.clone();
        }
        st.step += 1;
        let c1 = 1.0 - st.beta1.powi(st.step as i32);
        let c2 = 1.0 - st.beta2.powi(st.step as i32);
        let lr = model.meta_lr;
        let mut updated = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(&grads.grads).enumerate() {
            let mut vals = p.to_vec();
            for (j, (x, &gj)) in vals.iter_mut().zip(g.values()).enumerate() {
                st.m[i][j] = st.beta1 * st.m[i][j] + (1.0 - st.beta1) * gj;
                st.v[i][j] = st.beta2 * st.v[i][j] + (1.0 - st.beta2) * gj * gj;
                let mh = st.m[i][j] / c1;
                let vh = st.v[i][j] / c2;
                *x -= lr * mh / (vh.sqrt() + st.eps);
            }
            updated.push(Tensor::new(p.shape().clone(), vals)?);
        }
        model.with_params(updated)
    }
}

/// Predicted class per row; ties go to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (n, k) = logits.shape().matrix().unwrap_or((0, 0));
    (0..n)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let pred = argmax_rows(logits);
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    correct as f64 / labels.len().max(1) as f64
}

/// Seed of a component's task-local initialisation within an episode.
pub fn task_seed(episode_seed: u64, component: Component) -> u64 {
    episode_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .rotate_left(17)
        ^ component.salt()
}

/// Runs the configured inner algorithms on already embedded support data.
/// `shared` is the head the init-based component starts from.
pub fn adapt_components(
    cfg: &StrategyConfig,
    shared: &LinearHead,
    support_emb: &Tensor,
    support_y: &[usize],
    ways: usize,
    episode_seed: u64,
) -> Result<Vec<(Component, TaskParams)>> {
    let emb_dim = support_emb.shape().dims()[1];
    cfg.sorted_components()
        .into_iter()
        .map(|c| {
            let p = match c {
                Component::MeanCentroid => {
                    TaskParams::Prototypes(mean_centroid(support_emb, support_y, ways)?)
                }
                Component::InitBased => TaskParams::AdaptedHead(init_based_adapt(
                    shared,
                    support_emb,
                    support_y,
                    cfg.inner_steps,
                    cfg.inner_lr,
                    cfg.anil_mode,
                )?),
                Component::Mlp => TaskParams::Mlp(mlp_adapt(
                    MlpArch {
                        in_dim: emb_dim,
                        hidden: cfg.mlp_hidden,
                        ways,
                    },
                    support_emb,
                    support_y,
                    cfg.inner_steps,
                    cfg.inner_lr,
                    task_seed(episode_seed, c),
                )?),
            };
            Ok((c, p))
        })
        .collect()
}

fn check_episode(model: &MetaModel, ep: &Episode) -> Result<()> {
    if ep.ways != model.ways() {
        return Err(Error::validation(format!(
            "episode has {} ways but the model head has {}",
            ep.ways,
            model.ways()
        )));
    }
    Ok(())
}

/// Decoupled meta-gradient.
///
/// Phase one adapts every component on support embeddings computed with the
/// embedding network held fixed. Phase two freezes the resulting task
/// parameters, embeds the queries with the network tracked and differentiates
/// the query loss of the summed logits. The shared head receives a gradient
/// according to `cfg.anil_mode`.
///
/// With `cfg.detach_task_params` off, the support embeddings stay on the tape
/// and the meta-gradient also flows through the adaptation.
pub fn a2m_meta_gradient(model: &MetaModel, ep: &Episode, cfg: &StrategyConfig) -> Result<MetaGradient> {
    cfg.validate()?;
    check_episode(model, ep)?;
    let tape = Tape::new();
    let net = model.embedding.track(&tape);
    let shared = match cfg.anil_mode {
        AdaptMode::SecondOrder => model.shared_head.track(&tape),
        _ => model.shared_head.clone(),
    };

    let support_emb = if cfg.detach_task_params {
        model.embedding.forward(&ep.support_x)?
    } else {
        net.forward(&ep.support_x)?
    };
    let mut task = adapt_components(cfg, &shared, &support_emb, &ep.support_y, ep.ways, ep.seed)?;

    // First-order transfer differentiates at the adapted head itself.
    let mut head_targets: Vec<Tensor> = Vec::new();
    for (_, p) in task.iter_mut() {
        if let TaskParams::AdaptedHead(a) = p {
            match cfg.anil_mode {
                AdaptMode::FirstOrder => {
                    if !a.head.params()[0].is_tracked() {
                        a.head = a.head.track(&tape);
                    }
                    head_targets = a.head.params().into_iter().cloned().collect();
                }
                AdaptMode::SecondOrder => {
                    head_targets = shared.params().into_iter().cloned().collect();
                }
                AdaptMode::Detached => {}
            }
        }
    }

    let query_emb = net.forward(&ep.query_x)?;
    let members: Vec<TaskParams> = task.into_iter().map(|(_, p)| p).collect();
    let logits = predict_logits(&TaskParams::Ensemble(members), &query_emb)?;
    let loss = softmax_cross_entropy(&logits, &ep.query_y)?;

    let mut targets: Vec<&Tensor> = net.params();
    targets.extend(head_targets.iter());
    let g = backward(&loss, &targets, false)?;
    let mut grads: Vec<Tensor> = g
        .ordered(&net.params())?
        .into_iter()
        .map(|t| t.detach())
        .collect();
    if head_targets.is_empty() {
        grads.extend(model.shared_head.params().iter().map(|p| Tensor::zeros(p.shape())));
    } else {
        let refs: Vec<&Tensor> = head_targets.iter().collect();
        grads.extend(g.ordered(&refs)?.into_iter().map(|t| t.detach()));
    }
    Ok(MetaGradient {
        grads: MetaGrads { grads },
        query_loss: loss.item()?,
        query_accuracy: accuracy(&logits, &ep.query_y),
    })
}

/// Coupled prototypical-network meta-gradient: prototypes are built from
/// tracked support embeddings, so the gradient flows through both branches.
pub fn coupled_protonet_gradient(model: &MetaModel, ep: &Episode) -> Result<MetaGradient> {
    check_episode(model, ep)?;
    let tape = Tape::new();
    let net = model.embedding.track(&tape);
    let protos = mean_centroid(&net.forward(&ep.support_x)?, &ep.support_y, ep.ways)?;
    let logits = pairwise_sq_dist(&net.forward(&ep.query_x)?, &protos.centers)?.neg()?;
    let loss = softmax_cross_entropy(&logits, &ep.query_y)?;
    let params = net.params();
    let mut grads: Vec<Tensor> = backward(&loss, &params, false)?.ordered(&params)?;
    grads.extend(model.shared_head.params().iter().map(|p| Tensor::zeros(p.shape())));
    Ok(MetaGradient {
        grads: MetaGrads { grads },
        query_loss: loss.item()?,
        query_accuracy: accuracy(&logits, &ep.query_y),
    })
}

/// Outcome of a generic one-step MAML meta-gradient.
#[derive(Clone, Debug)]
pub struct MamlGradient {
    pub grads: Vec<Tensor>,
    pub query_loss: f64,
    /// Parameters after the inner step (constants).
    pub adapted: Vec<Tensor>,
}

/// One-inner-step MAML meta-gradient for arbitrary differentiable losses.
///
/// `support_loss` and `query_loss` map a parameter list to a scalar loss.
/// Second order differentiates through the inner step; first order treats
/// it as a constant displacement.
pub fn maml_meta_gradient<S, Q>(
    params: &[Tensor],
    inner_lr: f64,
    order: MamlOrder,
    support_loss: S,
    query_loss: Q,
) -> Result<MamlGradient>
where
    S: Fn(&[Tensor]) -> Result<Tensor>,
    Q: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(inner_lr >= 0.0 && inner_lr.is_finite()) {
        return Err(Error::validation(format!(
            "inner_lr must be finite and non-negative, got {inner_lr}"
        )));
    }
    let tape = Tape::new();
    let tracked: Vec<Tensor> = params.iter().map(|p| p.detach().track(&tape)).collect();
    let refs: Vec<&Tensor> = tracked.iter().collect();
    let ls = support_loss(&tracked)?;
    match order {
        MamlOrder::Second => {
            let g = backward(&ls, &refs, true)?.ordered(&refs)?;
            let adapted = tracked
                .iter()
                .zip(&g)
                .map(|(p, g)| p.sub(&g.scale(inner_lr)?))
                .collect::<Result<Vec<_>>>()?;
            let lq = query_loss(&adapted)?;
            let grads = backward(&lq, &refs, false)?.ordered(&refs)?;
            Ok(MamlGradient {
                grads,
                query_loss: lq.item()?,
                adapted: adapted.iter().map(Tensor::detach).collect(),
            })
        }
        MamlOrder::First => {
            let g = backward(&ls, &refs, false)?.ordered(&refs)?;
            let outer = Tape::new();
            let adapted: Vec<Tensor> = tracked
                .iter()
                .zip(&g)
                .map(|(p, g)| descend(p, g, inner_lr).track(&outer))
                .collect();
            let arefs: Vec<&Tensor> = adapted.iter().collect();
            let lq = query_loss(&adapted)?;
            let grads = backward(&lq, &arefs, false)?.ordered(&arefs)?;
            Ok(MamlGradient {
                grads,
                query_loss: lq.item()?,
                adapted: adapted.iter().map(Tensor::detach).collect(),
            })
        }
    }
}

fn model_loss(model: &MetaModel, params: &[Tensor], x: &Tensor, y: &[usize]) -> Result<(Tensor, Tensor)> {
    let m = model.with_params(params.to_vec())?;
    let logits = m.shared_head.logits(&m.embedding.forward(x)?)?;
    let loss = softmax_cross_entropy(&logits, y)?;
    Ok((loss, logits))
}

/// Coupled MAML meta-gradient: one inner step on all of θ′ and the head.
pub fn coupled_maml_gradient(
    model: &MetaModel,
    ep: &Episode,
    inner_lr: f64,
    order: MamlOrder,
) -> Result<MetaGradient> {
    check_episode(model, ep)?;
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let r = maml_meta_gradient(
        &params,
        inner_lr,
        order,
        |p| model_loss(model, p, &ep.support_x, &ep.support_y).map(|t| t.0),
        |p| model_loss(model, p, &ep.query_x, &ep.query_y).map(|t| t.0),
    )?;
    let (_, logits) = model_loss(model, &r.adapted, &ep.query_x, &ep.query_y)?;
    Ok(MetaGradient {
        grads: MetaGrads {
            grads: r.grads.iter().map(Tensor::detach).collect(),
        },
        query_loss: r.query_loss,
        query_accuracy: accuracy(&logits, &ep.query_y),
    })
}

/// Meta-gradient for whichever strategy `cfg` selects.
pub fn meta_gradient(model: &MetaModel, ep: &Episode, cfg: &StrategyConfig) -> Result<MetaGradient> {
    match cfg.strategy {
        Strategy::A2mEnsemble | Strategy::A2mSingle => a2m_meta_gradient(model, ep, cfg),
        Strategy::CoupledProtonet => coupled_protonet_gradient(model, ep),
        Strategy::CoupledMaml => coupled_maml_gradient(model, ep, cfg.inner_lr, cfg.maml_order),
    }
}

fn finish(model: &MetaModel, g: MetaGradient, start: Instant) -> Result<(MetaModel, EpisodeOutcome)> {
    let next = sgd_apply(model, &g.grads)?;
    Ok((
        next,
        EpisodeOutcome {
            query_loss: g.query_loss,
            query_accuracy: g.query_accuracy,
            wall_time: start.elapsed(),
            grads_applied: true,
        },
    ))
}

/// One decoupled meta-step with a single inner algorithm.
pub fn a2m_episode_step(model: &MetaModel, ep: &Episode, cfg: &StrategyConfig) -> Result<(MetaModel, EpisodeOutcome)> {
    if !cfg.strategy.is_a2m() {
        return Err(Error::validation(format!(
            "a2m_episode_step called with strategy {}",
            cfg.strategy.as_str()
        )));
    }
    if cfg.components.len() != 1 {
        return Err(Error::validation(format!(
            "a2m_episode_step needs exactly one component, got {}",
            cfg.components.len()
        )));
    }
    let start = Instant::now();
    let g = a2m_meta_gradient(model, ep, cfg)?;
    finish(model, g, start)
}

/// One decoupled meta-step over an ensemble of inner algorithms.
pub fn a2m_ensemble_step(model: &MetaModel, ep: &Episode, cfg: &StrategyConfig) -> Result<(MetaModel, EpisodeOutcome)> {
    if !cfg.strategy.is_a2m() {
        return Err(Error::validation(format!(
            "a2m_ensemble_step called with strategy {}",
            cfg.strategy.as_str()
        )));
    }
    let start = Instant::now();
    let g = a2m_meta_gradient(model, ep, cfg)?;
    finish(model, g, start)
}

pub fn coupled_protonet_step(model: &MetaModel, ep: &Episode) -> Result<(MetaModel, EpisodeOutcome)> {
    let start = Instant::now();
    let g = coupled_protonet_gradient(model, ep)?;
    finish(model, g, start)
}

pub fn coupled_maml_step(
    model: &MetaModel,
    ep: &Episode,
    inner_lr: f64,
    order: MamlOrder,
) -> Result<(MetaModel, EpisodeOutcome)> {
    let start = Instant::now();
    let g = coupled_maml_gradient(model, ep, inner_lr, order)?;
    finish(model, g, start)
}

/// Dispatches to the step function of `cfg.strategy`.
pub fn train_step(model: &MetaModel, ep: &Episode, cfg: &StrategyConfig) -> Result<(MetaModel, EpisodeOutcome)> {
    match cfg.strategy {
        Strategy::A2mSingle => a2m_episode_step(model, ep, cfg),
        Strategy::A2mEnsemble => a2m_ensemble_step(model, ep, cfg),
        Strategy::CoupledProtonet => coupled_protonet_step(model, ep),
        Strategy::CoupledMaml => coupled_maml_step(model, ep, cfg.inner_lr, cfg.maml_order),
    }
}

/// Query logits after inner adaptation, without touching the model.
pub fn episode_logits(model: &MetaModel, ep: &Episode, cfg: &StrategyConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_episode(model, ep)?;
    match cfg.strategy {
        Strategy::A2mEnsemble | Strategy::A2mSingle => {
            let support_emb = model.embedding.forward(&ep.support_x)?;
            let task = adapt_components(cfg, &model.shared_head, &support_emb, &ep.support_y, ep.ways, ep.seed)?;
            let members = task.into_iter().map(|(_, p)| p).collect();
            predict_logits(&TaskParams::Ensemble(members), &model.embedding.forward(&ep.query_x)?)
        }
        Strategy::CoupledProtonet => {
            let protos = mean_centroid(&model.embedding.forward(&ep.support_x)?, &ep.support_y, ep.ways)?;
            pairwise_sq_dist(&model.embedding.forward(&ep.query_x)?, &protos.centers)?.neg()
        }
        Strategy::CoupledMaml => {
            let tape = Tape::new();
            let params: Vec<Tensor> = model.params().iter().map(|p| p.track(&tape)).collect();
            let refs: Vec<&Tensor> = params.iter().collect();
            let (ls, _) = model_loss(model, &params, &ep.support_x, &ep.support_y)?;
            let g = backward(&ls, &refs, false)?.ordered(&refs)?;
            let adapted: Vec<Tensor> = params
                .iter()
                .zip(&g)
                .map(|(p, g)| descend(p, g, cfg.inner_lr))
                .collect();
            let m = model.with_params(adapted)?;
            m.shared_head.logits(&m.embedding.forward(&ep.query_x)?)
        }
    }
}

/// Adapts and predicts on one episode; never mutates the model.
pub fn evaluate_episode(model: &MetaModel, ep: &Episode, cfg: &StrategyConfig) -> Result<EpisodeOutcome> {
    let start = Instant::now();
    let logits = episode_logits(model, ep, cfg)?;
    let loss = softmax_cross_entropy(&logits, &ep.query_y)?.item()?;
    Ok(EpisodeOutcome {
        query_loss: loss,
        query_accuracy: accuracy(&logits, &ep.query_y),
        wall_time: start.elapsed(),
        grads_applied: false,
    })
}

#[cfg(test)]
#[path = "meta_tests.rs"]
mod tests;
