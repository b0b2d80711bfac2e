use std::collections::HashMap;

use crate::error::{Error, Result};

use super::ops::vjp;
use super::tape::NodeId;
use super::tensor::Tensor;

/// Gradients keyed by the tape node of each parameter.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradMap {
    pub fn get(&self, param: &Tensor) -> Option<&Tensor> {
        param.node_id().and_then(|id| self.grads.get(&id))
    }

    pub fn insert(&mut self, param: &Tensor, grad: Tensor) -> Result<()> {
        let id = param
            .node_id()
            .ok_or_else(|| Error::usage("cannot key a gradient by an untracked tensor"))?;
        if grad.shape() != param.shape() {
            return Err(Error::validation(format!(
                "gradient shape {} does not match parameter shape {}",
                grad.shape(),
                param.shape()
            )));
        }
        self.grads.insert(id, grad);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Gradients in the order of `params`, failing on any missing entry.
    pub fn ordered(&self, params: &[&Tensor]) -> Result<Vec<Tensor>> {
        params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                self.get(p)
                    .cloned()
                    .ok_or_else(|| Error::usage(format!("no gradient for parameter #{i}")))
            })
            .collect()
    }
}

/// Reverse-mode gradients of a scalar `loss` with respect to `params`.
///
/// Parameters that the loss does not depend on get a zero gradient. With
/// `create_graph`, the backward computation is itself recorded on the tape so
/// the returned gradients can be differentiated again.
pub fn backward(loss: &Tensor, params: &[&Tensor], create_graph: bool) -> Result<GradMap> {
    let Some(node) = loss.node.as_ref() else {
        return Err(Error::usage("backward() called on an untracked loss"));
    };
    if loss.numel() != 1 {
        return Err(Error::usage(format!(
            "backward() needs a scalar loss, got shape {}",
            loss.shape()
        )));
    }
    let tape = &node.tape;
    let last = node.id;

    let mut targets = vec![false; last + 1];
    for (i, p) in params.iter().enumerate() {
        let Some(pn) = p.node.as_ref() else {
            return Err(Error::usage(format!("parameter #{i} is not tracked")));
        };
        if pn.tape.same_as(tape) && pn.id <= last {
            targets[pn.id] = true;
        }
    }

    let nodes = tape.snapshot(last);

    // Only nodes with a path to some parameter need a gradient.
    let mut reach = targets.clone();
    for (i, n) in nodes.iter().enumerate() {
        if !reach[i] && n.inputs.iter().any(|s| s.id.is_some_and(|j| reach[j])) {
            reach[i] = true;
        }
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; last + 1];
    if reach[last] {
        grads[last] = Some(Tensor::ones(loss.shape()));
    }
    let replay = create_graph.then_some(tape);
    for i in (0..=last).rev() {
        if !reach[i] || nodes[i].inputs.is_empty() {
            continue;
        }
        let g = if targets[i] { grads[i].clone() } else { grads[i].take() };
        let Some(g) = g else { continue };
        let input_grads = vjp(&nodes[i], &g, replay)?;
        for (saved, ig) in nodes[i].inputs.iter().zip(input_grads) {
            let (Some(j), Some(ig)) = (saved.id, ig) else { continue };
            if !reach[j] {
                continue;
            }
            grads[j] = Some(match grads[j].take() {
                Some(acc) => acc.add(&ig)?,
                None => ig,
            });
        }
    }

    let mut out = GradMap::default();
    for p in params {
        let g = match p.node_id() {
            Some(id) if p.tape().is_some_and(|t| t.same_as(tape)) && id <= last => {
                grads[id].clone()
            }
            _ => None,
        };
        let g = g.unwrap_or_else(|| Tensor::zeros(p.shape()));
        out.insert(p, g)?;
    }
    Ok(out)
}

/// Plain gradient descent, `p - lr * g`. The results are untracked constants.
pub fn sgd_step(params: &[&Tensor], grads: &GradMap, lr: f64) -> Result<Vec<Tensor>> {
    let ordered = grads.ordered(params)?;
    Ok(params
        .iter()
        .zip(ordered)
        .map(|(p, g)| descend(p, &g, lr))
        .collect())
}

/// `p - lr * g` on raw values.
pub(crate) fn descend(p: &Tensor, g: &Tensor, lr: f64) -> Tensor {
    debug_assert_eq!(p.shape(), g.shape());
    let values = p
        .values()
        .iter()
        .zip(g.values())
        .map(|(a, b)| a - lr * b)
        .collect();
    Tensor::constant(p.shape().clone(), values)
}
