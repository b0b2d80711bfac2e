use std::sync::{Arc, Mutex, MutexGuard};

use crate::error::{Error, Result};

use super::tensor::{NodeRef, Shape, Tensor};

pub type NodeId = usize;

/// Primitive operations the tape knows how to differentiate.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddBias,
    Relu,
    Exp,
    LogSoftmax,
    Sum,
    Expand,
    SumRows,
    BroadcastRows,
    RowSum,
    BroadcastCols,
    Pick(Arc<[usize]>),
    Scatter(Arc<[usize]>),
    PairwiseSqDist,
}

/// Forward value kept on the tape. Holds no tape pointer, so nodes never
/// form a reference cycle with the tape that owns them.
#[derive(Clone)]
pub(crate) struct Saved {
    pub(crate) shape: Shape,
    pub(crate) data: Arc<[f64]>,
    pub(crate) id: Option<NodeId>,
}

impl Saved {
    fn of(t: &Tensor) -> Self {
        Saved {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            id: t.node_id(),
        }
    }

    /// Rebuilds the tensor, re-attaching its node when `tape` is given.
    pub(crate) fn rehydrate(&self, tape: Option<&Tape>) -> Tensor {
        let node = match (tape, self.id) {
            (Some(tape), Some(id)) => Some(NodeRef {
                tape: tape.clone(),
                id,
            }),
            _ => None,
        };
        Tensor::from_parts(self.shape.clone(), Arc::clone(&self.data), node)
    }
}

#[derive(Clone)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Saved>,
    pub(crate) output: Saved,
}

/// Append-only record of primitive operations.
///
/// Nodes are stored in creation order, so the inputs of node `i` always have
/// smaller ids. A tape is meant to live for one episode and then be dropped.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Arc<Mutex<Vec<Node>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_as(&self, other: &Tape) -> bool {
        Arc::ptr_eq(&self.nodes, &other.nodes)
    }

    fn lock(&self) -> MutexGuard<'_, Vec<Node>> {
        // A panic while holding the lock leaves only complete nodes behind.
        self.nodes.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Registers `value` as a differentiable leaf.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let detached = value.detach();
        let id = self.push(Op::Leaf, Vec::new(), &detached);
        Tensor::from_parts(
            detached.shape.clone(),
            Arc::clone(&detached.data),
            Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        )
    }

    fn push(&self, op: Op, inputs: Vec<Saved>, output: &Tensor) -> NodeId {
        let mut nodes = self.lock();
        let id = nodes.len();
        let mut out = Saved::of(output);
        out.id = Some(id);
        nodes.push(Node {
            op,
            inputs,
            output: out,
        });
        id
    }

    /// Copies of nodes `0..=last`.
    pub(crate) fn snapshot(&self, last: NodeId) -> Vec<Node> {
        self.lock()[..=last].to_vec()
    }
}

/// Creates the output tensor of `op`, recording it when any input is tracked.
pub(crate) fn record(op: Op, inputs: &[&Tensor], shape: Shape, values: Vec<f64>) -> Result<Tensor> {
    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some(other) = t.tape() {
            match tape {
                None => tape = Some(other),
                Some(existing) if !existing.same_as(other) => {
                    return Err(Error::usage(
                        "operands are tracked on different tapes; detach one of them first",
                    ))
                }
                Some(_) => {}
            }
        }
    }
    let out = Tensor::constant(shape, values);
    let Some(tape) = tape else {
        return Ok(out);
    };
    let saved = inputs.iter().map(|t| Saved::of(t)).collect();
    let id = tape.push(op, saved, &out);
    Ok(Tensor::from_parts(
        out.shape.clone(),
        Arc::clone(&out.data),
        Some(NodeRef {
            tape: tape.clone(),
            id,
        }),
    ))
}
