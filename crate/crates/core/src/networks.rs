//! Parameterised function families: the shared embedding network, the
//! classification heads, and the squared Euclidean metric.

use rand::Rng;

use crate::autodiff::{linear, Shape, Tape, Tensor};
use crate::error::{Error, Result};

/// One dense layer, `x·W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Ok(Dense {
            weight: Tensor::from_vec(&[fan_in, fan_out], w)?,
            bias: Tensor::zeros(&Shape::new(vec![fan_out])?),
        })
    }

    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (_, out) = weight.shape().matrix().ok_or_else(|| Error::Dimension {
            op: "Dense::new",
            operand: "W",
            expected: "a rank-2 tensor".into(),
            got: weight.shape().to_string(),
        })?;
        if bias.shape().dims() != [out] {
            return Err(Error::Dimension {
                op: "Dense::new",
                operand: "b",
                expected: format!("[{out}]"),
                got: bias.shape().to_string(),
            });
        }
        Ok(Dense { weight, bias })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape().dims()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape().dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight, &self.bias)
    }
}

/// Anything made of an ordered list of parameter tensors.
pub trait Parameterized: Sized {
    fn params(&self) -> Vec<&Tensor>;

    /// A copy with every parameter replaced, in [`Parameterized::params`] order.
    fn with_params(&self, params: Vec<Tensor>) -> Result<Self>;

    /// Registers each parameter as a fresh leaf on `tape`.
    fn track(&self, tape: &Tape) -> Self {
        let tracked = self.params().into_iter().map(|p| p.track(tape)).collect();
        self.with_params(tracked).expect("same shapes")
    }

    fn detach(&self) -> Self {
        let detached = self.params().into_iter().map(Tensor::detach).collect();
        self.with_params(detached).expect("same shapes")
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

fn replace_layers(layers: &[Dense], params: Vec<Tensor>) -> Result<Vec<Dense>> {
    if params.len() != 2 * layers.len() {
        return Err(Error::validation(format!(
            "expected {} parameter tensors, got {}",
            2 * layers.len(),
            params.len()
        )));
    }
    let mut it = params.into_iter();
    layers
        .iter()
        .map(|l| {
            let (w, b) = (it.next().unwrap(), it.next().unwrap());
            if w.shape() != l.weight.shape() || b.shape() != l.bias.shape() {
                return Err(Error::validation(format!(
                    "replacement parameters {}/{} do not match layer {}/{}",
                    w.shape(),
                    b.shape(),
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
            Ok(Dense { weight: w, bias: b })
        })
        .collect()
}

fn layer_params(layers: &[Dense]) -> Vec<&Tensor> {
    layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
}

/// Dense ReLU network mapping raw features to the embedding space.
///
/// ReLU sits between layers, not after the last one. A net with no layers is
/// the identity map.
#[derive(Clone, Debug)]
pub struct EmbeddingNet {
    layers: Vec<Dense>,
    in_dim: usize,
}

impl EmbeddingNet {
    /// `dims` lists every width from the input onwards, e.g. `[16, 64, 64]`.
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let Some(&in_dim) = dims.first() else {
            return Err(Error::validation("embedding dims must include the input width"));
        };
        if dims.contains(&0) {
            return Err(Error::validation(format!("embedding dims {dims:?} contain a zero")));
        }
        let layers = dims
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(EmbeddingNet { layers, in_dim })
    }

    pub fn identity(in_dim: usize) -> Self {
        EmbeddingNet {
            layers: Vec::new(),
            in_dim,
        }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::validation("use EmbeddingNet::identity for a layerless net"));
        };
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::validation(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].fan_out(),
                    i + 1,
                    pair[1].fan_in()
                )));
            }
        }
        Ok(EmbeddingNet {
            in_dim: first.fan_in(),
            layers,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(self.in_dim, Dense::fan_out)
    }

    /// Every width from input to output.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim)
            .chain(self.layers.iter().map(Dense::fan_out))
            .collect()
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let (_, width) = batch.expect_matrix("embed", "batch")?;
        if width != self.in_dim {
            return Err(Error::Dimension {
                op: "embed",
                operand: "batch",
                expected: format!("{} columns", self.in_dim),
                got: batch.shape().to_string(),
            });
        }
        let mut h = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

impl Parameterized for EmbeddingNet {
    fn params(&self) -> Vec<&Tensor> {
        layer_params(&self.layers)
    }

    fn with_params(&self, params: Vec<Tensor>) -> Result<Self> {
        Ok(EmbeddingNet {
            layers: replace_layers(&self.layers, params)?,
            in_dim: self.in_dim,
        })
    }
}

/// Forward pass of the embedding network.
pub fn embed(net: &EmbeddingNet, batch: &Tensor) -> Result<Tensor> {
    net.forward(batch)
}

/// A classifier over embeddings producing per-class raw scores.
pub trait Head {
    fn logits(&self, emb: &Tensor) -> Result<Tensor>;
    fn ways(&self) -> usize;
}

/// Single linear layer from embeddings to `K` logits.
#[derive(Clone, Debug)]
pub struct LinearHead {
    pub layer: Dense,
}

impl LinearHead {
    pub fn init(emb_dim: usize, ways: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(LinearHead {
            layer: Dense::init(emb_dim, ways, rng)?,
        })
    }

    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        Ok(LinearHead {
            layer: Dense::new(weight, bias)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layer.fan_in()
    }
}

impl Head for LinearHead {
    fn logits(&self, emb: &Tensor) -> Result<Tensor> {
        self.layer.forward(emb)
    }

    fn ways(&self) -> usize {
        self.layer.fan_out()
    }
}

impl Parameterized for LinearHead {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.layer.weight, &self.layer.bias]
    }

    fn with_params(&self, params: Vec<Tensor>) -> Result<Self> {
        let mut layers = replace_layers(std::slice::from_ref(&self.layer), params)?;
        Ok(LinearHead {
            layer: layers.remove(0),
        })
    }
}

/// Two dense layers with a ReLU in between.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub hidden: Dense,
    pub output: Dense,
}

/// Shape of an [`MlpHead`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpArch {
    pub in_dim: usize,
    pub hidden: usize,
    pub ways: usize,
}

impl MlpHead {
    pub fn init(arch: MlpArch, rng: &mut impl Rng) -> Result<Self> {
        Ok(MlpHead {
            hidden: Dense::init(arch.in_dim, arch.hidden, rng)?,
            output: Dense::init(arch.hidden, arch.ways, rng)?,
        })
    }

    pub fn arch(&self) -> MlpArch {
        MlpArch {
            in_dim: self.hidden.fan_in(),
            hidden: self.hidden.fan_out(),
            ways: self.output.fan_out(),
        }
    }
}

impl Head for MlpHead {
    fn logits(&self, emb: &Tensor) -> Result<Tensor> {
        self.output.forward(&self.hidden.forward(emb)?.relu()?)
    }

    fn ways(&self) -> usize {
        self.output.fan_out()
    }
}

impl Parameterized for MlpHead {
    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.hidden.weight,
            &self.hidden.bias,
            &self.output.weight,
            &self.output.bias,
        ]
    }

    fn with_params(&self, params: Vec<Tensor>) -> Result<Self> {
        let layers = [self.hidden.clone(), self.output.clone()];
        let mut it = replace_layers(&layers, params)?.into_iter();
        Ok(MlpHead {
            hidden: it.next().unwrap(),
            output: it.next().unwrap(),
        })
    }
}

pub fn head_logits(head: &dyn Head, emb: &Tensor) -> Result<Tensor> {
    head.logits(emb)
}

/// `n×K` matrix of squared distances from each query row to each center.
pub fn pairwise_sq_dist(queries: &Tensor, centers: &Tensor) -> Result<Tensor> {
    queries.pairwise_sq_dist(centers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;
    use crate::autodiff::testing::{max_rel_err, numeric_grads, random};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_net_passes_through() {
        let net = EmbeddingNet::identity(3);
        let x = random(&[4, 3], 1);
        assert!(embed(&net, &x).unwrap().bit_eq(&x));
        assert_eq!(net.out_dim(), 3);
    }

    #[test]
    fn zero_weights_chain_bias_through_relu() {
        let mk = |i, o, b: f64| {
            Dense::new(
                Tensor::zeros(&Shape::new(vec![i, o]).unwrap()),
                Tensor::full(&Shape::new(vec![o]).unwrap(), b),
            )
            .unwrap()
        };
        let net = EmbeddingNet::from_layers(vec![mk(3, 2, -1.0), mk(2, 2, 0.5)]).unwrap();
        let out = embed(&net, &random(&[1, 3], 2)).unwrap();
        // relu(-1) = 0, then 0·W + 0.5
        assert_eq!(out.values(), &[0.5, 0.5]);
        let net = EmbeddingNet::from_layers(vec![mk(3, 2, 2.0), mk(2, 1, -3.0)]).unwrap();
        assert_eq!(embed(&net, &random(&[1, 3], 3)).unwrap().values(), &[-3.0]);
    }

    #[test]
    fn width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = EmbeddingNet::init(&[4, 8], &mut rng).unwrap();
        assert!(matches!(
            embed(&net, &random(&[2, 3], 0)),
            Err(Error::Dimension { operand: "batch", .. })
        ));
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Dense::init(10, 6, &mut rng).unwrap();
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(d.weight.values().iter().all(|v| v.abs() <= limit));
        assert!(d.bias.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = EmbeddingNet::init(&[3, 5, 4], &mut rng).unwrap();
        let x = random(&[6, 3], 9);
        let f = |ps: &[Tensor]| {
            let n = net.with_params(ps.to_vec()).unwrap();
            embed(&n, &x).unwrap().mul(&embed(&n, &x).unwrap()).unwrap().sum().unwrap().item().unwrap()
        };
        let tape = Tape::new();
        let tracked = net.track(&tape);
        let y = embed(&tracked, &x).unwrap();
        let loss = y.mul(&y).unwrap().sum().unwrap();
        let params = tracked.params();
        let g = backward(&loss, &params, false).unwrap();
        let at: Vec<Tensor> = net.params().into_iter().cloned().collect();
        let num = numeric_grads(f, &at, 1e-6);
        for (p, n) in params.iter().zip(&num) {
            assert!(max_rel_err(g.get(p).unwrap().values(), n) < 1e-4);
        }
    }

    #[test]
    fn linear_head_constant_logits() {
        let head = LinearHead::new(
            Tensor::zeros(&Shape::new(vec![3, 2]).unwrap()),
            Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(),
        )
        .unwrap();
        let out = head_logits(&head, &random(&[4, 3], 1)).unwrap();
        for r in 0..4 {
            assert_eq!(out.row(r), &[1.0, 2.0]);
        }
    }

    #[test]
    fn duplicate_rows_give_duplicate_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = MlpHead::init(MlpArch { in_dim: 3, hidden: 4, ways: 2 }, &mut rng).unwrap();
        let r = random(&[1, 3], 6).to_vec();
        let emb = Tensor::from_rows(&[r.clone(), r]).unwrap();
        let out = head_logits(&head, &emb).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn heads_match_linear_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let emb = random(&[5, 4], 7);
        let lin = LinearHead::init(4, 3, &mut rng).unwrap();
        let expect = linear(&emb, &lin.layer.weight, &lin.layer.bias).unwrap();
        assert!(head_logits(&lin, &emb).unwrap().bit_eq(&expect));

        let mlp = MlpHead::init(MlpArch { in_dim: 4, hidden: 6, ways: 3 }, &mut rng).unwrap();
        let h = linear(&emb, &mlp.hidden.weight, &mlp.hidden.bias).unwrap().relu().unwrap();
        let expect = linear(&h, &mlp.output.weight, &mlp.output.bias).unwrap();
        let got = head_logits(&mlp, &emb).unwrap();
        for (a, b) in got.values().iter().zip(expect.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sq_dist_basics() {
        let q = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
        let c = Tensor::from_vec(&[2, 1], vec![3.0, 0.0]).unwrap();
        assert_eq!(pairwise_sq_dist(&q, &c).unwrap().values(), &[9.0, 0.0]);
        let bad = random(&[2, 2], 0);
        assert!(matches!(pairwise_sq_dist(&q, &bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sq_dist_matches_loop() {
        let q = random(&[8, 4], 11);
        let c = random(&[5, 4], 12);
        let d = pairwise_sq_dist(&q, &c).unwrap();
        for i in 0..8 {
            for k in 0..5 {
                let mut s = 0.0;
                for j in 0..4 {
                    let diff = q.at(i, j) - c.at(k, j);
                    s += diff * diff;
                }
                assert!((d.at(i, k) - s).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn sq_dist_non_negative_and_symmetric(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
        ) {
            let qa = Tensor::from_vec(&[2, 3], a.clone()).unwrap();
            let qb = Tensor::from_vec(&[2, 3], b).unwrap();
            let d = pairwise_sq_dist(&qa, &qb).unwrap();
            prop_assert!(d.values().iter().all(|&v| v >= 0.0));
            let dt = pairwise_sq_dist(&qb, &qa).unwrap();
            for i in 0..2 {
                for k in 0..2 {
                    prop_assert_eq!(d.at(i, k), dt.at(k, i));
                }
            }
            let self_d = pairwise_sq_dist(&qa, &qa).unwrap();
            prop_assert_eq!(self_d.at(0, 0), 0.0);
            prop_assert_eq!(self_d.at(1, 1), 0.0);
        }

        #[test]
        fn shapes_and_purity(n in 1usize..6, k in 1usize..5, seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = EmbeddingNet::init(&[3, 7, 4], &mut rng).unwrap();
            let head = LinearHead::init(4, k, &mut rng).unwrap();
            let x = random(&[n, 3], seed);
            let e1 = embed(&net, &x).unwrap();
            prop_assert_eq!(e1.shape().dims(), &[n, 4]);
            prop_assert!(e1.bit_eq(&embed(&net, &x).unwrap()));
            let l = head_logits(&head, &e1).unwrap();
            prop_assert_eq!(l.shape().dims(), &[n, k]);
            prop_assert!(l.bit_eq(&head_logits(&head, &e1).unwrap()));
            let c = random(&[k, 4], seed + 1);
            let d = pairwise_sq_dist(&e1, &c).unwrap();
            prop_assert_eq!(d.shape().dims(), &[n, k]);
        }
    }
}
