//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations on tensors tracked by a [`Tape`] are recorded as they run.
//! [`backward`] walks the tape in reverse; with `create_graph` it records the
//! gradient computation too, which is what second-order meta-gradients need.
//!
//! ```
//! use a2m::autodiff::{backward, Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = Tensor::from_vec(&[1, 2], vec![1.0, -2.0]).unwrap().track(&tape);
//! let loss = w.mul(&w).unwrap().sum().unwrap().scale(0.5).unwrap();
//! let grads = backward(&loss, &[&w], false).unwrap();
//! assert_eq!(grads.get(&w).unwrap().values(), &[1.0, -2.0]);
//! ```

mod backward;
mod ops;
mod tape;
mod tensor;

pub use backward::{backward, sgd_step, GradMap};
#[allow(unused_imports)]
pub(crate) use backward::descend;
pub use ops::{linear, relu, softmax_cross_entropy};
pub use tape::{NodeId, Tape};
pub use tensor::{detach, Shape, Tensor};

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        let v = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(dims, v).unwrap()
    }

    /// Central differences of a scalar function of several tensors.
    pub fn numeric_grads(
        f: impl Fn(&[Tensor]) -> f64,
        at: &[Tensor],
        eps: f64,
    ) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for (pi, p) in at.iter().enumerate() {
            let mut g = vec![0.0; p.numel()];
            for (k, gk) in g.iter_mut().enumerate() {
                let shifted = |delta: f64| {
                    let mut v = p.to_vec();
                    v[k] += delta;
                    let mut args = at.to_vec();
                    args[pi] = Tensor::new(p.shape().clone(), v).unwrap();
                    f(&args)
                };
                *gk = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            }
            out.push(g);
        }
        out
    }

    pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }
}
