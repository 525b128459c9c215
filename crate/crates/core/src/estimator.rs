//! Gradient estimators for sampling discrete tokens.
//!
//! * [`gumbel_softmax`] relaxes a categorical sample into
//!   `softmax((logits + g) / tau)` with Gumbel noise `g`.
//! * [`straight_through`] uses the argmax one-hot in the forward pass and
//!   routes the downstream gradient to the relaxed distribution unchanged.
//! * [`top_k_st`] does a single decoding step and emits the `K` most probable
//!   tokens, all distinct, each as a straight-through row tied to the same
//!   relaxed distribution.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Scalar, Tensor};

const U_MIN: f64 = 1e-9;
const U_MAX: f64 = 1.0 - 1e-9;

/// Maps a uniform draw to a standard Gumbel sample, `-ln(-ln(u))`, with `u`
/// clamped away from 0 and 1.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(U_MIN, U_MAX);
    -(-u.ln()).ln()
}

pub fn sample_gumbel<T: Scalar>(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(gumbel_from_uniform(rng.random::<f64>())))
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Gumbel noise shaped like `like`, drawn from the graph's random stream.
pub fn gumbel_noise<T: Scalar>(g: &mut Graph<T>, like: Var) -> Tensor<T> {
    let shape = g.shape(like).to_vec();
    sample_gumbel(shape, g.rng())
}

/// `softmax((logits + noise) / tau)` over the last axis. `noise = None` is the
/// noise-free relaxation.
pub fn gumbel_softmax<T: Scalar>(g: &mut Graph<T>, logits: Var, tau: f64, noise: Option<Tensor<T>>) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    let mut x = logits;
    if let Some(noise) = noise {
        if noise.shape() != g.shape(logits) {
            return Err(Error::Dimension {
                op: "gumbel_softmax",
                lhs: g.shape(logits).to_vec(),
                rhs: noise.shape().to_vec(),
            });
        }
        let n = g.constant(noise);
        x = g.add(x, n)?;
    }
    if tau != 1.0 {
        x = g.scale(x, T::from_f64(1.0 / tau));
    }
    g.softmax_last(x)
}

/// Hard one-hot sample whose gradient flows to `soft`.
#[derive(Clone, Debug)]
pub struct StSample {
    /// `[K x V]` one-hot rows used in the forward pass.
    pub hard: Var,
    /// The relaxed distribution(s) receiving the gradient.
    pub soft: Var,
    pub ids: Vec<usize>,
}

/// One-hot argmax of each row of `soft` (ties to the lowest index) with an
/// identity backward pass into `soft`.
pub fn straight_through<T: Scalar>(g: &mut Graph<T>, soft: Var) -> Result<StSample> {
    let v = g.value(soft);
    let ids: Vec<usize> = (0..v.rows()).map(|r| argmax(v.row(r))).collect();
    let picks: Vec<_> = ids.iter().enumerate().map(|(r, &id)| (r, id)).collect();
    let hard = g.straight_through(soft, &picks)?;
    Ok(StSample { hard, soft, ids })
}

/// Indices of the `k` largest values in descending order; ties keep the
/// lower index first.
pub fn top_k_indices<T: Scalar>(xs: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].partial_cmp(&xs[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    idx
}

/// Single-step top-K straight-through sample over one distribution.
///
/// `logits` is a `[V]` or `[1 x V]` row. The forward value stacks the one-hots
/// of the `k` most probable tokens under the relaxed distribution; every row
/// passes its gradient into that same distribution.
pub fn top_k_st<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    k: usize,
    tau: f64,
    noise: Option<Tensor<T>>,
) -> Result<StSample> {
    let v = g.value(logits).cols();
    if g.value(logits).rows() != 1 {
        return Err(Error::contract("top_k_st takes a single row of logits"));
    }
    if k == 0 || k > v {
        return Err(Error::contract(format!("K must lie in 1..={v}, got {k}")));
    }
    let soft = gumbel_softmax(g, logits, tau, noise)?;
    let ids = top_k_indices(g.value(soft).data(), k);
    let picks: Vec<_> = ids.iter().map(|&id| (0, id)).collect();
    let hard = g.straight_through(soft, &picks)?;
    Ok(StSample { hard, soft, ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gumbel_of_inverse_e_is_zero() {
        assert!(gumbel_from_uniform(1.0 / std::f64::consts::E).abs() < 1e-15);
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn fixed_seed_fixed_noise() {
        let a: Tensor<f32> = sample_gumbel(vec![4, 5], &mut ChaCha8Rng::seed_from_u64(3));
        let b: Tensor<f32> = sample_gumbel(vec![4, 5], &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_unit_temperature_is_softmax() {
        let mut g = Graph::<f64>::new(0);
        let l = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let gs = gumbel_softmax(&mut g, l, 1.0, None).unwrap();
        let sm = g.softmax(l, 0).unwrap();
        assert_eq!(g.value(gs).data(), g.value(sm).data());
    }

    #[test]
    fn low_temperature_approaches_one_hot() {
        let mut g = Graph::<f64>::new(0);
        let l = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let gs = gumbel_softmax(&mut g, l, 0.01, None).unwrap();
        let d = g.value(gs).data();
        assert!(d[2] > 1.0 - 1e-6 && d[0] < 1e-6);
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let mut g = Graph::<f64>::new(0);
        let l = g.constant(Tensor::vector(vec![0.5, -1.0]));
        assert!(matches!(gumbel_softmax(&mut g, l, 0.0, None), Err(Error::Contract(_))));
        assert!(matches!(gumbel_softmax(&mut g, l, -1.0, None), Err(Error::Contract(_))));
    }

    #[test]
    fn straight_through_argmax_row() {
        let mut g = Graph::<f32>::new(0);
        let s = g.constant(Tensor::vector(vec![0.2, 0.7, 0.1]));
        let st = straight_through(&mut g, s).unwrap();
        assert_eq!(st.ids, vec![1]);
        assert_eq!(g.value(st.hard).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn top_k_order_and_bounds() {
        let mut g = Graph::<f32>::new(0);
        let l = g.constant(Tensor::vector(vec![3.0, 1.0, 2.0]));
        let st = top_k_st(&mut g, l, 2, 1.0, None).unwrap();
        assert_eq!(st.ids, vec![0, 2]);
        assert_eq!(g.value(st.hard).data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let all = top_k_st(&mut g, l, 3, 1.0, None).unwrap();
        let mut ids = all.ids.clone();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2]);
        assert!(matches!(top_k_st(&mut g, l, 4, 1.0, None), Err(Error::Contract(_))));
        assert!(matches!(top_k_st(&mut g, l, 0, 1.0, None), Err(Error::Contract(_))));
    }

    #[test]
    fn top_one_equals_plain_straight_through() {
        let mut g = Graph::<f32>::new(0);
        let l = g.constant(Tensor::vector(vec![0.1, 0.4, -0.3, 0.2]));
        let noise: Tensor<f32> = sample_gumbel(vec![4], &mut ChaCha8Rng::seed_from_u64(1));
        let a = top_k_st(&mut g, l, 1, 0.5, Some(noise.clone())).unwrap();
        let soft = gumbel_softmax(&mut g, l, 0.5, Some(noise)).unwrap();
        let b = straight_through(&mut g, soft).unwrap();
        assert_eq!(a.ids, b.ids);
        assert_eq!(g.value(a.hard).data(), g.value(b.hard).data());
    }

    #[test]
    fn top_k_shares_one_soft_distribution_in_backward() {
        let mut g = Graph::<f64>::new(0);
        let l = g.param(Tensor::vector(vec![3.0, 1.0, 2.0]));
        let st = top_k_st(&mut g, l, 2, 1.0, None).unwrap();
        let w = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![10.0, 20.0, 30.0]]).unwrap());
        let p = g.mul(st.hard, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(st.soft).unwrap(), &[11.0, 22.0, 33.0]);
    }
}
