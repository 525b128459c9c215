use hypogen::autodiff::grad_check;
use hypogen::{Error, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const H: f64 = 1e-3;

fn uniform(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> hypogen::Result<Var>) -> f64 {
    let flags = vec![true; inputs.len()];
    grad_check(&inputs, &flags, H, 7, build).unwrap()
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> hypogen::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = g.constant(uniform(shape, &mut rng));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_identity() {
    let mut g = Graph::<f32>::new(0);
    let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let c = g.matmul(i, m).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_empty_inner_dimension() {
    let mut g = Graph::<f32>::new(0);
    let a = g.constant(Tensor::zeros(vec![1, 0]));
    let b = g.constant(Tensor::zeros(vec![0, 3]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[1, 3]);
    assert_eq!(g.value(c).data(), &[0.0; 3]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::new(0);
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let b = uniform(vec![2, 3], &mut rng);
    assert!(check(vec![eye, b.clone()], |g, v| {
        let c = g.matmul(v[0], v[1])?;
        project(g, c, 3)
    }) < TOL);
    let a = uniform(vec![3, 4], &mut rng);
    let bt = uniform(vec![5, 4], &mut rng);
    assert!(check(vec![a, bt], |g, v| {
        let c = g.matmul_nt(v[0], v[1])?;
        project(g, c, 4)
    }) < TOL);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f32>::new(0);
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::vector(vec![1.0f32.ln(), 3.0f32.ln()]));
    let y = g.softmax(x, 0).unwrap();
    assert!((g.value(y).data()[0] - 0.25).abs() < 1e-6);
    assert!((g.value(y).data()[1] - 0.75).abs() < 1e-6);

    let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);
}

#[test]
fn log_softmax_matches_log_of_softmax() {
    let mut g = Graph::<f32>::new(0);
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = g.log_softmax(x, 0).unwrap();
    for &v in g.value(y).data() {
        assert!((v + std::f32::consts::LN_2).abs() < 1e-6);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t: Tensor<f32> = uniform(vec![3, 7], &mut rng).cast();
    let x = g.constant(t);
    let ls = g.log_softmax(x, 1).unwrap();
    let s = g.softmax(x, 1).unwrap();
    let l = g.log(s);
    for (a, b) in g.value(ls).data().iter().zip(g.value(l).data()) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn softmax_family_gradients_on_every_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for axis in 0..3 {
        let x = uniform(vec![2, 3, 4], &mut rng);
        assert!(check(vec![x.clone()], |g, v| {
            let y = g.softmax(v[0], axis)?;
            project(g, y, 11)
        }) < TOL);
        assert!(check(vec![x], |g, v| {
            let y = g.log_softmax(v[0], axis)?;
            project(g, y, 12)
        }) < TOL);
    }
}

#[test]
fn embedding_lookup_examples() {
    let mut g = Graph::<f32>::new(0);
    let table = g.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let by_id = g.select_rows(table, &[1]).unwrap();
    assert_eq!(g.value(by_id).data(), &[3.0, 4.0]);

    let onehot = g.param(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
    let e = g.matmul(onehot, table).unwrap();
    assert_eq!(g.value(e).data(), &[3.0, 4.0]);
    // dY = [1, 10] -> grad(onehot) = table . dY = [1*1 + 2*10, 3*1 + 4*10]
    let w = g.constant(Tensor::from_rows(&[vec![1.0, 10.0]]).unwrap());
    let p = g.mul(e, w).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    assert_eq!(g.grad(onehot).unwrap(), &[21.0, 43.0]);

    let soft = g.constant(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
    let e = g.matmul(soft, table).unwrap();
    assert_eq!(g.value(e).data(), &[2.0, 3.0]);

    assert!(matches!(g.select_rows(table, &[2]), Err(Error::Index { .. })));
}

#[test]
fn backward_basics() {
    let mut g = Graph::<f32>::new(0);
    let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 3]);
    assert_eq!(g.grad(s).unwrap(), &[1.0]);

    let mut g = Graph::<f32>::new(0);
    let x = g.param(Tensor::scalar(3.0));
    let y = g.param(Tensor::scalar(-4.0));
    let p = g.mul(x, y).unwrap();
    g.backward(p).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[-4.0]);
    assert_eq!(g.grad(y).unwrap(), &[3.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::<f32>::new(0);
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut g = Graph::<f32>::new(0);
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let y = g.mul(x, x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn shared_subgraph_counts_each_path_once() {
    // z = e^x used twice: d/dx (e^x + e^x) = 2 e^x
    let mut g = Graph::<f64>::new(0);
    let x = g.param(Tensor::scalar(0.5));
    let e = g.exp(x);
    let s = g.add(e, e).unwrap();
    g.backward(s).unwrap();
    assert!((g.grad(x).unwrap()[0] - 2.0 * 0.5f64.exp()).abs() < 1e-12);
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = uniform(vec![3, 4], &mut rng);
    let b = uniform(vec![3, 4], &mut rng);
    let row = uniform(vec![4], &mut rng);
    let pos = Tensor::new(vec![3, 4], a.data().iter().map(|x| x.abs() + 0.5).collect()).unwrap();

    assert!(check(vec![a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        project(g, m, 1)
    }) < TOL);
    assert!(check(vec![a.clone(), row], |g, v| {
        let y = g.add_row(v[0], v[1])?;
        let y = g.scale(y, 0.7);
        let y = g.add_scalar(y, 1.5);
        project(g, y, 2)
    }) < TOL);
    assert!(check(vec![a.clone()], |g, v| {
        let y = g.exp(v[0]);
        let y = g.gelu(y);
        project(g, y, 3)
    }) < TOL);
    assert!(check(vec![pos], |g, v| {
        let y = g.log(v[0]);
        let y = g.mean(y);
        Ok(y)
    }) < TOL);
    assert!(check(vec![a.clone()], |g, v| {
        let y = g.clamp(v[0], -1.0, 1.0);
        project(g, y, 4)
    }) < TOL);
    assert!(check(vec![a.clone(), b.clone()], |g, v| {
        let c = g.concat_rows(&[v[0], v[1]])?;
        let r = g.select_rows(c, &[5, 0, 0, 2])?;
        let m = g.mean_rows(r)?;
        let e = g.gather_elems(m, &[3, 1, 1])?;
        let e = g.reshape(e, vec![1, 3])?;
        project(g, e, 5)
    }) < TOL);
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(vec![3, 5], &mut rng);
    let gain = uniform(vec![5], &mut rng);
    let bias = uniform(vec![5], &mut rng);
    assert!(check(vec![x, gain, bias], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(g, y, 6)
    }) < TOL);
}

#[test]
fn causal_attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let qkv = uniform(vec![7, 12], &mut rng);
    assert!(check(vec![qkv], |g, v| {
        let y = g.causal_attention(v[0], &[4, 3], 2)?;
        project(g, y, 7)
    }) < TOL);
}

#[test]
fn causal_attention_ignores_later_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let base = uniform(vec![5, 6], &mut rng);
    let mut changed = base.clone();
    for c in 0..6 {
        changed.data_mut()[4 * 6 + c] += 1.0;
    }
    let run = |t: Tensor<f64>| {
        let mut g = Graph::new(0);
        let x = g.constant(t);
        let y = g.causal_attention(x, &[5], 1).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(base), run(changed));
    assert_eq!(a.data()[..4 * 2], b.data()[..4 * 2]);
    assert_ne!(a.data()[4 * 2..], b.data()[4 * 2..]);
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    let mut g = Graph::<f64>::new(0);
    let soft = g.param(Tensor::from_rows(&[vec![0.2, 0.7, 0.1]]).unwrap());
    let hard = g.straight_through_argmax(soft).unwrap();
    assert_eq!(g.value(hard).data(), &[0.0, 1.0, 0.0]);
    let v = g.constant(Tensor::from_rows(&[vec![3.0, -1.0, 0.5]]).unwrap());
    let p = g.mul(hard, v).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    assert_eq!(g.grad(soft).unwrap(), &[3.0, -1.0, 0.5]);
}

#[test]
fn grad_check_linear_map_is_exact() {
    let a = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
    let err = check(vec![a], |g, v| project(g, v[0], 9));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_skips_frozen_inputs() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    // A wrong gradient on the frozen input would be invisible: it is not
    // perturbed and receives no analytic gradient.
    let err = grad_check(&[x.clone(), x], &[true, false], H, 0, |g, v| {
        let p = g.mul(v[0], v[1])?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(err < 1e-6);
}

#[test]
fn softmax_cross_entropy_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = uniform(vec![4, 6], &mut rng);
    let err = check(vec![logits], |g, v| {
        let lp = g.log_softmax(v[0], 1)?;
        let picked = g.gather_elems(lp, &[1, 6 + 4, 12 + 0, 18 + 5])?;
        let m = g.mean(picked);
        Ok(g.neg(m))
    });
    assert!(err < TOL, "{err}");
}

/// Three randomized composites, including softmax -> embedding -> similarity.
#[test]
fn composite_graphs_match_finite_differences() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let logits = uniform(vec![2, 6], &mut rng);
        let table = uniform(vec![6, 4], &mut rng);
        let w1 = uniform(vec![4, 5], &mut rng);
        let gain = uniform(vec![5], &mut rng);
        let bias = uniform(vec![5], &mut rng);
        let err = check(vec![logits, table, w1, gain, bias], |g, v| {
            let soft = g.softmax(v[0], 1)?;
            let emb = g.matmul(soft, v[1])?;
            let hyp = g.mean_rows(emb)?;
            let cands = g.select_rows(v[1], &[0, 3, 5])?;
            let scores = g.matmul_nt(hyp, cands)?;
            let lp = g.log_softmax(scores, 1)?;
            let gold = g.gather_elems(lp, &[1])?;
            let h = g.matmul(emb, v[2])?;
            let h = g.layer_norm(h, v[3], v[4], 1e-5)?;
            let h = g.gelu(h);
            let reg = g.mean(h);
            let total = g.sub(reg, gold)?;
            Ok(g.sum(total))
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn exp_log_softmax_sums_to_one(xs in proptest::collection::vec(-20.0f32..20.0, 1..40)) {
        let mut g = Graph::<f32>::new(0);
        let x = g.constant(Tensor::vector(xs));
        let y = g.log_softmax(x, 0).unwrap();
        let total: f64 = g.value(y).data().iter().map(|v| (*v as f64).exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-6, "{}", total);
    }

    #[test]
    fn forward_is_bit_identical_across_runs(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::<f32>::new(seed);
            let a = g.constant(Tensor::randn(vec![4, 8], 1.0, &mut rng));
            let b = g.constant(Tensor::randn(vec![8, 3], 1.0, &mut rng));
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax_last(c).unwrap();
            g.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
