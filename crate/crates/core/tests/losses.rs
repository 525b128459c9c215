use hypogen::autodiff::grad_check;
use hypogen::data::BOS;
use hypogen::lm::{LmConfig, ToyLm};
use hypogen::losses::{joint_objective, kld_step, qa_objective, repetition_penalty, supgen_loss, supgen_target};
use hypogen::train::{adam_step, AdamState};
use hypogen::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dist(v: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..v).map(|_| rng.random_range(-4.0f64..4.0).exp()).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|x| x / z).collect()
}

#[test]
fn kl_is_non_negative_and_zero_on_equality() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let v = rng.random_range(2..20);
        let p = random_dist(v, &mut rng);
        let q = random_dist(v, &mut rng);
        let mut g = Graph::<f64>::new(0);
        let lp = g.constant(Tensor::new(vec![1, v], p.iter().map(|x| x.ln()).collect()).unwrap());
        let kl = kld_step(&mut g, lp, &Tensor::new(vec![1, v], q).unwrap()).unwrap();
        assert!(g.item(kl) >= -1e-12, "{}", g.item(kl));
        let same = kld_step(&mut g, lp, &Tensor::new(vec![1, v], p).unwrap()).unwrap();
        assert!(g.item(same).abs() < 1e-12);
    }
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = Tensor::<f64>::new(vec![2, 5], (0..10).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let mut q = random_dist(5, &mut rng);
    q.extend(random_dist(5, &mut rng));
    let reference = Tensor::new(vec![2, 5], q).unwrap();
    let err = grad_check(&[logits], &[true], 1e-5, 0, |g, v| {
        let lp = g.log_softmax(v[0], 1)?;
        kld_step(g, lp, &reference)
    })
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn qa_objective_gradient_matches_finite_differences() {
    let scores = Tensor::<f64>::from_rows(&[vec![0.4, -1.0, 2.0, 0.1]]).unwrap();
    let err = grad_check(&[scores], &[true], 1e-5, 0, |g, v| {
        let lp = g.log_softmax(v[0], 1)?;
        qa_objective(g, lp, 1)
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn joint_objective_is_the_sum_of_both_heads() {
    let mut g = Graph::<f64>::new(0);
    let a = g.constant(Tensor::from_rows(&[vec![0.2f64.ln(), 0.8f64.ln()]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[vec![0.5f64.ln(), 0.5f64.ln()]]).unwrap());
    let j = joint_objective(&mut g, a, b, 1).unwrap();
    assert!((g.item(j) - (0.8f64.ln() + 0.5f64.ln())).abs() < 1e-12);
    let only = qa_objective(&mut g, a, 1).unwrap();
    assert!((g.item(only) - 0.8f64.ln()).abs() < 1e-12);
}

#[test]
fn repetition_reward_is_zero_without_history() {
    let mut g = Graph::<f64>::new(0);
    let lp = g.constant(Tensor::from_rows(&[vec![0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()]]).unwrap());
    let r = repetition_penalty(&mut g, lp, &[vec![]]).unwrap();
    assert_eq!(g.item(r), 0.0);
    let r = repetition_penalty(&mut g, lp, &[vec![0]]).unwrap();
    assert!((g.item(r) - 0.5f64.ln()).abs() < 1e-12);
}

fn model(seed: u64) -> ToyLm {
    let cfg = LmConfig {
        vocab: 9,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        max_len: 16,
    };
    ToyLm::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn supgen_loss_of_uniform_model_is_target_length_times_log_v() {
    let mut lm = model(0);
    for (name, t) in lm.named_tensors_mut() {
        if name == "ln_f.gain" || name == "ln_f.bias" {
            *t = Tensor::zeros(vec![16]);
        }
    }
    let mut g = Graph::<f32>::new(0);
    let vars = lm.bind(&mut g, false);
    let target = supgen_target(&[5, 6], 8);
    assert_eq!(target.len(), 3);
    let loss = supgen_loss(&mut g, &vars, &[&[4, 7]], &[target]).unwrap();
    assert!((g.item(loss) - 3.0 * 9f32.ln()).abs() < 1e-5);
}

#[test]
fn supgen_loss_falls_when_trained() {
    let mut lm = model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let questions: Vec<Vec<usize>> = (0..10).map(|_| vec![rng.random_range(4..9)]).collect();
    let targets: Vec<Vec<usize>> = questions.iter().map(|q| supgen_target(&[(q[0] + 1) % 9], 4)).collect();
    let qs: Vec<&[usize]> = questions.iter().map(Vec::as_slice).collect();
    let shapes: Vec<Vec<usize>> = lm.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut state = AdamState::new(&refs);
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut g = Graph::<f32>::new(0);
        let vars = lm.bind(&mut g, true);
        let loss = supgen_loss(&mut g, &vars, &qs, &targets).unwrap();
        g.backward(loss).unwrap();
        losses.push(g.item(loss));
        let grads: Vec<Tensor> = vars.vars().iter().map(|&v| g.grad_tensor(v)).collect();
        let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(Some).collect();
        let mut params: Vec<&mut Tensor> = lm.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
        adam_step(&mut params, &grad_refs, &mut state, 3e-3).unwrap();
    }
    assert!(losses[199] < 0.2 * losses[0], "{} -> {}", losses[0], losses[199]);
}

#[test]
fn supgen_rejects_overlong_targets() {
    let lm = model(3);
    let mut g = Graph::<f32>::new(0);
    let vars = lm.bind(&mut g, false);
    let long = vec![4; 20];
    assert!(supgen_loss(&mut g, &vars, &[&[BOS]], &[long]).is_err());
    assert!(supgen_loss(&mut g, &vars, &[&[4]], &[vec![]]).is_err());
}
