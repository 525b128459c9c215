use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const EPS: f32 = 1e-8;

/// Adam moments for an ordered list of parameters.
///
/// Each parameter keeps its own step count, so a parameter that starts
/// receiving gradients late (the LM classifier after warm-up) gets the
/// usual bias correction from its first update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: Vec<u64>,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            t: vec![0; shapes.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// One Adam update. `grads[i] = None` leaves parameter `i` and its moments
/// untouched.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Option<&Tensor>], state: &mut AdamState, lr: f32) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::contract(format!(
            "adam_step: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        state.t[i] += 1;
        let t = state.t[i] as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mj = BETA1 * *mj + (1.0 - BETA1) * gj;
            *vj = BETA2 * *vj + (1.0 - BETA2) * gj * gj;
            let mh = *mj / c1;
            let vh = *vj / c2;
            *w -= lr * mh / (vh.sqrt() + EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let g = Tensor::zeros(vec![3]);
        let mut s = AdamState::new(&[&[3]]);
        for _ in 0..10 {
            adam_step(&mut [&mut p], &[Some(&g)], &mut s, 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let lr = 1e-3;
        let mut p = Tensor::vector(vec![0.0f32; 2]);
        let g = Tensor::vector(vec![0.37, -4.0]);
        let mut s = AdamState::new(&[&[2]]);
        let mut last = p.clone();
        for _ in 0..1000 {
            last = p.clone();
            adam_step(&mut [&mut p], &[Some(&g)], &mut s, lr).unwrap();
        }
        for j in 0..2 {
            let step = (p.data()[j] - last.data()[j]).abs();
            assert!((step - lr).abs() / lr < 0.05, "step {step}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::vector(vec![0.0f32; 2]);
        let g = Tensor::vector(vec![0.0f32; 3]);
        let mut s = AdamState::new(&[&[2]]);
        assert!(adam_step(&mut [&mut p], &[Some(&g)], &mut s, 0.1).is_err());
        assert!(adam_step(&mut [&mut p], &[], &mut s, 0.1).is_err());
    }

    #[test]
    fn skipped_params_keep_their_clock() {
        let mut a = Tensor::vector(vec![0.0f32]);
        let mut b = Tensor::vector(vec![0.0f32]);
        let g = Tensor::vector(vec![1.0f32]);
        let mut s = AdamState::new(&[&[1], &[1]]);
        adam_step(&mut [&mut a, &mut b], &[Some(&g), None], &mut s, 0.1).unwrap();
        assert_eq!(s.t, vec![1, 0]);
        assert_eq!(b.data()[0], 0.0);
        // first bias-corrected step has magnitude lr
        assert!((a.data()[0] + 0.1).abs() < 1e-6);
    }
}
