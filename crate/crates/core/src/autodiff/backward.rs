//! Vector-Jacobian products for every recorded operation.

use super::graph::{Graph, Op, Var};
use super::ops::{axis_extents, GELU_A, GELU_C};
use crate::tensor::Scalar;

type Grads<T> = Vec<Option<Vec<T>>>;

impl<T: Scalar> Graph<T> {
    /// Gradient buffer for `v`, or `None` when `v` does not need one.
    fn slot<'a>(&self, grads: &'a mut Grads<T>, v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn acc_map(&self, grads: &mut Grads<T>, v: Var, f: impl Fn(usize) -> T) {
        if let Some(dst) = self.slot(grads, v) {
            for (i, d) in dst.iter_mut().enumerate() {
                *d = *d + f(i);
            }
        }
    }

    pub(crate) fn propagate(&self, i: usize, g: &[T], grads: &mut Grads<T>) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = node.value.cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    // dA = dC . B^T  (or dC . B when B was used transposed)
                    let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(m, n, k, g, n as isize, 1, bv, rs, cs, T::one(), da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    if *trans_b {
                        // dB[n x k] = dC^T . A
                        T::gemm(n, m, k, g, 1, n as isize, av, k as isize, 1, T::one(), db);
                    } else {
                        // dB[k x n] = A^T . dC
                        T::gemm(k, m, n, av, 1, k as isize, g, n as isize, 1, T::one(), db);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, |j| g[j]);
                self.acc_map(grads, *b, |j| g[j]);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, |j| g[j]);
                self.acc_map(grads, *b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc_map(grads, *a, |j| g[j] * bv[j]);
                self.acc_map(grads, *b, |j| g[j] * av[j]);
            }
            Op::Scale(x, c) => self.acc_map(grads, *x, |j| g[j] * *c),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc_map(grads, *x, |j| g[j]),
            Op::AddRow { x, row } => {
                self.acc_map(grads, *x, |j| g[j]);
                let cols = node.value.cols().max(1);
                if let Some(dr) = self.slot(grads, *row) {
                    for (j, &gj) in g.iter().enumerate() {
                        dr[j % cols] = dr[j % cols] + gj;
                    }
                }
            }
            Op::Exp(x) => self.acc_map(grads, *x, |j| g[j] * y[j]),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, |j| g[j] / xv[j]);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let (c, a) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                self.acc_map(grads, *x, |j| {
                    let e = xv[j];
                    let t = (c * (e + a * e * e * e)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * a * e * e);
                    g[j] * (half * (T::one() + t) + half * e * dt)
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, |j| {
                    if xv[j] >= *lo && xv[j] <= *hi {
                        g[j]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Sum(x) => self.acc_map(grads, *x, |_| g[0]),
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).len().max(1) as f64);
                self.acc_map(grads, *x, |_| g[0] / n);
            }
            Op::MeanRows(x) => {
                let v = self.value(*x);
                let (m, n) = (v.rows(), v.cols());
                let inv = T::one() / T::from_f64(m as f64);
                self.acc_map(grads, *x, |j| g[j % n] * inv);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.acc_map(grads, *p, |j| g[offset + j]);
                    offset += len;
                }
            }
            Op::SelectRows { x, rows } => {
                let cols = node.value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            dx[r * cols + c] = dx[r * cols + c] + g[k * cols + c];
                        }
                    }
                }
            }
            Op::GatherElems { x, idx } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (k, &e) in idx.iter().enumerate() {
                        dx[e] = dx[e] + g[k];
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, d, inner) = axis_extents(node.value.shape(), *axis);
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * d + j) * inner + i;
                            let dot: T = (0..d).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..d {
                                dx[at(j)] = dx[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, d, inner) = axis_extents(node.value.shape(), *axis);
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * d + j) * inner + i;
                            let total: T = (0..d).map(|j| g[at(j)]).sum();
                            for j in 0..d {
                                dx[at(j)] = dx[at(j)] + g[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let gv = self.value(*gain).data();
                let nf = T::from_f64(n as f64);
                let xhat = |r: usize, j: usize| (xv.data()[r * n + j] - mean[r]) * rstd[r];
                if let Some(dg) = self.slot(grads, *gain) {
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] = dg[j] + g[r * n + j] * xhat(r, j);
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for r in 0..m {
                        for j in 0..n {
                            db[j] = db[j] + g[r * n + j];
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    for r in 0..m {
                        let dxhat = |j: usize| g[r * n + j] * gv[j];
                        let s1: T = (0..n).map(dxhat).sum();
                        let s2: T = (0..n).map(|j| dxhat(j) * xhat(r, j)).sum();
                        for j in 0..n {
                            let v = (nf * dxhat(j) - s1 - xhat(r, j) * s2) * rstd[r] / nf;
                            dx[r * n + j] = dx[r * n + j] + v;
                        }
                    }
                }
            }
            Op::CausalAttention {
                qkv,
                segments,
                heads,
                probs,
            } => {
                let Some(dqkv) = self.slot(grads, *qkv) else {
                    return;
                };
                let data = self.value(*qkv).data();
                let width = self.value(*qkv).cols();
                let d = width / 3;
                let dh = d / heads;
                let scale = T::one() / T::from_f64(dh as f64).sqrt();
                let mut start = 0;
                let mut p_off = 0;
                let mut dp = Vec::new();
                for &len in segments {
                    for h in 0..*heads {
                        for i in 0..len {
                            let p = &probs[p_off + i * len..][..len];
                            let go = &g[(start + i) * d + h * dh..][..dh];
                            dp.clear();
                            for j in 0..=i {
                                let vj = &data[(start + j) * width + 2 * d + h * dh..][..dh];
                                dp.push(go.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>());
                            }
                            let dot: T = (0..=i).map(|j| p[j] * dp[j]).sum();
                            for j in 0..=i {
                                // dV
                                let vbase = (start + j) * width + 2 * d + h * dh;
                                for e in 0..dh {
                                    dqkv[vbase + e] = dqkv[vbase + e] + p[j] * go[e];
                                }
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let qbase = (start + i) * width + h * dh;
                                let kbase = (start + j) * width + d + h * dh;
                                for e in 0..dh {
                                    dqkv[qbase + e] = dqkv[qbase + e] + ds * data[kbase + e];
                                    dqkv[kbase + e] = dqkv[kbase + e] + ds * data[qbase + e];
                                }
                            }
                        }
                        p_off += len * len;
                    }
                    start += len;
                }
            }
            Op::StraightThrough { soft, src_rows } => {
                let width = node.value.cols();
                if let Some(ds) = self.slot(grads, *soft) {
                    for (k, &r) in src_rows.iter().enumerate() {
                        for c in 0..width {
                            ds[r * width + c] = ds[r * width + c] + g[k * width + c];
                        }
                    }
                }
            }
        }
    }
}
