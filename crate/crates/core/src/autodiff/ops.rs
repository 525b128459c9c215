//! Forward definitions of the recorded operations.

use super::graph::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Scalar, Tensor};

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// Splits a shape into (outer, axis, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| f(e)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same length");
        self.push(out, op, &[x])
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, rec: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, rec, &[a, b]))
    }

    /// `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[m x k] . [n x k]^T -> [m x n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let err = || Error::Dimension {
            op: if trans_b { "matmul_nt" } else { "matmul" },
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        };
        let (m, k) = as_matrix(self.shape(a)).ok_or_else(err)?;
        let (br, bc) = as_matrix(self.shape(b)).ok_or_else(err)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(err());
        }
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
        );
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |e| e * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar(x), |e| e + c)
    }

    /// Adds a row vector to every row of `x` (leading-dimension broadcast).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(row).len() != cols {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data().to_vec();
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| e + r[i % cols.max(1)])
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow { x, row }, &[x, row]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |e| e.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |e| e.ln())
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        self.unary(x, Op::Gelu(x), move |e| {
            half * e * (T::one() + (c * (e + a * e * e * e)).tanh())
        })
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, move |e| e.max(lo).min(hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_f64(v.len().max(1) as f64);
        let s: T = v.data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    /// Mean over the leading axis: `[m x n] -> [1 x n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (m, n) = (v.rows(), v.cols());
        if m == 0 || v.shape().len() != 2 {
            return Err(Error::contract(format!(
                "mean_rows needs a non-empty matrix, got {:?}",
                v.shape()
            )));
        }
        let mut out = vec![T::zero(); n];
        for r in 0..m {
            for (o, &e) in out.iter_mut().zip(v.row(r)) {
                *o = *o + e;
            }
        }
        let inv = T::one() / T::from_f64(m as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        let out = Tensor::new(vec![1, n], out)?;
        Ok(self.push(out, Op::MeanRows(x), &[x]))
    }

    /// Stacks matrices with equal column counts along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows needs at least one input"));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Picks rows of a matrix by index. With an embedding table this is the
    /// id-based lookup; gradients scatter back into the selected rows.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let (nrows, cols) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= nrows {
                return Err(Error::Index {
                    what: "row",
                    index: r,
                    len: nrows,
                });
            }
            data.extend_from_slice(v.row(r));
        }
        let out = Tensor::new(vec![rows.len(), cols], data)?;
        Ok(self.push(out, Op::SelectRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Picks individual elements by flat row-major index.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= v.len() {
                return Err(Error::Index {
                    what: "element",
                    index: i,
                    len: v.len(),
                });
            }
            data.push(v.data()[i]);
        }
        let out = Tensor::vector(data);
        Ok(self.push(out, Op::GatherElems { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank || self.shape(x)[axis] == 0 {
            return Err(Error::contract(format!(
                "axis {axis} invalid for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let out = softmax_values(self.value(x), axis, false);
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Fused `log(softmax(x))` along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let out = softmax_values(self.value(x), axis, true);
        Ok(self.push(out, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let axis = self.shape(x).len().saturating_sub(1);
        self.softmax(x, axis)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_last(&mut self, x: Var) -> Result<Var> {
        let axis = self.shape(x).len().saturating_sub(1);
        self.log_softmax(x, axis)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let v = self.value(x);
        let (m, n) = (v.rows(), v.cols());
        for p in [gain, bias] {
            if self.value(p).len() != n {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: v.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let nf = T::from_f64(n as f64);
        let mut out = Vec::with_capacity(m * n);
        let mut means = Vec::with_capacity(m);
        let mut rstds = Vec::with_capacity(m);
        for r in 0..m {
            let row = v.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..n {
                out.push((row[j] - mean) * rstd * g[j] + b[j]);
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            &[x, gain, bias],
        ))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `[N x 3d]` holding queries, keys and values side by side.
    /// `segments` lists the length of each sequence packed into the `N`
    /// rows; positions only attend within their own segment and never to
    /// later positions.
    pub fn causal_attention(&mut self, qkv: Var, segments: &[usize], heads: usize) -> Result<Var> {
        let v = self.value(qkv);
        let (n, width) = (v.rows(), v.cols());
        if width % 3 != 0 || heads == 0 || (width / 3) % heads != 0 {
            return Err(Error::contract(format!(
                "attention width {width} incompatible with {heads} heads"
            )));
        }
        if segments.iter().sum::<usize>() != n {
            return Err(Error::Dimension {
                op: "causal_attention",
                lhs: v.shape().to_vec(),
                rhs: segments.to_vec(),
            });
        }
        let d = width / 3;
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let data = v.data();
        let mut out = vec![T::zero(); n * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|t| t * t * heads).sum());
        let mut start = 0;
        let mut scores = Vec::new();
        for &len in segments {
            for h in 0..heads {
                for i in 0..len {
                    let qi = &data[(start + i) * width + h * dh..][..dh];
                    scores.clear();
                    let mut mx = T::neg_infinity();
                    for j in 0..=i {
                        let kj = &data[(start + j) * width + d + h * dh..][..dh];
                        let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        mx = mx.max(s);
                        scores.push(s);
                    }
                    let mut z = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        z = z + *s;
                    }
                    let o = &mut out[(start + i) * d + h * dh..][..dh];
                    for (j, s) in scores.iter().enumerate() {
                        let p = *s / z;
                        let vj = &data[(start + j) * width + 2 * d + h * dh..][..dh];
                        for (oe, &ve) in o.iter_mut().zip(vj) {
                            *oe = *oe + p * ve;
                        }
                        probs.push(p);
                    }
                    probs.extend(std::iter::repeat_n(T::zero(), len - i - 1));
                }
            }
            start += len;
        }
        let out = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            out,
            Op::CausalAttention {
                qkv,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            &[qkv],
        ))
    }

    /// Straight-through selection: the forward value is a stack of one-hot
    /// rows, one per `(source row, token id)` pick; the backward pass hands
    /// each row's gradient to its source row of `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let v = self.value(soft);
        let (rows, width) = (v.rows(), v.cols());
        let mut out = Tensor::zeros(vec![picks.len(), width]);
        for (k, &(r, id)) in picks.iter().enumerate() {
            if r >= rows {
                return Err(Error::Index {
                    what: "row",
                    index: r,
                    len: rows,
                });
            }
            if id >= width {
                return Err(Error::Index {
                    what: "token",
                    index: id,
                    len: width,
                });
            }
            out.data_mut()[k * width + id] = T::one();
        }
        let src_rows = picks.iter().map(|&(r, _)| r).collect();
        Ok(self.push(out, Op::StraightThrough { soft, src_rows }, &[soft]))
    }

    /// Straight-through argmax of every row of `soft`.
    pub fn straight_through_argmax(&mut self, soft: Var) -> Result<Var> {
        let v = self.value(soft);
        let picks: Vec<_> = (0..v.rows()).map(|r| (r, argmax(v.row(r)))).collect();
        self.straight_through(soft, &picks)
    }
}

pub(crate) fn softmax_values<T: Scalar>(v: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (outer, d, inner) = axis_extents(v.shape(), axis);
    let x = v.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * d + j) * inner + i;
            let mx = (0..d).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..d).map(|j| (x[at(j)] - mx).exp()).sum();
            let lz = z.ln();
            for j in 0..d {
                out[at(j)] = if log {
                    x[at(j)] - mx - lz
                } else {
                    (x[at(j)] - mx).exp() / z
                };
            }
        }
    }
    Tensor::new(v.shape().to_vec(), out).expect("same length")
}
