//! Tiny pre-norm causal transformer.
//!
//! One architecture serves three roles: the hypothesis generator, the frozen
//! reference copy used by the KL regularizer, and the backbone of the
//! LM-based classifier. Input and output embeddings are tied, so logits are
//! `hidden . E^T` and the generator's output vocabulary is the same id space
//! the classifiers read.
//!
//! Inputs are packed: several sequences of different lengths can run through
//! one forward pass, each attending only within itself.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
}

impl LmConfig {
    pub fn with_vocab(vocab: usize) -> Self {
        Self {
            vocab,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_len: 64,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.max_len == 0 || self.n_heads == 0 {
            return Err(Error::Parameter(format!("degenerate model config {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    qkv_weight: Tensor,
    qkv_bias: Tensor,
    proj_weight: Tensor,
    proj_bias: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
    fc_weight: Tensor,
    fc_bias: Tensor,
    out_weight: Tensor,
    out_bias: Tensor,
}

impl Block {
    fn new(d: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1_gain: Tensor::full(vec![d], 1.0),
            ln1_bias: Tensor::zeros(vec![d]),
            qkv_weight: Tensor::randn(vec![d, 3 * d], INIT_STD, rng),
            qkv_bias: Tensor::zeros(vec![3 * d]),
            proj_weight: Tensor::randn(vec![d, d], INIT_STD, rng),
            proj_bias: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::full(vec![d], 1.0),
            ln2_bias: Tensor::zeros(vec![d]),
            fc_weight: Tensor::randn(vec![d, 4 * d], INIT_STD, rng),
            fc_bias: Tensor::zeros(vec![4 * d]),
            out_weight: Tensor::randn(vec![4 * d, d], INIT_STD, rng),
            out_bias: Tensor::zeros(vec![d]),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.qkv.weight", &self.qkv_weight),
            ("attn.qkv.bias", &self.qkv_bias),
            ("attn.proj.weight", &self.proj_weight),
            ("attn.proj.bias", &self.proj_bias),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("mlp.fc.weight", &self.fc_weight),
            ("mlp.fc.bias", &self.fc_bias),
            ("mlp.proj.weight", &self.out_weight),
            ("mlp.proj.bias", &self.out_bias),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 12] {
        [
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("attn.qkv.weight", &mut self.qkv_weight),
            ("attn.qkv.bias", &mut self.qkv_bias),
            ("attn.proj.weight", &mut self.proj_weight),
            ("attn.proj.bias", &mut self.proj_bias),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
            ("mlp.fc.weight", &mut self.fc_weight),
            ("mlp.fc.bias", &mut self.fc_bias),
            ("mlp.proj.weight", &mut self.out_weight),
            ("mlp.proj.bias", &mut self.out_bias),
        ]
    }
}

/// Causal transformer language model with tied input/output embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyLm {
    config: LmConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<Block>,
    lnf_gain: Tensor,
    lnf_bias: Tensor,
}

/// A model's parameters bound as leaves of one graph, in
/// [`ToyLm::named_tensors`] order.
#[derive(Clone, Debug)]
pub struct LmVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    blocks: Vec<[Var; 12]>,
    lnf_gain: Var,
    lnf_bias: Var,
    n_heads: usize,
    max_len: usize,
    vocab: usize,
    d_model: usize,
}

impl LmVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        out.push(self.lnf_gain);
        out.push(self.lnf_bias);
        out
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }
}

/// One piece of an input sequence.
#[derive(Clone, Debug)]
pub enum Slot {
    /// Hard token ids, embedded by row lookup.
    Ids(Vec<usize>),
    /// `[k x V]` rows (one-hot or soft) embedded as `rows . E`, which keeps a
    /// gradient path into whatever produced the rows.
    Rows(Var),
    /// `k` positions whose token embedding is all zeros.
    Zeros(usize),
}

impl Slot {
    fn len<T: Scalar>(&self, g: &Graph<T>) -> usize {
        match self {
            Slot::Ids(ids) => ids.len(),
            Slot::Rows(v) => g.value(*v).rows(),
            Slot::Zeros(k) => *k,
        }
    }
}

/// Output of [`lm_forward`] for a single sequence.
#[derive(Clone, Copy, Debug)]
pub struct LmOutput {
    /// `[T x V]`
    pub logits: Var,
    /// `[T x d]`, after the final layer norm.
    pub hidden: Var,
}

impl ToyLm {
    pub fn new(config: LmConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            tok_emb: Tensor::randn(vec![config.vocab, d], INIT_STD, rng),
            pos_emb: Tensor::randn(vec![config.max_len, d], INIT_STD, rng),
            blocks: (0..config.n_layers).map(|_| Block::new(d, rng)).collect(),
            lnf_gain: Tensor::full(vec![d], 1.0),
            lnf_bias: Tensor::zeros(vec![d]),
            config,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn token_embeddings(&self) -> &Tensor {
        &self.tok_emb
    }

    pub fn token_embeddings_mut(&mut self) -> &mut Tensor {
        &mut self.tok_emb
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.fields().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("ln_f.gain".to_string(), &self.lnf_gain));
        out.push(("ln_f.bias".to_string(), &self.lnf_bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.fields_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("blocks.{i}.{n}"), t)),
            );
        }
        out.push(("ln_f.gain".to_string(), &mut self.lnf_gain));
        out.push(("ln_f.bias".to_string(), &mut self.lnf_bias));
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Adds the parameters to `g` as leaves.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> LmVars {
        self.bind_with(g, trainable, None)
    }

    /// Like [`ToyLm::bind`], but uses `tok_emb` (already on the graph) as the
    /// token embedding table instead of this model's own.
    pub fn bind_with<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool, tok_emb: Option<Var>) -> LmVars {
        let mut leaf = |t: &Tensor| g.leaf(t.cast(), trainable);
        let tok = match tok_emb {
            Some(v) => v,
            None => leaf(&self.tok_emb),
        };
        let pos = leaf(&self.pos_emb);
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.fields().map(|(_, t)| leaf(t)))
            .collect();
        LmVars {
            tok_emb: tok,
            pos_emb: pos,
            blocks,
            lnf_gain: leaf(&self.lnf_gain),
            lnf_bias: leaf(&self.lnf_bias),
            n_heads: self.config.n_heads,
            max_len: self.config.max_len,
            vocab: self.config.vocab,
            d_model: self.config.d_model,
        }
    }
}

/// Embeds packed sequences (token + position). Returns `[N x d]` and the
/// sequence lengths.
pub fn embed<T: Scalar>(g: &mut Graph<T>, lm: &LmVars, seqs: &[Vec<Slot>]) -> Result<(Var, Vec<usize>)> {
    let mut pieces = Vec::new();
    let mut positions = Vec::new();
    let mut lens = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let len: usize = seq.iter().map(|s| s.len(g)).sum();
        if len == 0 {
            return Err(Error::contract("empty input sequence"));
        }
        if len > lm.max_len {
            return Err(Error::Length {
                len,
                max: lm.max_len,
            });
        }
        for slot in seq {
            let piece = match slot {
                Slot::Ids(ids) if ids.is_empty() => continue,
                Slot::Ids(ids) => g.select_rows(lm.tok_emb, ids)?,
                Slot::Rows(rows) => {
                    if g.value(*rows).cols() != lm.vocab {
                        return Err(Error::Dimension {
                            op: "embed",
                            lhs: g.shape(*rows).to_vec(),
                            rhs: vec![lm.vocab, lm.d_model],
                        });
                    }
                    g.matmul(*rows, lm.tok_emb)?
                }
                Slot::Zeros(0) => continue,
                Slot::Zeros(k) => g.constant(Tensor::zeros(vec![*k, lm.d_model])),
            };
            pieces.push(piece);
        }
        positions.extend(0..len);
        lens.push(len);
    }
    let tokens = if pieces.len() == 1 {
        pieces[0]
    } else {
        g.concat_rows(&pieces)?
    };
    let pos = g.select_rows(lm.pos_emb, &positions)?;
    Ok((g.add(tokens, pos)?, lens))
}

/// Runs the transformer over packed sequences and returns the final
/// (layer-normed) hidden states `[N x d]` with the sequence lengths.
pub fn forward_hidden<T: Scalar>(g: &mut Graph<T>, lm: &LmVars, seqs: &[Vec<Slot>]) -> Result<(Var, Vec<usize>)> {
    let (mut h, lens) = embed(g, lm, seqs)?;
    let eps = T::from_f64(LN_EPS);
    for b in &lm.blocks {
        let [ln1g, ln1b, qkvw, qkvb, projw, projb, ln2g, ln2b, fcw, fcb, outw, outb] = *b;
        let a = g.layer_norm(h, ln1g, ln1b, eps)?;
        let qkv = g.matmul(a, qkvw)?;
        let qkv = g.add_row(qkv, qkvb)?;
        let att = g.causal_attention(qkv, &lens, lm.n_heads)?;
        let o = g.matmul(att, projw)?;
        let o = g.add_row(o, projb)?;
        h = g.add(h, o)?;
        let m = g.layer_norm(h, ln2g, ln2b, eps)?;
        let f = g.matmul(m, fcw)?;
        let f = g.add_row(f, fcb)?;
        let f = g.gelu(f);
        let f = g.matmul(f, outw)?;
        let f = g.add_row(f, outb)?;
        h = g.add(h, f)?;
    }
    let h = g.layer_norm(h, lm.lnf_gain, lm.lnf_bias, eps)?;
    Ok((h, lens))
}

/// Row index of the last position of every packed sequence.
pub fn last_rows(lens: &[usize]) -> Vec<usize> {
    lens.iter()
        .scan(0, |end, &l| {
            *end += l;
            Some(*end - 1)
        })
        .collect()
}

/// Tied output projection: `hidden . E^T`.
pub fn logits<T: Scalar>(g: &mut Graph<T>, lm: &LmVars, hidden: Var) -> Result<Var> {
    g.matmul_nt(hidden, lm.tok_emb)
}

/// Logits of the last position of every sequence, `[B x V]`.
pub fn next_token_logits<T: Scalar>(g: &mut Graph<T>, lm: &LmVars, seqs: &[Vec<Slot>]) -> Result<Var> {
    let (h, lens) = forward_hidden(g, lm, seqs)?;
    let last = g.select_rows(h, &last_rows(&lens))?;
    logits(g, lm, last)
}

/// Full forward pass over one sequence of hard and/or soft tokens.
pub fn lm_forward<T: Scalar>(g: &mut Graph<T>, lm: &LmVars, tokens: Vec<Slot>) -> Result<LmOutput> {
    let (hidden, _) = forward_hidden(g, lm, &[tokens])?;
    let logits = logits(g, lm, hidden)?;
    Ok(LmOutput { logits, hidden })
}

/// Final-position hidden state of every sequence, `[B x d]`.
pub fn summary_vector<T: Scalar>(g: &mut Graph<T>, lm: &LmVars, seqs: &[Vec<Slot>]) -> Result<Var> {
    let (h, lens) = forward_hidden(g, lm, seqs)?;
    g.select_rows(h, &last_rows(&lens))
}

/// Mean next-token cross-entropy over every position of every sequence.
pub fn lm_nll<T: Scalar>(g: &mut Graph<T>, lm: &LmVars, corpus: &[Vec<usize>]) -> Result<Var> {
    let mut inputs = Vec::with_capacity(corpus.len());
    let mut targets = Vec::new();
    let mut row = 0;
    for s in corpus {
        if s.len() < 2 {
            return Err(Error::contract("language-model sequences need at least 2 tokens"));
        }
        inputs.push(vec![Slot::Ids(s[..s.len() - 1].to_vec())]);
        for &t in &s[1..] {
            if t >= lm.vocab {
                return Err(Error::Index {
                    what: "token",
                    index: t,
                    len: lm.vocab,
                });
            }
            targets.push(row * lm.vocab + t);
            row += 1;
        }
    }
    let (h, _) = forward_hidden(g, lm, &inputs)?;
    let z = logits(g, lm, h)?;
    let lp = g.log_softmax(z, 1)?;
    let picked = g.gather_elems(lp, &targets)?;
    let m = g.mean(picked);
    Ok(g.neg(m))
}

/// `w^T g_i` for each row of `summaries` (`[B x d]`), returned as `[1 x B]`.
pub fn head_scores<T: Scalar>(g: &mut Graph<T>, head: Var, summaries: Var) -> Result<Var> {
    let d = g.value(head).len();
    let w = g.reshape(head, vec![1, d])?;
    g.matmul_nt(w, summaries)
}

/// Fresh classifier weight vector `w` for the given hidden size.
pub fn new_head(d_model: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(vec![d_model], INIT_STD, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BOS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(vocab: usize) -> ToyLm {
        let cfg = LmConfig {
            vocab,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_len: 10,
        };
        ToyLm::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn single_bos_gives_one_row_of_logits() {
        let lm = tiny(11);
        let mut g = Graph::<f32>::new(0);
        let v = lm.bind(&mut g, false);
        let out = lm_forward(&mut g, &v, vec![Slot::Ids(vec![BOS])]).unwrap();
        assert_eq!(g.shape(out.logits), &[1, 11]);
        assert_eq!(g.shape(out.hidden), &[1, 8]);
    }

    #[test]
    fn too_long_input_is_rejected() {
        let lm = tiny(11);
        let mut g = Graph::<f32>::new(0);
        let v = lm.bind(&mut g, false);
        let err = lm_forward(&mut g, &v, vec![Slot::Ids(vec![1; 11])]).unwrap_err();
        assert!(matches!(err, Error::Length { len: 11, max: 10 }));
    }

    #[test]
    fn summary_of_empty_sequence_is_an_error() {
        let lm = tiny(11);
        let mut g = Graph::<f32>::new(0);
        let v = lm.bind(&mut g, false);
        assert!(matches!(
            summary_vector(&mut g, &v, &[vec![Slot::Ids(vec![])]]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn summary_of_length_one_is_position_zero() {
        let lm = tiny(11);
        let mut g = Graph::<f32>::new(0);
        let v = lm.bind(&mut g, false);
        let out = lm_forward(&mut g, &v, vec![Slot::Ids(vec![5])]).unwrap();
        let s = summary_vector(&mut g, &v, &[vec![Slot::Ids(vec![5])]]).unwrap();
        assert_eq!(g.value(out.hidden).data(), g.value(s).data());
    }

    #[test]
    fn named_tensors_align_with_bound_vars() {
        let lm = tiny(11);
        let mut g = Graph::<f32>::new(0);
        let v = lm.bind(&mut g, true);
        let named = lm.named_tensors();
        let vars = v.vars();
        assert_eq!(named.len(), vars.len());
        for ((_, t), var) in named.iter().zip(vars) {
            assert_eq!(g.value(var).data(), t.data());
        }
    }

    #[test]
    fn packed_sequences_match_separate_runs() {
        let lm = tiny(11);
        let mut g = Graph::<f32>::new(0);
        let v = lm.bind(&mut g, false);
        let a = vec![Slot::Ids(vec![1, 4, 5])];
        let b = vec![Slot::Ids(vec![1, 7])];
        let both = summary_vector(&mut g, &v, &[a.clone(), b.clone()]).unwrap();
        let sa = summary_vector(&mut g, &v, &[a]).unwrap();
        let sb = summary_vector(&mut g, &v, &[b]).unwrap();
        let both = g.value(both).data().to_vec();
        let close = |x: &[f32], y: &[f32]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-5);
        assert!(close(&both[..8], g.value(sa).data()));
        assert!(close(&both[8..], g.value(sb).data()));
    }
}
