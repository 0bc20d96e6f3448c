//! Single-head attention and the query decoder block.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Bound, ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};

pub(crate) fn init_normal<F: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| F::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Query/key/value projections of one attention head.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub query_w: ParamId,
    pub query_b: ParamId,
    pub key_w: ParamId,
    pub key_b: ParamId,
    pub value_w: ParamId,
    pub value_b: ParamId,
    dim: usize,
}

impl AttentionLayer {
    pub fn new<F: Real>(store: &mut ParamStore<F>, prefix: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let mut lin = |name: &str, rng: &mut _| {
            (
                store.add(format!("{prefix}.{name}.weight"), init_normal(&[dim, dim], std, rng)),
                store.add(format!("{prefix}.{name}.bias"), Tensor::zeros(&[dim])),
            )
        };
        let (query_w, query_b) = lin("query", rng);
        let (key_w, key_b) = lin("key", rng);
        let (value_w, value_b) = lin("value", rng);
        Self {
            query_w,
            query_b,
            key_w,
            key_b,
            value_w,
            value_b,
            dim,
        }
    }

    /// `softmax(Q·Kᵀ/√C)·V` for queries `[B,Nq,C]` over `context` `[B,Nk,C]`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, queries: Var, context: Var) -> Result<Var, TensorError> {
        let q = tape.linear(queries, p.var(self.query_w), Some(p.var(self.query_b)))?;
        let k = tape.linear(context, p.var(self.key_w), Some(p.var(self.key_b)))?;
        let v = tape.linear(context, p.var(self.value_w), Some(p.var(self.value_b)))?;
        let kt = tape.transpose_last_two(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scalar_mul(scores, 1.0 / (self.dim as f64).sqrt())?;
        let weights = tape.softmax_last_dim(scores)?;
        tape.matmul(weights, v)
    }
}

/// Query self-attention, cross-attention over encoder features, then a
/// two-layer feed-forward network, each with a residual connection.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub self_attn: AttentionLayer,
    pub cross_attn: AttentionLayer,
    pub ffn_in_w: ParamId,
    pub ffn_in_b: ParamId,
    pub ffn_out_w: ParamId,
    pub ffn_out_b: ParamId,
}

impl AttentionBlock {
    pub fn new<F: Real>(store: &mut ParamStore<F>, prefix: &str, dim: usize, ffn_dim: usize, rng: &mut impl Rng) -> Self {
        let self_attn = AttentionLayer::new(store, &format!("{prefix}.self_attn"), dim, rng);
        let cross_attn = AttentionLayer::new(store, &format!("{prefix}.cross_attn"), dim, rng);
        let ffn_in_w = store.add(
            format!("{prefix}.ffn.in.weight"),
            init_normal(&[ffn_dim, dim], (2.0 / dim as f64).sqrt(), rng),
        );
        let ffn_in_b = store.add(format!("{prefix}.ffn.in.bias"), Tensor::zeros(&[ffn_dim]));
        let ffn_out_w = store.add(
            format!("{prefix}.ffn.out.weight"),
            init_normal(&[dim, ffn_dim], 1.0 / (ffn_dim as f64).sqrt(), rng),
        );
        let ffn_out_b = store.add(format!("{prefix}.ffn.out.bias"), Tensor::zeros(&[dim]));
        Self {
            self_attn,
            cross_attn,
            ffn_in_w,
            ffn_in_b,
            ffn_out_w,
            ffn_out_b,
        }
    }

    /// `queries` is `[B,N2,C]`, `features` is `[B,N1,C]`; returns `[B,N2,C]`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, queries: Var, features: Var) -> Result<Var, TensorError> {
        let (sq, sf) = (tape.shape(queries).to_vec(), tape.shape(features).to_vec());
        if sq.len() != 3 || sf.len() != 3 || sq[0] != sf[0] || sq[2] != sf[2] {
            return Err(super::shape_err("attention_block", &sq, &sf));
        }
        let s = self.self_attn.forward(tape, p, queries, queries)?;
        let q1 = tape.add(queries, s)?;
        let c = self.cross_attn.forward(tape, p, q1, features)?;
        let q2 = tape.add(q1, c)?;
        let h = tape.linear(q2, p.var(self.ffn_in_w), Some(p.var(self.ffn_in_b)))?;
        let h = tape.relu(h)?;
        let h = tape.linear(h, p.var(self.ffn_out_w), Some(p.var(self.ffn_out_b)))?;
        tape.add(q2, h)
    }
}
