//! Pre-norm transformer block shared by the inpainting network and the
//! semantic aggregation network.

use ndarray::Array2;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::tokenizer::{lookup, Linear};

pub const LN_EPS: f64 = 1e-6;
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            scale: store.add(format!("{name}.scale"), Array2::ones((1, dim))),
            offset: store.add(format!("{name}.offset"), Array2::zeros((1, dim))),
        }
    }

    fn bind(store: &ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            scale: lookup(store, &format!("{name}.scale"), (1, dim))?,
            offset: lookup(store, &format!("{name}.offset"), (1, dim))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let s = g.param(self.scale);
        let o = g.param(self.offset);
        let y = g.mul_row(n, s);
        g.add_row(y, o)
    }
}

/// `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub heads: usize,
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        let hidden = dim * MLP_RATIO;
        Self {
            heads,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            query: Linear::new(store, &format!("{name}.attn.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.attn.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.attn.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.attn.o"), dim, dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, dim, rng),
        }
    }

    pub fn bind(store: &ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let hidden = dim * MLP_RATIO;
        let linear = |n: &str, i: usize, o: usize| -> Result<Linear> {
            Ok(Linear {
                weight: lookup(store, &format!("{name}.{n}.w"), (i, o))?,
                bias: lookup(store, &format!("{name}.{n}.b"), (1, o))?,
            })
        };
        Ok(Self {
            heads,
            norm1: LayerNorm::bind(store, &format!("{name}.norm1"), dim)?,
            query: linear("attn.q", dim, dim)?,
            key: linear("attn.k", dim, dim)?,
            value: linear("attn.v", dim, dim)?,
            out: linear("attn.o", dim, dim)?,
            norm2: LayerNorm::bind(store, &format!("{name}.norm2"), dim)?,
            fc1: linear("mlp.fc1", dim, hidden)?,
            fc2: linear("mlp.fc2", hidden, dim)?,
        })
    }

    /// Full (unmasked) multi-head self-attention over all rows of `x`.
    /// Softmax nodes are appended to `probs` when given.
    pub fn attention(&self, g: &mut Graph, x: Var, mut probs: Option<&mut Vec<Var>>) -> Var {
        let dim = g.shape(x).1;
        let dh = dim / self.heads;
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let a = g.softmax_rows(scores);
            if let Some(p) = probs.as_deref_mut() {
                p.push(a);
            }
            heads.push(g.matmul(a, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.out.forward(g, cat)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        self.forward_traced(g, x, None)
    }

    pub fn forward_traced(&self, g: &mut Graph, x: Var, probs: Option<&mut Vec<Var>>) -> Var {
        let n1 = self.norm1.forward(g, x);
        let a = self.attention(g, n1, probs);
        let x = g.add(x, a);
        let n2 = self.norm2.forward(g, x);
        let h = self.fc1.forward(g, n2);
        let h = g.gelu(h);
        let m = self.fc2.forward(g, h);
        g.add(x, m)
    }
}
