//! Transformer inpainting network and reconstruction losses.

use rand::Rng;

use crate::error::{AmiError, Result};
use crate::features::FeatureMap;
use crate::graph::{Graph, ParamStore, Var};
use crate::tokenizer::TokenSequence;
use crate::transformer::TransformerBlock;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mse: f64,
    pub cosine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mse: 1.0, cosine: 5.0 }
    }
}

#[derive(Clone, Debug)]
pub struct InpaintNet {
    pub blocks: Vec<TransformerBlock>,
}

impl InpaintNet {
    pub fn new(store: &mut ParamStore, depth: usize, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let blocks = (0..depth)
            .map(|k| TransformerBlock::new(store, &format!("inpaint.block{k}"), dim, heads, rng))
            .collect();
        Self { blocks }
    }

    pub fn bind(store: &ParamStore, depth: usize, dim: usize, heads: usize) -> Result<Self> {
        let blocks = (0..depth)
            .map(|k| TransformerBlock::bind(store, &format!("inpaint.block{k}"), dim, heads))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward_graph(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let mut x = tokens;
        for (k, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, x);
            if g.value(x).iter().any(|v| !v.is_finite()) {
                return Err(AmiError::Numeric {
                    stage: "inpainting network".into(),
                    block: Some(k),
                });
            }
        }
        Ok(x)
    }

    pub fn inpaint_forward(&self, store: &ParamStore, seq: &TokenSequence) -> Result<TokenSequence> {
        if !seq.pos_embedded {
            return Err(AmiError::Contract("inpainting expects position-embedded tokens".into()));
        }
        let mut g = Graph::new(store);
        let x = g.constant(seq.tokens.clone());
        let y = self.forward_graph(&mut g, x)?;
        Ok(TokenSequence {
            tokens: g.value(y).clone(),
            pos_embedded: true,
        })
    }
}

/// `w.mse · MSE + w.cosine · mean(1 − cos)` with the cosine taken per row.
/// Both inputs are `locations × channels`.
pub fn reconstruction_loss_graph(g: &mut Graph, pred: Var, target: Var, w: LossWeights) -> Var {
    let diff = g.sub(pred, target);
    let sq = g.square(diff);
    let mse = g.mean(sq);
    let cos = g.row_cosine(pred, target);
    let mean_cos = g.mean(cos);
    let mse = g.scale(mse, w.mse);
    let cos_term = g.scale(mean_cos, -w.cosine);
    let loss = g.add(mse, cos_term);
    let one = g.constant(ndarray::Array2::from_elem((1, 1), w.cosine));
    g.add(loss, one)
}

pub fn reconstruction_loss(pred: &FeatureMap, target: &FeatureMap, w: LossWeights) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(AmiError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let p = g.constant(pred.locations());
    let t = g.constant(target.locations());
    let l = reconstruction_loss_graph(&mut g, p, t, w);
    Ok(g.scalar(l))
}
