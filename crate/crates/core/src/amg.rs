//! Adaptive mask generator.
//!
//! Trainable cluster tokens absorb image context through a small transformer
//! (`f_sem`). Position-embedded tokens from the cluster projection are assigned
//! to the nearest cluster under the combined distance
//! `‖a−b‖² · (1 − cos(a, b))`; at test time a token is masked when its
//! distance exceeds its cluster's boundary `mean + λ·std`.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{AmiError, Result};
use crate::graph::{combined_distance, Graph, ParamId, ParamStore, Var};
use crate::mask::MaskVector;
use crate::tokenizer::{lookup, TokenSequence};
use crate::transformer::TransformerBlock;

/// Combined Euclidean-cosine distance; zero-norm inputs are guarded.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    combined_distance(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterLossWeights {
    pub intra: f64,
    pub inter: f64,
}

impl Default for ClusterLossWeights {
    fn default() -> Self {
        Self { intra: 1.0, inter: 0.1 }
    }
}

/// Hard nearest-cluster assignment of one token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    clusters: usize,
    cluster: Vec<usize>,
    distance: Vec<f64>,
}

impl Assignment {
    pub fn num_clusters(&self) -> usize {
        self.clusters
    }

    pub fn len(&self) -> usize {
        self.cluster.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cluster.is_empty()
    }

    /// Assigned cluster per token.
    pub fn clusters(&self) -> &[usize] {
        &self.cluster
    }

    /// Distance from each token to its assigned cluster.
    pub fn distances(&self) -> &[f64] {
        &self.distance
    }

    /// Distances of the tokens assigned to cluster `i`, in token order.
    pub fn members(&self, i: usize) -> Vec<f64> {
        self.cluster
            .iter()
            .zip(&self.distance)
            .filter(|(&c, _)| c == i)
            .map(|(_, &d)| d)
            .collect()
    }

    /// Per-cluster distance sums `d_i`.
    pub fn sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.clusters];
        for (&c, &d) in self.cluster.iter().zip(&self.distance) {
            s[c] += d;
        }
        s
    }
}

/// Assigns each token row to its nearest cluster row; ties go to the lower index.
pub fn assign(clusters: ArrayView2<f64>, tokens: ArrayView2<f64>) -> Assignment {
    assert!(clusters.nrows() >= 1, "at least one cluster token required");
    let centers: Vec<Vec<f64>> = clusters.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut cluster = Vec::with_capacity(tokens.nrows());
    let mut dist = Vec::with_capacity(tokens.nrows());
    for t in tokens.rows() {
        let t = t.to_vec();
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for (i, c) in centers.iter().enumerate() {
            let d = distance(c, &t);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        cluster.push(best);
        dist.push(best_d);
    }
    Assignment {
        clusters: centers.len(),
        cluster,
        distance: dist,
    }
}

/// `intra · Σ_i d_i − inter · Σ_i Σ_j R(c_i, c_j)` over ordered cluster pairs.
pub fn clustering_loss(clusters: ArrayView2<f64>, assignment: &Assignment, w: ClusterLossWeights) -> f64 {
    let intra: f64 = assignment.sums().iter().sum();
    let rows: Vec<Vec<f64>> = clusters.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut inter = 0.0;
    for a in &rows {
        for b in &rows {
            inter += distance(a, b);
        }
    }
    w.intra * intra - w.inter * inter
}

/// Differentiable [`clustering_loss`]; `assignment` fixes which rows are compared.
pub fn clustering_loss_graph(
    g: &mut Graph,
    clusters: Var,
    tokens: Var,
    assignment: &Assignment,
    w: ClusterLossWeights,
) -> Var {
    let p = g.shape(clusters).0;
    let centers = g.gather_rows(clusters, assignment.clusters().to_vec());
    let d = g.row_distance(centers, tokens);
    let intra = g.sum(d);
    let left: Vec<usize> = (0..p * p).map(|k| k / p).collect();
    let right: Vec<usize> = (0..p * p).map(|k| k % p).collect();
    let a = g.gather_rows(clusters, left);
    let b = g.gather_rows(clusters, right);
    let pair = g.row_distance(a, b);
    let inter = g.sum(pair);
    let intra = g.scale(intra, w.intra);
    let inter = g.scale(inter, w.inter);
    g.sub(intra, inter)
}

/// Per-cluster boundary `mean + λ·std` (population std); `None` for empty clusters.
pub fn boundaries(assignment: &Assignment, lambda: f64) -> Vec<Option<f64>> {
    (0..assignment.num_clusters())
        .map(|i| {
            let d = assignment.members(i);
            if d.is_empty() {
                return None;
            }
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            Some(mean + lambda * var.sqrt())
        })
        .collect()
}

/// Masks tokens whose distance strictly exceeds their cluster boundary.
pub fn adaptive_mask(assignment: &Assignment, bounds: &[Option<f64>]) -> MaskVector {
    let bits = assignment
        .clusters()
        .iter()
        .zip(assignment.distances())
        .map(|(&c, &d)| {
            let r = bounds[c].expect("a cluster holding a token has a boundary");
            d <= r
        })
        .collect();
    MaskVector::from_bits(bits)
}

#[derive(Clone, Debug)]
pub struct AdaptiveMaskGenerator {
    pub clusters: ParamId,
    pub fsem: Vec<TransformerBlock>,
    pub lambda: f64,
    pub weights: ClusterLossWeights,
}

impl AdaptiveMaskGenerator {
    pub fn new(
        store: &mut ParamStore,
        num_clusters: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        lambda: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(num_clusters >= 1 && lambda > 0.0);
        let init = Array2::from_shape_fn((num_clusters, dim), |_| rng.random_range(-1.0..1.0));
        let clusters = store.add("amg.clusters", init);
        let fsem = (0..depth)
            .map(|k| TransformerBlock::new(store, &format!("amg.fsem.block{k}"), dim, heads, rng))
            .collect();
        Self {
            clusters,
            fsem,
            lambda,
            weights: ClusterLossWeights::default(),
        }
    }

    pub fn bind(
        store: &ParamStore,
        num_clusters: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        lambda: f64,
    ) -> Result<Self> {
        let clusters = lookup(store, "amg.clusters", (num_clusters, dim))?;
        let fsem = (0..depth)
            .map(|k| TransformerBlock::bind(store, &format!("amg.fsem.block{k}"), dim, heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            clusters,
            fsem,
            lambda,
            weights: ClusterLossWeights::default(),
        })
    }

    pub fn num_clusters(&self, store: &ParamStore) -> usize {
        store.get(self.clusters).nrows()
    }

    /// Runs `f_sem` over `[clusters; tokens]` and returns the cluster slice.
    pub fn aggregate_graph(&self, g: &mut Graph, tokens: Var) -> Var {
        let c = g.param(self.clusters);
        if self.fsem.is_empty() {
            return c;
        }
        let p = g.shape(c).0;
        let mut x = g.concat_rows(&[c, tokens]);
        for block in &self.fsem {
            x = block.forward(g, x);
        }
        g.slice_rows(x, 0, p)
    }

    pub fn aggregate(&self, store: &ParamStore, seq: &TokenSequence) -> Result<Array2<f64>> {
        if !seq.pos_embedded {
            return Err(AmiError::Contract("aggregation expects position-embedded tokens".into()));
        }
        let d = store.get(self.clusters).ncols();
        if seq.dim() != d {
            return Err(AmiError::Shape(format!("token dim {} vs cluster dim {d}", seq.dim())));
        }
        let mut g = Graph::new(store);
        let t = g.constant(seq.tokens.clone());
        let c = self.aggregate_graph(&mut g, t);
        Ok(g.value(c).clone())
    }

    /// Test-time mask for one position-embedded cluster-projection sequence.
    pub fn generate(&self, store: &ParamStore, seq: &TokenSequence) -> Result<(MaskVector, Assignment)> {
        let clusters = self.aggregate(store, seq)?;
        let a = assign(clusters.view(), seq.tokens.view());
        let b = boundaries(&a, self.lambda);
        Ok((adaptive_mask(&a, &b), a))
    }
}
