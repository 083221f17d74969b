//! Patch tokenization of feature maps and the inverse projection.

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;

use crate::error::{AmiError, Result};
use crate::features::FeatureMap;
use crate::graph::{Graph, ParamId, ParamStore, Var};

/// Geometry of the non-overlapping `K × K` patch grid over an `H_F × W_F × C_F` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn new(patch: usize, height: usize, width: usize, channels: usize) -> Result<Self> {
        if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(AmiError::Shape(format!(
                "feature map {height}x{width} not divisible by patch size {patch}"
            )));
        }
        Ok(Self {
            patch,
            height,
            width,
            channels,
        })
    }

    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    /// Token count `L`.
    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened patch length `K·K·C_F`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Token index and within-patch offset `(ky·K + kx)` of spatial cell `(y, x)`.
    pub fn locate(&self, y: usize, x: usize) -> (usize, usize) {
        let k = self.patch;
        ((y / k) * self.cols() + x / k, (y % k) * k + x % k)
    }

    /// Spatial cell of row `r` in the `(L·K²) × C_F` patch-major location layout.
    pub fn cell_of(&self, r: usize) -> (usize, usize) {
        let kk = self.patch * self.patch;
        let (t, off) = (r / kk, r % kk);
        let k = self.patch;
        ((t / self.cols()) * k + off / k, (t % self.cols()) * k + off % k)
    }

    fn check(&self, feat: &FeatureMap) -> Result<()> {
        let dim = feat.dim();
        if dim != (self.height, self.width, self.channels) {
            return Err(AmiError::Shape(format!(
                "feature map {dim:?} does not match grid {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        Ok(())
    }

    /// Gathers patches in row-major order, each flattened as `(ky, kx, c)`: an `L × K²C_F` matrix.
    pub fn patchify(&self, feat: &FeatureMap) -> Result<Array2<f64>> {
        self.check(feat)?;
        let mut out = Array2::<f64>::zeros((self.len(), self.patch_dim()));
        for ((y, x, c), &v) in feat.data.indexed_iter() {
            let (t, off) = self.locate(y, x);
            out[[t, off * self.channels + c]] = v as f64;
        }
        Ok(out)
    }

    pub fn unpatchify(&self, patches: ArrayView2<f64>) -> Result<Array3<f32>> {
        if patches.dim() != (self.len(), self.patch_dim()) {
            return Err(AmiError::Shape(format!(
                "patch matrix {:?} does not match grid ({}, {})",
                patches.dim(),
                self.len(),
                self.patch_dim()
            )));
        }
        Ok(Array3::from_shape_fn((self.height, self.width, self.channels), |(y, x, c)| {
            let (t, off) = self.locate(y, x);
            patches[[t, off * self.channels + c]] as f32
        }))
    }
}

/// Affine map `x W + b` with `W` stored `in × out` and `b` as a `1 × out` row.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform initialization in `±1/√fan_in`.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        let b = Array2::from_shape_fn((1, fan_out), |_| rng.random_range(-bound..bound));
        Self {
            weight: store.add(format!("{name}.w"), w),
            bias: store.add(format!("{name}.b"), b),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `L × D`
    pub tokens: Array2<f64>,
    pub pos_embedded: bool,
}

impl TokenSequence {
    pub fn new(tokens: Array2<f64>) -> Self {
        Self {
            tokens,
            pos_embedded: false,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Which forward projection produces the tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    /// Feeds the inpainting network.
    Inpaint,
    /// Feeds the adaptive mask generator; never shares weights with `Inpaint`.
    Cluster,
}

/// Fixed interleaved sin/cos table over the flattened token index.
pub fn sinusoidal_embedding(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, j)| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub grid: PatchGrid,
    pub dim: usize,
    pub proj1: Linear,
    pub proj2: Linear,
    pub proj3: Linear,
    positional: Array2<f64>,
}

impl Tokenizer {
    pub fn new(store: &mut ParamStore, grid: PatchGrid, dim: usize, rng: &mut impl Rng) -> Self {
        let pd = grid.patch_dim();
        Self {
            grid,
            dim,
            proj1: Linear::new(store, "proj1", pd, dim, rng),
            proj2: Linear::new(store, "proj2", dim, pd, rng),
            proj3: Linear::new(store, "proj3", pd, dim, rng),
            positional: sinusoidal_embedding(grid.len(), dim),
        }
    }

    /// Rebinds to parameters already present in `store`.
    pub fn bind(store: &ParamStore, grid: PatchGrid, dim: usize) -> Result<Self> {
        let linear = |name: &str, fan_in: usize, fan_out: usize| -> Result<Linear> {
            Ok(Linear {
                weight: lookup(store, &format!("{name}.w"), (fan_in, fan_out))?,
                bias: lookup(store, &format!("{name}.b"), (1, fan_out))?,
            })
        };
        let pd = grid.patch_dim();
        Ok(Self {
            grid,
            dim,
            proj1: linear("proj1", pd, dim)?,
            proj2: linear("proj2", dim, pd)?,
            proj3: linear("proj3", pd, dim)?,
            positional: sinusoidal_embedding(grid.len(), dim),
        })
    }

    pub fn positional(&self) -> &Array2<f64> {
        &self.positional
    }

    fn projection(&self, which: Projection) -> Linear {
        match which {
            Projection::Inpaint => self.proj1,
            Projection::Cluster => self.proj3,
        }
    }

    pub fn tokenize_graph(&self, g: &mut Graph, patches: Var, which: Projection) -> Var {
        self.projection(which).forward(g, patches)
    }

    pub fn add_positional_graph(&self, g: &mut Graph, tokens: Var) -> Var {
        let pos = g.constant(self.positional.clone());
        g.add(tokens, pos)
    }

    /// Maps tokens back to the `L × K²C_F` patch matrix.
    pub fn detokenize_graph(&self, g: &mut Graph, tokens: Var) -> Var {
        self.proj2.forward(g, tokens)
    }

    pub fn tokenize(&self, store: &ParamStore, feat: &FeatureMap, which: Projection) -> Result<TokenSequence> {
        let patches = self.grid.patchify(feat)?;
        let mut g = Graph::new(store);
        let x = g.constant(patches);
        let t = self.tokenize_graph(&mut g, x, which);
        Ok(TokenSequence::new(g.value(t).clone()))
    }

    pub fn add_positional(&self, seq: &TokenSequence) -> Result<TokenSequence> {
        if seq.pos_embedded {
            return Err(AmiError::Contract("positional embedding already applied".into()));
        }
        if seq.tokens.dim() != self.positional.dim() {
            return Err(AmiError::Shape(format!(
                "sequence {:?} does not match positional table {:?}",
                seq.tokens.dim(),
                self.positional.dim()
            )));
        }
        Ok(TokenSequence {
            tokens: &seq.tokens + &self.positional,
            pos_embedded: true,
        })
    }

    pub fn detokenize(&self, store: &ParamStore, seq: &TokenSequence) -> Result<FeatureMap> {
        if seq.tokens.dim() != (self.grid.len(), self.dim) {
            return Err(AmiError::Shape(format!(
                "expected {} tokens of dim {}, got {:?}",
                self.grid.len(),
                self.dim,
                seq.tokens.dim()
            )));
        }
        let mut g = Graph::new(store);
        let x = g.constant(seq.tokens.clone());
        let p = self.detokenize_graph(&mut g, x);
        Ok(FeatureMap::new(self.grid.unpatchify(g.value(p).view())?))
    }
}

pub(crate) fn lookup(store: &ParamStore, name: &str, shape: (usize, usize)) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| AmiError::Config(format!("checkpoint lacks parameter `{name}`")))?;
    if store.get(id).dim() != shape {
        return Err(AmiError::Config(format!(
            "parameter `{name}` has shape {:?}, expected {shape:?}",
            store.get(id).dim()
        )));
    }
    Ok(id)
}
