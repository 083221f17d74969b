//! The full network, its training loop and checkpoints.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amg::{assign, clustering_loss_graph, AdaptiveMaskGenerator};
use crate::config::{BackboneSpec, Config};
use crate::error::{AmiError, Result};
use crate::features::FeatureMap;
use crate::graph::{Graph, ParamStore, Var};
use crate::inpaint::{reconstruction_loss_graph, InpaintNet, LossWeights};
use crate::mask::{sample_random_mask, substitute_graph, MaskVector};
use crate::tensor_file::{NamedTensor, TensorData, TensorFile};
use crate::tokenizer::{PatchGrid, Projection, Tokenizer};

/// Architecture hyper-parameters; written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch: usize,
    pub dim: usize,
    pub clusters: usize,
    pub inpaint_depth: usize,
    pub sem_depth: usize,
    pub lambda: f64,
    pub heads: usize,
    pub feature_height: usize,
    pub feature_width: usize,
    pub feature_channels: usize,
    /// Trained with feature jittering.
    pub jitter: bool,
}

impl ModelConfig {
    pub fn from_config(cfg: &Config, feature_height: usize, feature_width: usize, feature_channels: usize) -> Self {
        Self {
            patch: cfg.patch,
            dim: cfg.dim,
            clusters: cfg.clusters,
            inpaint_depth: cfg.inpaint_depth,
            sem_depth: cfg.sem_depth,
            lambda: cfg.lambda,
            heads: cfg.heads,
            feature_height,
            feature_width,
            feature_channels,
            jitter: cfg.jitter,
        }
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.patch, self.feature_height, self.feature_width, self.feature_channels)
    }
}

#[derive(Clone, Debug)]
pub struct AmiNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
    pub amg: AdaptiveMaskGenerator,
    pub inpaint: InpaintNet,
    pub rec_weights: LossWeights,
}

/// Scalar losses of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub rec: f64,
    pub clu: f64,
    pub total: f64,
}

/// Graph handles of one training forward pass.
pub struct TrainingPass {
    pub rec: Var,
    pub clu: Var,
    pub total: Var,
}

impl AmiNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let grid = config.grid()?;
        if config.heads == 0 || !config.dim.is_multiple_of(config.heads) {
            return Err(AmiError::Config("D must be divisible by h".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tokenizer = Tokenizer::new(&mut store, grid, config.dim, &mut rng);
        let amg = AdaptiveMaskGenerator::new(
            &mut store,
            config.clusters,
            config.dim,
            config.sem_depth,
            config.heads,
            config.lambda,
            &mut rng,
        );
        let inpaint = InpaintNet::new(&mut store, config.inpaint_depth, config.dim, config.heads, &mut rng);
        Ok(Self {
            config,
            store,
            tokenizer,
            amg,
            inpaint,
            rec_weights: LossWeights::default(),
        })
    }

    /// Binds modules to an existing parameter store, checking every shape.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let grid = config.grid().map_err(|e| AmiError::Config(e.to_string()))?;
        let tokenizer = Tokenizer::bind(&store, grid, config.dim)?;
        let amg = AdaptiveMaskGenerator::bind(
            &store,
            config.clusters,
            config.dim,
            config.sem_depth,
            config.heads,
            config.lambda,
        )?;
        let inpaint = InpaintNet::bind(&store, config.inpaint_depth, config.dim, config.heads)?;
        Ok(Self {
            config,
            store,
            tokenizer,
            amg,
            inpaint,
            rec_weights: LossWeights::default(),
        })
    }

    pub fn grid(&self) -> PatchGrid {
        self.tokenizer.grid
    }

    pub fn check_features(&self, feat: &FeatureMap) -> Result<()> {
        let g = self.grid();
        if feat.dim() != (g.height, g.width, g.channels) {
            return Err(AmiError::Config(format!(
                "features {:?} incompatible with checkpoint grid {}x{}x{}",
                feat.dim(),
                g.height,
                g.width,
                g.channels
            )));
        }
        Ok(())
    }

    /// Builds the training forward pass for one image.
    ///
    /// `jitter` is additive noise on the inpainting tokens, applied before masking.
    pub fn training_pass(
        &self,
        g: &mut Graph,
        patches: Array2<f64>,
        mask: &MaskVector,
        jitter: Option<Array2<f64>>,
    ) -> Result<TrainingPass> {
        let grid = self.grid();
        if mask.len() != grid.len() {
            return Err(AmiError::Shape(format!("mask length {} vs {} tokens", mask.len(), grid.len())));
        }
        let locations = (grid.len() * grid.patch * grid.patch, grid.channels);
        let target = g.constant(
            patches
                .clone()
                .into_shape_with_order(locations)
                .map_err(|e| AmiError::Shape(e.to_string()))?,
        );
        let x = g.constant(patches);

        // Inpainting branch.
        let mut e1 = self.tokenizer.tokenize_graph(g, x, Projection::Inpaint);
        if let Some(noise) = jitter {
            let n = g.constant(noise);
            e1 = g.add(e1, n);
        }
        let masked = substitute_graph(g, e1, mask);
        let embedded = self.tokenizer.add_positional_graph(g, masked);
        let restored = self.inpaint.forward_graph(g, embedded)?;
        let recon = self.tokenizer.detokenize_graph(g, restored);
        let recon = g.reshape(recon, locations.0, locations.1);
        let rec = reconstruction_loss_graph(g, recon, target, self.rec_weights);

        // Clustering branch.
        let e2 = self.tokenizer.tokenize_graph(g, x, Projection::Cluster);
        let e2 = self.tokenizer.add_positional_graph(g, e2);
        let clusters = self.amg.aggregate_graph(g, e2);
        let assignment = assign(g.value(clusters).view(), g.value(e2).view());
        let clu = clustering_loss_graph(g, clusters, e2, &assignment, self.amg.weights);

        let total = g.add(rec, clu);
        Ok(TrainingPass { rec, clu, total })
    }

    /// Losses and parameter gradients for one image with a fixed mask.
    pub fn sample_gradients(
        &self,
        feat: &FeatureMap,
        mask: &MaskVector,
        jitter: Option<Array2<f64>>,
    ) -> Result<(Losses, Vec<Option<Array2<f64>>>)> {
        self.check_features(feat)?;
        let patches = self.grid().patchify(feat)?;
        let mut g = Graph::new(&self.store);
        let pass = self.training_pass(&mut g, patches, mask, jitter)?;
        let losses = Losses {
            rec: g.scalar(pass.rec),
            clu: g.scalar(pass.clu),
            total: g.scalar(pass.total),
        };
        if !losses.total.is_finite() {
            return Err(AmiError::Numeric {
                stage: format!("training loss (rec {}, clu {})", losses.rec, losses.clu),
                block: None,
            });
        }
        Ok((losses, g.backward(pass.total).into_params()))
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut file = TensorFile::new();
        for (name, value) in self.store.iter() {
            let (r, c) = value.dim();
            let data: Vec<f64> = value.iter().cloned().collect();
            file.push(NamedTensor::new(name, vec![r, c], TensorData::F64(data))?)?;
        }
        Ok(file)
    }

    pub fn from_tensor_file(config: ModelConfig, file: &TensorFile) -> Result<Self> {
        let mut store = ParamStore::new();
        for t in file.tensors() {
            let TensorData::F64(v) = &t.data else {
                return Err(AmiError::format(format!("{}.dtype", t.name), "checkpoint tensors are f64"));
            };
            let &[r, c] = t.dims.as_slice() else {
                return Err(AmiError::format(format!("{}.dims", t.name), "checkpoint tensors are rank 2"));
            };
            store.add(&t.name, Array2::from_shape_vec((r, c), v.clone()).expect("validated by container"));
        }
        Self::from_store(config, store)
    }
}

/// Sidecar record stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub image_size: usize,
    pub backbone: BackboneSpec,
    pub variant: String,
    pub steps: usize,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &AmiNet, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    model.to_tensor_file()?.save(path)?;
    let json = serde_json::to_string_pretty(meta).expect("serializable metadata");
    let mp = meta_path(path);
    std::fs::write(&mp, json).map_err(|e| AmiError::io(mp, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(AmiNet, CheckpointMeta)> {
    let path = path.as_ref();
    let mp = meta_path(path);
    let text = std::fs::read_to_string(&mp)
        .map_err(|e| AmiError::Config(format!("missing checkpoint metadata {}: {e}", mp.display())))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| AmiError::Config(format!("bad checkpoint metadata: {e}")))?;
    let file = TensorFile::load(path)?;
    let model = AmiNet::from_tensor_file(meta.model.clone(), &file)?;
    Ok((model, meta))
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = |s: &ParamStore| s.iter().map(|(_, v)| Array2::zeros(v.dim())).collect::<Vec<_>>();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Array2<f64>>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = &grads[id.index()] else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *p -= self.lr * self.weight_decay * *p;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            });
        }
    }
}

/// Owns the model during training.
pub struct Trainer {
    pub model: AmiNet,
    optimizer: AdamW,
    mask_rng: ChaCha8Rng,
    jitter_rng: ChaCha8Rng,
    jitter_scale: f64,
    steps: usize,
}

impl Trainer {
    /// `jitter_scale` is relative to the RMS of the inpainting tokens; zero disables jittering.
    pub fn new(model: AmiNet, lr: f64, weight_decay: f64, jitter_scale: f64, seed: u64) -> Self {
        let optimizer = AdamW::new(&model.store, lr, weight_decay);
        Self {
            model,
            optimizer,
            mask_rng: ChaCha8Rng::seed_from_u64(seed),
            jitter_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908),
            jitter_scale,
            steps: 0,
        }
    }

    pub fn from_config(model: AmiNet, cfg: &Config) -> Self {
        let jitter = if cfg.jitter { cfg.jitter_scale } else { 0.0 };
        Self::new(model, cfg.lr, cfg.weight_decay, jitter, cfg.seed)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One optimizer step on the mean loss of `batch`, with a fresh random mask per image.
    /// Parameters are left untouched when any loss is non-finite.
    pub fn train_step(&mut self, batch: &[FeatureMap]) -> Result<Losses> {
        if batch.is_empty() {
            return Err(AmiError::Input("empty training batch".into()));
        }
        let grid = self.model.grid();
        let masks: Vec<MaskVector> = batch
            .iter()
            .map(|_| sample_random_mask(grid.len(), &mut self.mask_rng))
            .collect();
        let noise: Vec<Option<Array2<f64>>> = batch
            .iter()
            .map(|feat| {
                (self.jitter_scale > 0.0).then(|| {
                    let seq = self.model.tokenizer.tokenize(&self.model.store, feat, Projection::Inpaint);
                    let rms = seq
                        .map(|s| (s.tokens.mapv(|v| v * v).mean().unwrap_or(0.0)).sqrt())
                        .unwrap_or(0.0);
                    let scale = self.jitter_scale * rms;
                    Array2::from_shape_fn((grid.len(), self.model.config.dim), |_| {
                        let z: f64 = StandardNormal.sample(&mut self.jitter_rng);
                        z * scale
                    })
                })
            })
            .collect();

        let model = &self.model;
        let results: Vec<Result<(Losses, Vec<Option<Array2<f64>>>)>> = batch
            .par_iter()
            .zip(masks.par_iter())
            .zip(noise.into_par_iter())
            .map(|((feat, mask), noise)| model.sample_gradients(feat, mask, noise))
            .collect();

        let n = batch.len() as f64;
        let mut losses = Losses::default();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; model.store.len()];
        for r in results {
            let (l, g) = r?;
            losses.rec += l.rec / n;
            losses.clu += l.clu / n;
            losses.total += l.total / n;
            for (acc, g) in grads.iter_mut().zip(g) {
                if let Some(g) = g {
                    match acc {
                        Some(a) => *a += &(g / n),
                        None => *acc = Some(g / n),
                    }
                }
            }
        }
        if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(AmiError::Numeric {
                stage: "gradients".into(),
                block: None,
            });
        }
        self.optimizer.step(&mut self.model.store, &grads);
        self.steps += 1;
        Ok(losses)
    }

    /// Runs `steps` optimizer steps cycling through `data` in seeded shuffled batches.
    pub fn fit(
        &mut self,
        data: &[FeatureMap],
        batch: usize,
        steps: usize,
        mut on_step: impl FnMut(usize, &Losses),
    ) -> Result<Vec<Losses>> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = order.len();
        let mut history = Vec::with_capacity(steps);
        for step in 0..steps {
            let mut idx = Vec::with_capacity(batch);
            while idx.len() < batch.min(data.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut self.mask_rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let chunk: Vec<FeatureMap> = idx.iter().map(|&i| data[i].clone()).collect();
            let l = self.train_step(&chunk)?;
            on_step(step, &l);
            history.push(l);
        }
        Ok(history)
    }
}
