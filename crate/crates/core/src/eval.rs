//! Training and evaluation over an indexed dataset.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{BackboneSpec, Config};
use crate::dataset::{load_mask, DatasetIndex, Label};
use crate::error::{AmiError, Result};
use crate::features::{extract_multiscale, load_features, load_image, Backbone, FeatureMap, Image, Normalization};
use crate::metrics::{auroc, average_precision};
use crate::model::{load_checkpoint, AmiNet, CheckpointMeta, Losses, ModelConfig, Trainer};
use crate::scoring::{score_image, AnomalyMap};

/// Minimum number of timed scoring runs behind `latency_ms`.
pub const LATENCY_RUNS: usize = 20;

/// Where feature maps come from.
pub enum FeatureSource {
    Backbone {
        backbone: Box<dyn Backbone>,
        image_size: usize,
        norm: Normalization,
    },
    /// `<dir>/<image path relative to root>` with the extension replaced by `.amtf`.
    Precomputed { dir: PathBuf, root: PathBuf },
}

/// Decoded input, ready for scoring.
pub enum SourceInput {
    Image(Image),
    Features(FeatureMap),
}

impl FeatureSource {
    pub fn new(spec: &BackboneSpec, image_size: usize, dataset_root: &Path) -> Result<Self> {
        Ok(match spec {
            BackboneSpec::Precomputed { dir } => FeatureSource::Precomputed {
                dir: dir.clone(),
                root: dataset_root.to_path_buf(),
            },
            toy => FeatureSource::Backbone {
                backbone: toy.build()?.expect("toy backbone"),
                image_size,
                norm: Normalization::IMAGENET,
            },
        })
    }

    pub fn feature_path(dir: &Path, root: &Path, image: &Path) -> Result<PathBuf> {
        let rel = image
            .strip_prefix(root)
            .map_err(|_| AmiError::Data(format!("{} is outside {}", image.display(), root.display())))?;
        Ok(dir.join(rel).with_extension("amtf"))
    }

    pub fn load(&self, image: &Path) -> Result<SourceInput> {
        match self {
            FeatureSource::Backbone { image_size, norm, .. } => {
                Ok(SourceInput::Image(load_image(image, *image_size, norm)?))
            }
            FeatureSource::Precomputed { dir, root } => {
                Ok(SourceInput::Features(load_features(Self::feature_path(dir, root, image)?)?))
            }
        }
    }

    pub fn features(&self, input: &SourceInput) -> Result<FeatureMap> {
        match (self, input) {
            (FeatureSource::Backbone { backbone, .. }, SourceInput::Image(img)) => extract_multiscale(img, backbone.as_ref()),
            (_, SourceInput::Features(f)) => Ok(f.clone()),
            (FeatureSource::Precomputed { .. }, SourceInput::Image(_)) => {
                Err(AmiError::Contract("precomputed source given a raw image".into()))
            }
        }
    }

    pub fn load_features(&self, image: &Path) -> Result<FeatureMap> {
        self.features(&self.load(image)?)
    }
}

/// Feature maps of every training image, extracted in parallel.
pub fn training_features(index: &DatasetIndex, source: &FeatureSource) -> Result<Vec<FeatureMap>> {
    if index.train_normals.is_empty() {
        return Err(AmiError::Data(format!("no training images under {}", index.root.display())));
    }
    index.train_normals.par_iter().map(|p| source.load_features(p)).collect()
}

pub struct TrainOutcome {
    pub model: AmiNet,
    pub meta: CheckpointMeta,
    pub history: Vec<Losses>,
}

/// Builds a fresh model sized to the extracted features and trains it per `cfg`.
pub fn train(
    cfg: &Config,
    index: &DatasetIndex,
    on_step: impl FnMut(usize, &Losses),
) -> Result<TrainOutcome> {
    let source = FeatureSource::new(&cfg.backbone, cfg.image_size, &index.root)?;
    let data = training_features(index, &source)?;
    let (h, w, c) = data[0].dim();
    if let Some(bad) = data.iter().find(|f| f.dim() != (h, w, c)) {
        return Err(AmiError::Data(format!("feature maps disagree: {:?} vs {:?}", bad.dim(), (h, w, c))));
    }
    let model = AmiNet::new(ModelConfig::from_config(cfg, h, w, c), cfg.seed)?;
    let mut trainer = Trainer::from_config(model, cfg);
    let steps = cfg.total_steps(data.len());
    log::info!("{} training maps of {h}x{w}x{c}, {steps} steps", data.len());
    let history = trainer.fit(&data, cfg.batch, steps, on_step)?;
    let meta = CheckpointMeta {
        model: trainer.model.config.clone(),
        image_size: cfg.image_size,
        backbone: cfg.backbone.clone(),
        variant: if cfg.jitter { "jitter" } else { "base" }.into(),
        steps,
    };
    Ok(TrainOutcome {
        model: trainer.model,
        meta,
        history,
    })
}

/// Anything that maps a test image to an anomaly map.
pub trait Scorer: Sync {
    type Input: Send + Sync;

    /// Disk reads and decoding. Not timed.
    fn load(&self, path: &Path) -> Result<Self::Input>;

    fn score(&self, input: &Self::Input) -> Result<AnomalyMap>;

    /// `(height, width)` of the produced `image_res` maps.
    fn resolution(&self) -> (usize, usize);
}

pub struct ModelScorer {
    pub model: AmiNet,
    pub source: FeatureSource,
    pub image_size: usize,
    pub sigma: f64,
}

impl ModelScorer {
    /// Loads a checkpoint, checking its metadata against `cfg` when one is given.
    pub fn from_checkpoint(checkpoint: &Path, cfg: Option<&Config>, dataset_root: &Path) -> Result<Self> {
        let (model, meta) = load_checkpoint(checkpoint)?;
        let sigma = cfg.map_or(crate::scoring::DEFAULT_SIGMA, |c| c.sigma);
        if let Some(cfg) = cfg {
            check_meta(&meta, cfg)?;
        }
        let source = FeatureSource::new(&meta.backbone, meta.image_size, dataset_root)?;
        Ok(Self {
            model,
            source,
            image_size: meta.image_size,
            sigma,
        })
    }
}

/// Fails with a config error when the checkpoint was built with different settings.
pub fn check_meta(meta: &CheckpointMeta, cfg: &Config) -> Result<()> {
    let m = &meta.model;
    let mut diffs = Vec::new();
    let mut cmp = |key: &str, a: String, b: String| {
        if a != b {
            diffs.push(format!("{key}: checkpoint {a}, config {b}"));
        }
    };
    cmp("K", m.patch.to_string(), cfg.patch.to_string());
    cmp("D", m.dim.to_string(), cfg.dim.to_string());
    cmp("P", m.clusters.to_string(), cfg.clusters.to_string());
    cmp("N_i", m.inpaint_depth.to_string(), cfg.inpaint_depth.to_string());
    cmp("N_s", m.sem_depth.to_string(), cfg.sem_depth.to_string());
    cmp("h", m.heads.to_string(), cfg.heads.to_string());
    cmp("lambda", m.lambda.to_string(), cfg.lambda.to_string());
    cmp("image_size", meta.image_size.to_string(), cfg.image_size.to_string());
    cmp("backbone", format!("{:?}", meta.backbone), format!("{:?}", cfg.backbone));
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(AmiError::Config(format!("checkpoint metadata disagrees with config: {}", diffs.join("; "))))
    }
}

impl Scorer for ModelScorer {
    type Input = SourceInput;

    fn load(&self, path: &Path) -> Result<SourceInput> {
        self.source.load(path)
    }

    fn score(&self, input: &SourceInput) -> Result<AnomalyMap> {
        let feat = self.source.features(input)?;
        score_image(&self.model, &feat, self.image_size, self.image_size, self.sigma)
    }

    fn resolution(&self) -> (usize, usize) {
        (self.image_size, self.image_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub image_auroc: f64,
    pub image_ap: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pixel_auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pixel_ap: Option<f64>,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub path: PathBuf,
    pub label: Label,
    pub image_score: f64,
    pub mask_ratio: f64,
    /// Mean unsmoothed score inside and outside the ground-truth mask.
    pub defect_means: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub items: Vec<ItemResult>,
}

fn with_context(level: &str, e: AmiError) -> AmiError {
    match e {
        AmiError::UndefinedMetric(m) => AmiError::UndefinedMetric(format!("{level}: {m}")),
        other => other,
    }
}

struct Scored {
    map: AnomalyMap,
    truth: Option<Array2<bool>>,
}

/// Scores every test item in parallel, then reduces in index order.
pub fn run_eval<S: Scorer>(index: &DatasetIndex, scorer: &S) -> Result<Evaluation> {
    if index.test_items.is_empty() {
        return Err(AmiError::Data(format!("no test images under {}", index.root.display())));
    }
    let (h, w) = scorer.resolution();
    let skipped = index.test_items.iter().filter(|t| t.mask_absent()).count();
    if skipped > 0 {
        log::warn!("{skipped} anomalous items have no mask and are left out of pixel metrics");
    }
    let scored: Vec<Scored> = index
        .test_items
        .par_iter()
        .map(|item| {
            let map = scorer.score(&scorer.load(&item.path)?)?;
            let truth = match (item.label, &item.mask) {
                (Label::Normal, _) => Some(Array2::from_elem((h, w), false)),
                (Label::Anomalous, Some(m)) => Some(load_mask(m, h, w)?),
                (Label::Anomalous, None) => None,
            };
            Ok(Scored { map, truth })
        })
        .collect::<Result<_>>()?;

    let labels: Vec<bool> = index.test_items.iter().map(|t| t.label == Label::Anomalous).collect();
    let image_scores: Vec<f64> = scored.iter().map(|s| s.map.image_score).collect();
    let image_auroc = auroc(&image_scores, &labels).map_err(|e| with_context("image level", e))?;
    let image_ap = average_precision(&image_scores, &labels).map_err(|e| with_context("image level", e))?;

    let (mut pix_scores, mut pix_labels) = (Vec::new(), Vec::new());
    let mut items = Vec::with_capacity(scored.len());
    for (item, s) in index.test_items.iter().zip(&scored) {
        let mut defect_means = None;
        if let Some(truth) = &s.truth {
            if s.map.smoothed.dim() != truth.dim() {
                return Err(AmiError::Shape(format!("score map {:?} vs mask {:?}", s.map.smoothed.dim(), truth.dim())));
            }
            pix_scores.extend(s.map.smoothed.iter().copied());
            pix_labels.extend(truth.iter().copied());
            if item.label == Label::Anomalous {
                defect_means = inside_outside_means(&s.map.image_res, truth);
            }
        }
        items.push(ItemResult {
            path: item.path.clone(),
            label: item.label,
            image_score: s.map.image_score,
            mask_ratio: s.map.mask_ratio,
            defect_means,
        });
    }
    let (pixel_auroc, pixel_ap) = if pix_labels.iter().any(|&l| l) {
        (
            Some(auroc(&pix_scores, &pix_labels).map_err(|e| with_context("pixel level", e))?),
            Some(average_precision(&pix_scores, &pix_labels).map_err(|e| with_context("pixel level", e))?),
        )
    } else {
        (None, None)
    };

    let latency_ms = measure_latency(index, scorer)?;
    Ok(Evaluation {
        report: MetricReport {
            image_auroc,
            image_ap,
            pixel_auroc,
            pixel_ap,
            latency_ms,
        },
        items,
    })
}

fn inside_outside_means(map: &Array2<f64>, truth: &Array2<bool>) -> Option<(f64, f64)> {
    let (mut s_in, mut n_in, mut s_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &t) in map.iter().zip(truth) {
        if t {
            s_in += v;
            n_in += 1;
        } else {
            s_out += v;
            n_out += 1;
        }
    }
    (n_in > 0 && n_out > 0).then(|| (s_in / n_in as f64, s_out / n_out as f64))
}

/// Mean wall time of `score` over at least [`LATENCY_RUNS`] sequential calls on
/// the current thread. Inputs are loaded up front so only scoring is timed.
pub fn measure_latency<S: Scorer>(index: &DatasetIndex, scorer: &S) -> Result<f64> {
    let inputs: Vec<S::Input> = index
        .test_items
        .iter()
        .take(LATENCY_RUNS)
        .map(|t| scorer.load(&t.path))
        .collect::<Result<_>>()?;
    scorer.score(&inputs[0])?;
    let start = Instant::now();
    for k in 0..LATENCY_RUNS {
        std::hint::black_box(scorer.score(&inputs[k % inputs.len()])?);
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / LATENCY_RUNS as f64)
}
