//! Flat `key = value` configuration files.
//!
//! ```text
//! # toy run
//! K = 4
//! D = 64
//! P = 8
//! N_i = 4
//! backbone = toy
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AmiError, Result};
use crate::features::{Backbone, ToyBackbone};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BackboneSpec {
    /// Seeded random-convolution pyramid.
    Toy {
        strides: Vec<usize>,
        channels: Vec<usize>,
        seed: u64,
    },
    /// Feature files exported elsewhere, mirrored under `dir`.
    Precomputed { dir: PathBuf },
}

impl BackboneSpec {
    pub fn toy_default() -> Self {
        BackboneSpec::Toy {
            strides: vec![4, 8, 16],
            channels: vec![32, 64, 128],
            seed: 0,
        }
    }

    /// Builds the backbone; `None` for precomputed features.
    pub fn build(&self) -> Result<Option<Box<dyn Backbone>>> {
        match self {
            BackboneSpec::Toy { strides, channels, seed } => {
                Ok(Some(Box::new(ToyBackbone::new(strides, channels, *seed)?)))
            }
            BackboneSpec::Precomputed { .. } => Ok(None),
        }
    }

    pub fn feature_channels(&self) -> Option<usize> {
        match self {
            BackboneSpec::Toy { channels, .. } => Some(channels.iter().sum()),
            BackboneSpec::Precomputed { .. } => None,
        }
    }

    /// Spatial size of the fused feature map for a square input.
    pub fn feature_size(&self, image_size: usize) -> Option<usize> {
        match self {
            BackboneSpec::Toy { strides, .. } => Some(image_size / strides[0]),
            BackboneSpec::Precomputed { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub patch: usize,
    pub dim: usize,
    pub clusters: usize,
    pub inpaint_depth: usize,
    pub sem_depth: usize,
    pub lambda: f64,
    pub heads: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub image_size: usize,
    pub backbone: BackboneSpec,
    pub jitter: bool,
    pub jitter_scale: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            patch: 4,
            dim: 64,
            clusters: 8,
            inpaint_depth: 8,
            sem_depth: 1,
            lambda: 0.5,
            heads: 4,
            lr: 1e-3,
            weight_decay: 0.01,
            batch: 8,
            epochs: 200,
            steps: None,
            image_size: 64,
            backbone: BackboneSpec::toy_default(),
            jitter: false,
            jitter_scale: 0.1,
            sigma: 4.0,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| AmiError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl Config {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let (mut strides, mut channels, mut bb_seed) = (None, None, None);
        let mut backbone = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| AmiError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "K" => cfg.patch = parse(key, value)?,
                "D" => cfg.dim = parse(key, value)?,
                "P" => cfg.clusters = parse(key, value)?,
                "N_i" => cfg.inpaint_depth = parse(key, value)?,
                "N_s" => cfg.sem_depth = parse(key, value)?,
                "lambda" => cfg.lambda = parse(key, value)?,
                "h" => cfg.heads = parse(key, value)?,
                "lr" => cfg.lr = parse(key, value)?,
                "weight_decay" => cfg.weight_decay = parse(key, value)?,
                "batch" => cfg.batch = parse(key, value)?,
                "epochs" => cfg.epochs = parse(key, value)?,
                "steps" => cfg.steps = Some(parse(key, value)?),
                "image_size" => cfg.image_size = parse(key, value)?,
                "jitter" => cfg.jitter = parse(key, value)?,
                "jitter_scale" => cfg.jitter_scale = parse(key, value)?,
                "sigma" => cfg.sigma = parse(key, value)?,
                "seed" => cfg.seed = parse(key, value)?,
                "backbone" => backbone = Some(value.to_owned()),
                "backbone_seed" => bb_seed = Some(parse(key, value)?),
                "strides" => strides = Some(parse_list(key, value)?),
                "channels" => channels = Some(parse_list(key, value)?),
                other => return Err(AmiError::Config(format!("unknown key `{other}`"))),
            }
        }
        cfg.backbone = match backbone.as_deref() {
            None | Some("toy") => {
                let BackboneSpec::Toy {
                    strides: s,
                    channels: c,
                    seed,
                } = BackboneSpec::toy_default()
                else {
                    unreachable!()
                };
                BackboneSpec::Toy {
                    strides: strides.unwrap_or(s),
                    channels: channels.unwrap_or(c),
                    seed: bb_seed.unwrap_or(seed),
                }
            }
            Some(v) => match v.strip_prefix("precomputed:") {
                Some(dir) if !dir.is_empty() => BackboneSpec::Precomputed { dir: dir.into() },
                _ => return Err(AmiError::Config(format!("unknown backbone `{v}`"))),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AmiError::Config(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(AmiError::Config(m.to_owned()));
        if self.patch == 0 || self.dim == 0 || self.clusters == 0 || self.batch == 0 {
            return fail("K, D, P and batch must be positive");
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail("D must be divisible by h");
        }
        if !(self.lambda > 0.0) {
            return fail("lambda must be positive");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.jitter_scale < 0.0 || self.sigma < 0.0 {
            return fail("lr must be positive; weight_decay, jitter_scale and sigma non-negative");
        }
        if let BackboneSpec::Toy { strides, .. } = &self.backbone {
            let max = strides.last().copied().unwrap_or(1);
            if !self.image_size.is_multiple_of(max) {
                return fail("image_size must be divisible by the largest backbone stride");
            }
            if !(self.image_size / strides[0]).is_multiple_of(self.patch) {
                return fail("feature map size must be divisible by K");
            }
        }
        Ok(())
    }

    /// Training steps for a dataset of `n` images.
    pub fn total_steps(&self, n: usize) -> usize {
        self.steps.unwrap_or_else(|| self.epochs * n.div_ceil(self.batch).max(1))
    }
}
