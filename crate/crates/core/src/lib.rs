//! Adaptive-mask inpainting for unsupervised visual anomaly detection.
//!
//! Pipeline: multi-scale features → patch tokens → adaptive mask from
//! learnable cluster tokens → transformer inpainting → per-location anomaly map.

pub mod amg;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod graph;
pub mod inpaint;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod scoring;
pub mod synthetic;
pub mod tensor_file;
pub mod tokenizer;
pub mod transformer;

pub use config::{BackboneSpec, Config};
pub use dataset::{DatasetIndex, Label, TestItem};
pub use error::{AmiError, Result};
pub use eval::{run_eval, MetricReport, ModelScorer, Scorer};
pub use features::{extract_multiscale, load_features, save_features, Backbone, FeatureMap, Image, ToyBackbone};
pub use mask::MaskVector;
pub use metrics::{auroc, average_precision};
pub use model::{load_checkpoint, save_checkpoint, AmiNet, CheckpointMeta, Losses, ModelConfig, Trainer};
pub use scoring::{score_image, AnomalyMap, ScoreRecord};
pub use synthetic::{generate_synthetic, DefectKind, SyntheticSpec, Texture};
