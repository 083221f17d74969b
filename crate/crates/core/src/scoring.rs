//! Test-time scoring: adaptive masking, inpainting and the anomaly map.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{AmiError, Result};
use crate::features::FeatureMap;
use crate::graph::{cosine, Graph};
use crate::mask::{substitute_graph, MaskVector};
use crate::model::AmiNet;
use crate::tensor_file::{NamedTensor, TensorData, TensorFile};
use crate::tokenizer::{PatchGrid, Projection, TokenSequence};

/// Default smoothing of the upsampled map, in pixels.
pub const DEFAULT_SIGMA: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    /// `H_F × W_F` scores.
    pub feature_res: Array2<f64>,
    /// Bilinear upsampling of `feature_res` to `H × W`.
    pub image_res: Array2<f64>,
    /// `image_res` after Gaussian smoothing; pixel metrics use this map.
    pub smoothed: Array2<f64>,
    /// Maximum of `smoothed`.
    pub image_score: f64,
    /// Adaptive mask broadcast to feature cells (`true` = kept).
    pub mask: Option<Array2<bool>>,
    pub mask_ratio: f64,
}

/// `‖p − t‖ · (1 − cos(p, t))` per row.
pub fn location_scores(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Vec<f64> {
    pred.rows()
        .into_iter()
        .zip(target.rows())
        .map(|(p, t)| {
            let (p, t) = (p.to_vec(), t.to_vec());
            let dist = p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            dist * (1.0 - cosine(&p, &t))
        })
        .collect()
}

/// Anomaly map between a reconstruction and its input, at feature resolution.
pub fn anomaly_map(pred: &FeatureMap, target: &FeatureMap) -> Result<Array2<f64>> {
    if pred.dim() != target.dim() {
        return Err(AmiError::Shape(format!("prediction {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    let (h, w, _) = pred.dim();
    let scores = location_scores(pred.locations().view(), target.locations().view());
    Ok(Array2::from_shape_vec((h, w), scores).expect("one score per location"))
}

/// Broadcasts a per-token mask to the `K × K` cells each token covers.
pub fn mask_cells(grid: &PatchGrid, mask: &MaskVector) -> Array2<bool> {
    Array2::from_shape_fn((grid.height, grid.width), |(y, x)| mask.is_visible(grid.locate(y, x).0))
}

/// Output of the feature-level pipeline.
#[derive(Clone, Debug)]
pub struct FeatureScores {
    pub scores: Array2<f64>,
    pub mask: MaskVector,
    pub reconstruction: FeatureMap,
}

/// Adaptive mask → substitution → inpainting → per-location anomaly scores.
pub fn score_features(model: &AmiNet, feat: &FeatureMap) -> Result<FeatureScores> {
    model.check_features(feat)?;
    let grid = model.grid();
    let store = &model.store;
    let tok = &model.tokenizer;

    let cluster_seq = tok.add_positional(&tok.tokenize(store, feat, Projection::Cluster)?)?;
    let (mask, _) = model.amg.generate(store, &cluster_seq)?;

    let patches = grid.patchify(feat)?;
    let mut g = Graph::new(store);
    let x = g.constant(patches.clone());
    let e1 = tok.tokenize_graph(&mut g, x, Projection::Inpaint);
    let masked = substitute_graph(&mut g, e1, &mask);
    let embedded = tok.add_positional_graph(&mut g, masked);
    let restored = model.inpaint.forward_graph(&mut g, embedded)?;
    let recon = tok.detokenize_graph(&mut g, restored);
    let recon = g.value(recon);

    let rows = grid.len() * grid.patch * grid.patch;
    let pred = recon
        .view()
        .into_shape_with_order((rows, grid.channels))
        .map_err(|e| AmiError::Shape(e.to_string()))?;
    let target = patches
        .view()
        .into_shape_with_order((rows, grid.channels))
        .map_err(|e| AmiError::Shape(e.to_string()))?;
    let per_row = location_scores(pred, target);
    let mut scores = Array2::<f64>::zeros((grid.height, grid.width));
    for (r, s) in per_row.into_iter().enumerate() {
        scores[grid.cell_of(r)] = s;
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(AmiError::Numeric {
            stage: "anomaly map".into(),
            block: None,
        });
    }
    Ok(FeatureScores {
        scores,
        mask,
        reconstruction: FeatureMap::new(grid.unpatchify(recon.view())?),
    })
}

/// Full test-time pipeline for one feature map, upsampled to `height × width`.
pub fn score_image(model: &AmiNet, feat: &FeatureMap, height: usize, width: usize, sigma: f64) -> Result<AnomalyMap> {
    let fs = score_features(model, feat)?;
    let mut map = upsample_and_summarize(&fs.scores, height, width, sigma);
    map.mask = Some(mask_cells(&model.grid(), &fs.mask));
    map.mask_ratio = fs.mask.ratio();
    Ok(map)
}

pub fn upsample_and_summarize(map: &Array2<f64>, height: usize, width: usize, sigma: f64) -> AnomalyMap {
    let image_res = bilinear_f64(map, height, width);
    let smoothed = gaussian_blur(&image_res, sigma);
    let image_score = smoothed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    AnomalyMap {
        feature_res: map.clone(),
        image_res,
        smoothed,
        image_score,
        mask: None,
        mask_ratio: 0.0,
    }
}

/// Corner-aligned bilinear resize, matching [`crate::features::resize_bilinear`].
fn bilinear_f64(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let tap = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_in == 1 || n_out == 1 {
            return (0, 0, 0.0);
        }
        let pos = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let i0 = (pos.floor() as usize).min(n_in - 1);
        (i0, (i0 + 1).min(n_in - 1), pos - i0 as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let (y0, y1, fy) = tap(oy, h, out_h);
        let (x0, x1, fx) = tap(ox, w, out_w);
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Separable Gaussian blur truncated at 4σ with edge replication; σ = 0 is the identity.
pub fn gaussian_blur(map: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return map.clone();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = map.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = kernel
                .iter()
                .enumerate()
                .map(|(k, &wt)| wt * map[[y, clamp(x as isize + k as isize - radius, w)]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = kernel
                .iter()
                .enumerate()
                .map(|(k, &wt)| wt * tmp[[clamp(y as isize + k as isize - radius, h), x]])
                .sum();
        }
    }
    out
}

/// Per-image record emitted by inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: String,
    pub image_score: f64,
    pub mask_ratio_realized: f64,
}

pub fn save_score_map(path: impl AsRef<Path>, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut file = TensorFile::new();
    let data: Vec<f32> = map.iter().map(|&v| v as f32).collect();
    file.push(NamedTensor::new("score_map", vec![h, w], TensorData::F32(data))?)?;
    file.save(path)
}

/// Approximate viridis, sampled at nine stops.
const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

fn colormap(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f64;
    let c = |k: usize| (VIRIDIS[i][k] * (1.0 - f) + VIRIDIS[i + 1][k] * f).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// 8-bit heatmap, min-max normalized per image. Visualization only.
pub fn heatmap(map: &Array2<f64>) -> RgbImage {
    let (h, w) = map.dim();
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(w as u32, h as u32, |x, y| colormap((map[[y as usize, x as usize]] - lo) / span))
}

pub fn write_heatmap_png(path: impl AsRef<Path>, map: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    heatmap(map)
        .save(path)
        .map_err(|e| AmiError::Data(format!("{}: {e}", path.display())))
}

/// Convenience for tests and tools: the inpainting path alone, given an explicit mask.
pub fn reconstruct_with_mask(model: &AmiNet, feat: &FeatureMap, mask: &MaskVector) -> Result<FeatureMap> {
    let tok = &model.tokenizer;
    let seq = tok.tokenize(&model.store, feat, Projection::Inpaint)?;
    let seq = crate::mask::substitute(&seq, mask, &crate::mask::MaskToken::zeros(seq.dim()))?;
    let seq = tok.add_positional(&seq)?;
    let out: TokenSequence = model.inpaint.inpaint_forward(&model.store, &seq)?;
    tok.detokenize(&model.store, &out)
}
