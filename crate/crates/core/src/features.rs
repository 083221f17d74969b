//! Image preprocessing and multi-scale feature extraction.
//!
//! A [`Backbone`] maps an [`Image`] to a pyramid of stage maps. The stages are
//! resized to the resolution of the finest stage and concatenated along the
//! channel axis to form a [`FeatureMap`]. Features computed elsewhere can be
//! ingested through the named-tensor container with [`load_features`].

use std::path::Path;

use image::{imageops::FilterType, DynamicImage};
use ndarray::{concatenate, s, Array2, Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AmiError, Result};
use crate::tensor_file::{NamedTensor, TensorData, TensorFile};

/// Channel-wise normalization constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
}

impl Default for Normalization {
    fn default() -> Self {
        Self::IMAGENET
    }
}

/// A normalized `H × W × 3` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub pixels: Array3<f32>,
}

impl Image {
    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

/// Resizes `raw` to `size × size` and normalizes each channel.
pub fn preprocess(raw: &DynamicImage, size: usize, norm: &Normalization) -> Result<Image> {
    let channels = raw.color().channel_count();
    if channels != 3 {
        return Err(AmiError::Shape(format!("expected an RGB image, got {channels} channels")));
    }
    let mut rgb = raw.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let pixels = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let v = rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0;
        (v - norm.mean[c]) / norm.std[c]
    });
    Ok(Image { pixels })
}

pub fn preprocess_bytes(bytes: &[u8], size: usize, norm: &Normalization) -> Result<Image> {
    let raw = image::load_from_memory(bytes).map_err(|e| AmiError::Input(format!("undecodable image: {e}")))?;
    preprocess(&raw, size, norm)
}

pub fn load_image(path: impl AsRef<Path>, size: usize, norm: &Normalization) -> Result<Image> {
    let path = path.as_ref();
    let raw = image::open(path).map_err(|e| AmiError::Input(format!("{}: {e}", path.display())))?;
    preprocess(&raw, size, norm)
}

/// Bilinear resize of an `H × W × C` array with corner-aligned sampling.
pub fn resize_bilinear(src: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = src.dim();
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|o| {
                if n_in == 1 || n_out == 1 {
                    return (0, 0, 0.0);
                }
                let pos = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
                let i0 = (pos.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (pos - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = src[[y0, x0, ch]] * (1.0 - fx) + src[[y0, x1, ch]] * fx;
                let bottom = src[[y1, x0, ch]] * (1.0 - fx) + src[[y1, x1, ch]] * fx;
                out[[oy, ox, ch]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Stage maps produced by a backbone, finest first.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub stages: Vec<Array3<f32>>,
    pub strides: Vec<usize>,
}

/// A frozen multi-scale feature extractor.
pub trait Backbone: Send + Sync {
    fn id(&self) -> String;
    fn strides(&self) -> &[usize];
    fn channels(&self) -> &[usize];
    fn forward(&self, image: &Image) -> Result<BackboneOutput>;

    /// Channel count of the fused feature map.
    fn feature_channels(&self) -> usize {
        self.channels().iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `H_F × W_F × C_F`
    pub data: Array3<f32>,
    pub source: String,
    pub backbone: String,
}

impl FeatureMap {
    pub fn new(data: Array3<f32>) -> Self {
        Self {
            data,
            source: String::new(),
            backbone: String::new(),
        }
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Channel vectors as an `(H_F·W_F) × C_F` matrix in row-major spatial order.
    pub fn locations(&self) -> Array2<f64> {
        let (h, w, c) = self.dim();
        let flat: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        Array2::from_shape_vec((h * w, c), flat).expect("contiguous feature map")
    }
}

/// Fuses the backbone's stages into one feature map at the finest stage resolution.
pub fn extract_multiscale(image: &Image, backbone: &dyn Backbone) -> Result<FeatureMap> {
    let out = backbone.forward(image)?;
    if out.stages.len() < 3 {
        return Err(AmiError::Backbone(format!("need at least 3 stages, got {}", out.stages.len())));
    }
    if out.strides.len() != out.stages.len() {
        return Err(AmiError::Backbone("one stride per stage required".into()));
    }
    let (h, w) = (image.height(), image.width());
    for (i, (stage, &stride)) in out.stages.iter().zip(&out.strides).enumerate() {
        let (sh, sw, _) = stage.dim();
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(AmiError::Backbone(format!(
                "image {h}x{w} not divisible by stage {i} stride {stride}"
            )));
        }
        if (sh, sw) != (h / stride, w / stride) {
            return Err(AmiError::Backbone(format!(
                "stage {i} is {sh}x{sw}, stride {stride} implies {}x{}",
                h / stride,
                w / stride
            )));
        }
    }
    let (th, tw, _) = out.stages[0].dim();
    let resized: Vec<Array3<f32>> = out
        .stages
        .iter()
        .map(|st| {
            if st.dim().0 == th && st.dim().1 == tw {
                st.clone()
            } else {
                resize_bilinear(st.view(), th, tw)
            }
        })
        .collect();
    let views: Vec<_> = resized.iter().map(|a| a.view()).collect();
    let data = concatenate(Axis(2), &views).map_err(|e| AmiError::Backbone(e.to_string()))?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(AmiError::Numeric {
            stage: "feature extraction".into(),
            block: None,
        });
    }
    Ok(FeatureMap {
        data,
        source: String::new(),
        backbone: backbone.id(),
    })
}

const FEATURE_TENSOR: &str = "features";

pub fn save_features(path: impl AsRef<Path>, feat: &FeatureMap) -> Result<()> {
    let (h, w, c) = feat.dim();
    let mut file = TensorFile::new();
    let flat: Vec<f32> = feat.data.iter().cloned().collect();
    file.push(NamedTensor::new(FEATURE_TENSOR, vec![h, w, c], TensorData::F32(flat))?)?;
    file.save(path)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let file = TensorFile::load(path)?;
    let t = file.require(FEATURE_TENSOR)?;
    let &[h, w, c] = t.dims.as_slice() else {
        return Err(AmiError::format(
            "features.dims",
            format!("expected rank 3, got rank {}", t.dims.len()),
        ));
    };
    let TensorData::F32(values) = &t.data else {
        return Err(AmiError::format("features.dtype", "expected f32"));
    };
    let data = Array3::from_shape_vec((h, w, c), values.clone())
        .map_err(|e| AmiError::format("features.dims", e.to_string()))?;
    Ok(FeatureMap {
        data,
        source: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        backbone: "precomputed".into(),
    })
}

struct ConvStage {
    /// `(k·k·C_in) × C_out`, rows ordered (ky, kx, c_in)
    weight: Array2<f32>,
    bias: Vec<f32>,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvStage {
    fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let (h, w, cin) = x.dim();
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut cols = Array2::<f32>::zeros((oh * ow, k * k * cin));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut row = cols.row_mut(oy * ow + ox);
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let base = (ky * k + kx) * cin;
                        row.slice_mut(s![base..base + cin])
                            .assign(&x.slice(s![iy as usize, ix as usize, ..]));
                    }
                }
            }
        }
        let mut out = cols.dot(&self.weight);
        for mut r in out.rows_mut() {
            for (v, b) in r.iter_mut().zip(&self.bias) {
                *v = (*v + b).max(0.0);
            }
        }
        out.into_shape_with_order((oh, ow, self.bias.len())).expect("conv output shape")
    }
}

/// Strided random-convolution pyramid with fixed seeded weights.
///
/// Stage `i` downsamples the previous stage by `strides[i] / strides[i-1]`
/// using a kernel twice the step, so every stage exactly matches its stride.
pub struct ToyBackbone {
    strides: Vec<usize>,
    channels: Vec<usize>,
    seed: u64,
    stages: Vec<ConvStage>,
}

impl ToyBackbone {
    pub fn new(strides: &[usize], channels: &[usize], seed: u64) -> Result<Self> {
        if strides.len() != channels.len() || strides.len() < 3 {
            return Err(AmiError::Config("toy backbone needs matching strides/channels, at least 3".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let (mut prev_stride, mut cin) = (1usize, 3usize);
        for (&stride, &cout) in strides.iter().zip(channels) {
            if stride <= prev_stride || stride % prev_stride != 0 {
                return Err(AmiError::Config(format!("stride {stride} must be a multiple of {prev_stride}")));
            }
            let step = stride / prev_stride;
            if step % 2 != 0 {
                return Err(AmiError::Config(format!("stage step {step} must be even")));
            }
            let kernel = 2 * step;
            let fan_in = kernel * kernel * cin;
            let bound = (6.0 / fan_in as f32).sqrt();
            let weight = Array2::from_shape_fn((fan_in, cout), |_| rng.random_range(-bound..bound));
            let bias = (0..cout).map(|_| rng.random_range(-0.1..0.1)).collect();
            stages.push(ConvStage {
                weight,
                bias,
                kernel,
                stride: step,
                pad: step / 2,
            });
            prev_stride = stride;
            cin = cout;
        }
        Ok(Self {
            strides: strides.to_vec(),
            channels: channels.to_vec(),
            seed,
            stages,
        })
    }

    /// Strides {4, 8, 16}, channels {32, 64, 128}.
    pub fn small(seed: u64) -> Self {
        Self::new(&[4, 8, 16], &[32, 64, 128], seed).expect("valid toy configuration")
    }
}

impl Backbone for ToyBackbone {
    fn id(&self) -> String {
        format!("toy{:?}{:?}#{}", self.strides, self.channels, self.seed)
    }

    fn strides(&self) -> &[usize] {
        &self.strides
    }

    fn channels(&self) -> &[usize] {
        &self.channels
    }

    fn forward(&self, image: &Image) -> Result<BackboneOutput> {
        let max = *self.strides.last().unwrap();
        if !image.height().is_multiple_of(max) || !image.width().is_multiple_of(max) {
            return Err(AmiError::Shape(format!(
                "image {}x{} not divisible by stride {max}",
                image.height(),
                image.width()
            )));
        }
        let mut x = image.pixels.clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            x = st.forward(&x);
            stages.push(x.clone());
        }
        Ok(BackboneOutput {
            stages,
            strides: self.strides.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage, RgbaImage};
    use rand::Rng;

    /// Returns zero-filled stages of declared shapes, optionally lying about one.
    struct Stub {
        strides: Vec<usize>,
        channels: Vec<usize>,
        bad_stage: Option<usize>,
        fill: f32,
    }

    impl Backbone for Stub {
        fn id(&self) -> String {
            "stub".into()
        }
        fn strides(&self) -> &[usize] {
            &self.strides
        }
        fn channels(&self) -> &[usize] {
            &self.channels
        }
        fn forward(&self, image: &Image) -> Result<BackboneOutput> {
            let stages = self
                .strides
                .iter()
                .zip(&self.channels)
                .enumerate()
                .map(|(i, (&s, &c))| {
                    let extra = usize::from(self.bad_stage == Some(i));
                    Array3::from_elem((image.height() / s + extra, image.width() / s, c), self.fill + i as f32)
                })
                .collect();
            Ok(BackboneOutput {
                stages,
                strides: self.strides.clone(),
            })
        }
    }

    fn blank(size: usize) -> Image {
        Image {
            pixels: Array3::zeros((size, size, 3)),
        }
    }

    #[test]
    fn preprocess_resizes_to_target() {
        let raw = DynamicImage::ImageRgb8(RgbImage::new(512, 512));
        let img = preprocess(&raw, 256, &Normalization::IMAGENET).unwrap();
        assert_eq!(img.pixels.dim(), (256, 256, 3));
    }

    #[test]
    fn preprocess_normalizes_channels() {
        // Mean pixel maps to zero: use a normalization centred on the pixel value.
        let raw = DynamicImage::ImageRgb8(RgbImage::from_pixel(4, 4, Rgb([51, 102, 204])));
        let norm = Normalization {
            mean: [0.2, 0.4, 0.8],
            std: [0.5, 0.5, 0.5],
        };
        let img = preprocess(&raw, 4, &norm).unwrap();
        assert!(img.pixels.iter().all(|v| v.abs() < 1e-6));

        let raw = DynamicImage::ImageRgb8(RgbImage::from_pixel(2, 2, Rgb([255, 255, 255])));
        let img = preprocess(&raw, 2, &Normalization::IMAGENET).unwrap();
        assert!((img.pixels[[0, 0, 0]] - 2.2489).abs() < 1e-4);
    }

    #[test]
    fn preprocess_rejects_non_rgb() {
        let raw = DynamicImage::ImageRgba8(RgbaImage::new(4, 4));
        assert!(matches!(preprocess(&raw, 4, &Normalization::IMAGENET), Err(AmiError::Shape(_))));
        assert!(matches!(
            preprocess_bytes(b"not an image", 4, &Normalization::IMAGENET),
            Err(AmiError::Input(_))
        ));
    }

    #[test]
    fn full_scale_shapes_sum_stage_channels() {
        let stub = Stub {
            strides: vec![8, 16, 32],
            channels: vec![512, 1024, 2048],
            bad_stage: None,
            fill: 0.0,
        };
        let f = extract_multiscale(&blank(256), &stub).unwrap();
        assert_eq!(f.dim(), (32, 32, 3584));
    }

    #[test]
    fn toy_backbone_shapes() {
        let bb = ToyBackbone::small(7);
        let f = extract_multiscale(&blank(64), &bb).unwrap();
        assert_eq!(f.dim(), (16, 16, 224));
        assert_eq!(bb.feature_channels(), 224);
    }

    #[test]
    fn constant_stages_stay_constant_per_block() {
        let stub = Stub {
            strides: vec![4, 8, 16],
            channels: vec![2, 3, 4],
            bad_stage: None,
            fill: 1.5,
        };
        let f = extract_multiscale(&blank(64), &stub).unwrap();
        for ((_, _, c), &v) in f.data.indexed_iter() {
            let expected = 1.5 + if c < 2 { 0.0 } else if c < 5 { 1.0 } else { 2.0 };
            assert_eq!(v, expected);
        }
    }

    #[test]
    fn inconsistent_stage_is_a_contract_error() {
        let stub = Stub {
            strides: vec![4, 8, 16],
            channels: vec![2, 3, 4],
            bad_stage: Some(1),
            fill: 0.0,
        };
        assert!(matches!(extract_multiscale(&blank(64), &stub), Err(AmiError::Backbone(_))));
    }

    #[test]
    fn bilinear_resize_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array3::from_shape_fn((4, 5, 3), |_| rng.random_range(-1.0f32..1.0));
        let y = Array3::from_shape_fn((4, 5, 3), |_| rng.random_range(-1.0f32..1.0));
        let (a, b) = (0.7f32, -1.3f32);
        let lhs = resize_bilinear((&x * a + &y * b).view(), 13, 9);
        let rhs = resize_bilinear(x.view(), 13, 9) * a + resize_bilinear(y.view(), 13, 9) * b;
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            assert!((l - r).abs() <= 1e-5 * l.abs().max(r.abs()).max(1.0));
        }
        // Corner alignment preserves the corners exactly.
        let z = resize_bilinear(x.view(), 13, 9);
        assert_eq!(z[[0, 0, 1]], x[[0, 0, 1]]);
        assert_eq!(z[[12, 8, 2]], x[[3, 4, 2]]);
    }

    #[test]
    fn toy_backbone_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Image {
            pixels: Array3::from_shape_fn((32, 32, 3), |_| rng.random_range(-2.0f32..2.0)),
        };
        let a = extract_multiscale(&img, &ToyBackbone::small(3)).unwrap();
        let b = extract_multiscale(&img, &ToyBackbone::small(3)).unwrap();
        let c = extract_multiscale(&img, &ToyBackbone::small(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn feature_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fm = FeatureMap::new(Array3::from_shape_fn((4, 4, 7), |_| rng.random::<f32>()));
        let path = dir.path().join("x.amtf");
        save_features(&path, &fm).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(back.data, fm.data);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_features(&path), Err(AmiError::Format { .. })));

        let mut f = TensorFile::new();
        f.push(NamedTensor::new("other", vec![1], TensorData::F32(vec![0.0])).unwrap()).unwrap();
        f.save(&path).unwrap();
        let err = load_features(&path).unwrap_err();
        assert!(matches!(err, AmiError::Format { ref field, .. } if field == "features"));
    }
}
