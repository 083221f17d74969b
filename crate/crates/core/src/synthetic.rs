//! Seeded synthetic textures with planted defects, written in the MVTec AD layout.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetIndex;
use crate::error::{AmiError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Stripes,
    Checker,
    ValueNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Blob,
    Scratch,
    PatchSwap,
}

impl DefectKind {
    pub fn name(self) -> &'static str {
        match self {
            DefectKind::Blob => "blob",
            DefectKind::Scratch => "scratch",
            DefectKind::PatchSwap => "patch_swap",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub texture: Texture,
    /// Anomalous items cycle through these kinds in order.
    pub defects: Vec<DefectKind>,
    /// Defect area as a fraction of the image, sampled uniformly in `[lo, hi]`.
    pub area_fraction: (f64, f64),
    pub train_normals: usize,
    pub test_normals: usize,
    pub test_anomalous: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            texture: Texture::Stripes,
            defects: vec![DefectKind::Blob, DefectKind::Scratch],
            area_fraction: (0.015, 0.04),
            train_normals: 40,
            test_normals: 20,
            test_anomalous: 20,
            seed: 0,
        }
    }
}

const SCRATCH_WIDTH: f64 = 3.0;
const MAX_BLOB_ASPECT: f64 = 1.5;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.area_fraction;
        if self.image_size < 8 {
            return Err(AmiError::Spec("image_size must be at least 8".into()));
        }
        if !(lo > 0.0 && lo <= hi) {
            return Err(AmiError::Spec(format!("invalid area fraction range ({lo}, {hi})")));
        }
        if self.test_anomalous > 0 && self.defects.is_empty() {
            return Err(AmiError::Spec("anomalous items requested without defect kinds".into()));
        }
        let n = self.image_size as f64;
        let area = hi * n * n;
        for &kind in &self.defects {
            // Extent of the largest defect of this kind along its longest axis.
            let extent = match kind {
                DefectKind::Blob => 2.0 * (area * MAX_BLOB_ASPECT / std::f64::consts::PI).sqrt(),
                DefectKind::Scratch => area / SCRATCH_WIDTH,
                DefectKind::PatchSwap => area.sqrt(),
            };
            if extent > n - 2.0 {
                return Err(AmiError::Spec(format!(
                    "{} defect of area fraction {hi} does not fit a {}px image",
                    kind.name(),
                    self.image_size
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticItem {
    pub image: RgbImage,
    /// Exact defect footprint; `None` for normal items.
    pub mask: Option<GrayImage>,
    pub defect: Option<DefectKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    pub train: Vec<RgbImage>,
    /// Normal items first, then anomalous ones.
    pub test: Vec<SyntheticItem>,
}

/// Per-image texture parameters; only phases and offsets vary between normals.
struct TextureSample {
    texture: Texture,
    phase: f64,
    offset: (f64, f64),
    lattice: Vec<f64>,
    lattice_n: usize,
    tint: [f64; 3],
}

const PERIOD: f64 = 8.0;
const TINT: [f64; 3] = [0.75, 0.55, 0.4];

impl TextureSample {
    fn draw(texture: Texture, rng: &mut impl Rng) -> Self {
        let lattice_n = 9;
        Self {
            texture,
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            offset: (rng.random_range(0.0..2.0 * PERIOD), rng.random_range(0.0..2.0 * PERIOD)),
            lattice: (0..lattice_n * lattice_n).map(|_| rng.random::<f64>()).collect(),
            lattice_n,
            tint: TINT,
        }
    }

    fn intensity(&self, x: f64, y: f64, size: usize) -> f64 {
        match self.texture {
            Texture::Stripes => 0.5 + 0.35 * (std::f64::consts::TAU * x / PERIOD + self.phase).sin(),
            Texture::Checker => {
                let cx = ((x + self.offset.0) / PERIOD).floor() as i64;
                let cy = ((y + self.offset.1) / PERIOD).floor() as i64;
                if (cx + cy).rem_euclid(2) == 0 {
                    0.25
                } else {
                    0.75
                }
            }
            Texture::ValueNoise => {
                let cell = size as f64 / (self.lattice_n - 1) as f64;
                let (gx, gy) = (x / cell, y / cell);
                let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
                let (x0, y0) = (x0.min(self.lattice_n - 2), y0.min(self.lattice_n - 2));
                let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
                let (tx, ty) = (smooth(gx - x0 as f64), smooth(gy - y0 as f64));
                let at = |i: usize, j: usize| self.lattice[j * self.lattice_n + i];
                let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
                let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
                0.2 + 0.6 * (top * (1.0 - ty) + bottom * ty)
            }
        }
    }

    fn render(&self, size: usize, rng: &mut impl Rng) -> RgbImage {
        RgbImage::from_fn(size as u32, size as u32, |x, y| {
            let v = self.intensity(x as f64 + 0.5, y as f64 + 0.5, size);
            let noise = rng.random_range(-0.03..0.03);
            Rgb(self.tint.map(|t| to_u8((v + noise) * t + 0.1)))
        })
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn empty_mask(size: usize) -> GrayImage {
    GrayImage::new(size as u32, size as u32)
}

/// Filled ellipse with the target pixel area.
fn plant_blob(img: &mut RgbImage, area: f64, rng: &mut impl Rng) -> GrayImage {
    let n = img.width() as f64;
    let aspect = rng.random_range(1.0 / MAX_BLOB_ASPECT..MAX_BLOB_ASPECT);
    let r = (area / std::f64::consts::PI).sqrt();
    let (rx, ry) = (r * aspect.sqrt(), r / aspect.sqrt());
    let cx = rng.random_range(rx + 1.0..n - rx - 1.0);
    let cy = rng.random_range(ry + 1.0..n - ry - 1.0);
    let color = [rng.random_range(0.0..0.25), rng.random_range(0.55..0.9), rng.random_range(0.6..1.0)];
    let mut mask = empty_mask(img.width() as usize);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let dx = (x as f64 + 0.5 - cx) / rx;
        let dy = (y as f64 + 0.5 - cy) / ry;
        if dx * dx + dy * dy <= 1.0 {
            *px = Rgb(color.map(to_u8));
            mask.put_pixel(x, y, Luma([255]));
        }
    }
    mask
}

/// Thick straight segment whose length gives the target area.
fn plant_scratch(img: &mut RgbImage, area: f64, rng: &mut impl Rng) -> GrayImage {
    let n = img.width() as f64;
    let len = area / SCRATCH_WIDTH;
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (dx, dy) = (angle.cos(), angle.sin());
    let (hx, hy) = (dx.abs() * len / 2.0 + 1.0, dy.abs() * len / 2.0 + 1.0);
    let cx = rng.random_range(hx..(n - hx).max(hx + 1e-9));
    let cy = rng.random_range(hy..(n - hy).max(hy + 1e-9));
    let shade = if rng.random_bool(0.5) { 0.02 } else { 0.98 };
    let mut mask = empty_mask(img.width() as usize);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (px_x, px_y) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let along = px_x * dx + px_y * dy;
        let across = -px_x * dy + px_y * dx;
        if along.abs() <= len / 2.0 && across.abs() <= SCRATCH_WIDTH / 2.0 {
            *px = Rgb([to_u8(shade); 3]);
            mask.put_pixel(x, y, Luma([255]));
        }
    }
    mask
}

/// Square region replaced by its own transpose; only pixels that change are marked.
fn plant_patch_swap(img: &mut RgbImage, area: f64, rng: &mut impl Rng) -> GrayImage {
    let n = img.width() as usize;
    let side = (area.sqrt().round() as usize).max(2);
    let x0 = rng.random_range(1..n - side);
    let y0 = rng.random_range(1..n - side);
    let original = img.clone();
    let mut mask = empty_mask(n);
    for dy in 0..side {
        for dx in 0..side {
            let src = *original.get_pixel((x0 + dy) as u32, (y0 + dx) as u32);
            let (x, y) = ((x0 + dx) as u32, (y0 + dy) as u32);
            if src != *original.get_pixel(x, y) {
                img.put_pixel(x, y, src);
                mask.put_pixel(x, y, Luma([255]));
            }
        }
    }
    mask
}

/// Builds the whole set in memory. Each item draws from its own ChaCha stream,
/// so changing one count never perturbs the other items.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticSet> {
    spec.validate()?;
    let size = spec.image_size;
    let item_rng = |stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        rng
    };
    let normal = |stream: u64| {
        let mut rng = item_rng(stream);
        TextureSample::draw(spec.texture, &mut rng).render(size, &mut rng)
    };

    let train = (0..spec.train_normals).map(|i| normal(i as u64)).collect();
    let base = spec.train_normals as u64;
    let mut test: Vec<SyntheticItem> = (0..spec.test_normals)
        .map(|i| SyntheticItem {
            image: normal(base + i as u64),
            mask: None,
            defect: None,
        })
        .collect();
    let base = base + spec.test_normals as u64;
    let total_px = (size * size) as f64;
    for i in 0..spec.test_anomalous {
        let mut rng = item_rng(base + i as u64);
        let mut image = TextureSample::draw(spec.texture, &mut rng).render(size, &mut rng);
        let kind = spec.defects[i % spec.defects.len()];
        let (lo, hi) = spec.area_fraction;
        let area = if hi > lo { rng.random_range(lo..=hi) } else { lo } * total_px;
        let mask = match kind {
            DefectKind::Blob => plant_blob(&mut image, area, &mut rng),
            DefectKind::Scratch => plant_scratch(&mut image, area, &mut rng),
            DefectKind::PatchSwap => plant_patch_swap(&mut image, area, &mut rng),
        };
        test.push(SyntheticItem {
            image,
            mask: Some(mask),
            defect: Some(kind),
        });
    }
    Ok(SyntheticSet { train, test })
}

fn save_png(img: &impl AsPngBuffer, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| AmiError::io(parent, e))?;
    }
    img.save_png(path)
        .map_err(|e| AmiError::Data(format!("{}: {e}", path.display())))
}

trait AsPngBuffer {
    fn save_png(&self, path: &Path) -> image::ImageResult<()>;
}

impl AsPngBuffer for RgbImage {
    fn save_png(&self, path: &Path) -> image::ImageResult<()> {
        self.save_with_format(path, image::ImageFormat::Png)
    }
}

impl AsPngBuffer for GrayImage {
    fn save_png(&self, path: &Path) -> image::ImageResult<()> {
        self.save_with_format(path, image::ImageFormat::Png)
    }
}

/// Writes `set` under `root` and returns the scanned index.
pub fn write_set(set: &SyntheticSet, root: &Path) -> Result<DatasetIndex> {
    for (i, img) in set.train.iter().enumerate() {
        save_png(img, &root.join(format!("train/good/{i:03}.png")))?;
    }
    let mut counters = std::collections::HashMap::new();
    for item in &set.test {
        let ty = item.defect.map_or("good", DefectKind::name);
        let k = counters.entry(ty).or_insert(0usize);
        save_png(&item.image, &root.join(format!("test/{ty}/{k:03}.png")))?;
        if let Some(mask) = &item.mask {
            save_png(mask, &root.join(format!("ground_truth/{ty}/{k:03}_mask.png")))?;
        }
        *k += 1;
    }
    DatasetIndex::scan(root)
}

pub fn generate_synthetic(spec: &SyntheticSpec, root: impl AsRef<Path>) -> Result<DatasetIndex> {
    write_set(&generate(spec)?, root.as_ref())
}
