//! MVTec AD style directory layout.
//!
//! ```text
//! <root>/train/good/*.png
//! <root>/test/<defect_type>/*.png
//! <root>/ground_truth/<defect_type>/*_mask.png
//! ```

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{AmiError, Result};

pub const NORMAL_TYPE: &str = "good";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestItem {
    pub path: PathBuf,
    pub label: Label,
    pub defect_type: String,
    /// `None` for normals, and for anomalous items whose mask file is absent.
    pub mask: Option<PathBuf>,
}

impl TestItem {
    pub fn mask_absent(&self) -> bool {
        self.label == Label::Anomalous && self.mask.is_none()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub train_normals: Vec<PathBuf>,
    pub test_items: Vec<TestItem>,
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| AmiError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| AmiError::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| AmiError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| AmiError::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

impl DatasetIndex {
    /// Indexes a category directory. Test types are visited in name order.
    pub fn scan(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let train_dir = root.join("train").join(NORMAL_TYPE);
        if !train_dir.is_dir() {
            return Err(AmiError::Data(format!("missing {}", train_dir.display())));
        }
        let train_normals = sorted_pngs(&train_dir)?;
        let mut test_items = Vec::new();
        let test_dir = root.join("test");
        if test_dir.is_dir() {
            for dir in sorted_subdirs(&test_dir)? {
                let defect_type = dir.file_name().unwrap().to_string_lossy().into_owned();
                let label = if defect_type == NORMAL_TYPE {
                    Label::Normal
                } else {
                    Label::Anomalous
                };
                for path in sorted_pngs(&dir)? {
                    let mask = (label == Label::Anomalous)
                        .then(|| {
                            let stem = path.file_stem().unwrap().to_string_lossy();
                            root.join("ground_truth")
                                .join(&defect_type)
                                .join(format!("{stem}_mask.png"))
                        })
                        .filter(|m| m.is_file());
                    test_items.push(TestItem {
                        path,
                        label,
                        defect_type: defect_type.clone(),
                        mask,
                    });
                }
            }
        }
        let index = Self {
            root,
            train_normals,
            test_items,
        };
        index.validate()?;
        Ok(index)
    }

    pub fn validate(&self) -> Result<()> {
        let train_dir = self.root.join("train").join(NORMAL_TYPE);
        for p in &self.train_normals {
            if !p.starts_with(&train_dir) {
                return Err(AmiError::Data(format!("training image {} outside train/good", p.display())));
            }
        }
        for item in &self.test_items {
            if item.label == Label::Normal && item.mask.is_some() {
                return Err(AmiError::Data(format!("normal item {} carries a mask", item.path.display())));
            }
        }
        Ok(())
    }

    pub fn num_anomalous(&self) -> usize {
        self.test_items.iter().filter(|t| t.label == Label::Anomalous).count()
    }

    /// True when at least one anomalous item has a ground-truth mask.
    pub fn has_masks(&self) -> bool {
        self.test_items.iter().any(|t| t.mask.is_some())
    }
}

/// Reads a ground-truth mask (nonzero = anomalous) at `height × width`,
/// nearest-neighbour resized so labels stay binary.
pub fn load_mask(path: impl AsRef<Path>, height: usize, width: usize) -> Result<Array2<bool>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| AmiError::Data(format!("{}: {e}", path.display())))?
        .to_luma8();
    let img = if (img.height() as usize, img.width() as usize) == (height, width) {
        img
    } else {
        image::imageops::resize(&img, width as u32, height as u32, FilterType::Nearest)
    };
    Ok(Array2::from_shape_fn((height, width), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] != 0
    }))
}
