// SPDX-License-Identifier: MIT OR Apache-2.0

//! Heatmap export: a max-normalized 8-bit grayscale PNG plus a JSON sidecar
//! holding the raw float grid.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixels per heatmap cell in the exported PNG.
const CELL_PIXELS: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub prompt: String,
    pub patch_grid: (usize, usize),
    pub values: Vec<Vec<f64>>,
}

impl HeatmapSidecar {
    pub fn new(prompt: &str, heatmap: &Array2<f64>) -> Self {
        HeatmapSidecar {
            prompt: prompt.to_string(),
            patch_grid: heatmap.dim(),
            values: heatmap.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        let (rows, cols) = self.patch_grid;
        if self.values.len() != rows || self.values.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("sidecar values do not match patch_grid"));
        }
        let flat: Vec<f64> = self.values.iter().flatten().copied().collect();
        Ok(Array2::from_shape_vec((rows, cols), flat).expect("checked shape"))
    }
}

/// Grayscale rendering, each cell scaled to `[0, 255]` by the grid maximum.
pub fn heatmap_image(heatmap: &Array2<f64>) -> GrayImage {
    let (rows, cols) = heatmap.dim();
    let max = heatmap.iter().cloned().fold(0.0f64, f64::max);
    let mut img = GrayImage::new(cols as u32 * CELL_PIXELS, rows as u32 * CELL_PIXELS);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = heatmap[[(y / CELL_PIXELS) as usize, (x / CELL_PIXELS) as usize]];
        let level = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
        *px = Luma([(level * 255.0).round() as u8]);
    }
    img
}

/// Writes `<stem>.png` and `<stem>.json`; returns both paths.
pub fn export_heatmap(stem: &Path, heatmap: &Array2<f64>, prompt: &str) -> Result<(PathBuf, PathBuf)> {
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let png = stem.with_extension("png");
    let json = stem.with_extension("json");
    heatmap_image(heatmap).save(&png)?;
    let sidecar = HeatmapSidecar::new(prompt, heatmap);
    let text = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok((png, json))
}

pub fn read_sidecar(path: &Path) -> Result<HeatmapSidecar> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
