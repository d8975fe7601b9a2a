// SPDX-License-Identifier: MIT OR Apache-2.0

//! Normalized bounding boxes, their patch-grid rasterization, layout files
//! and COCO instance ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box in image-fraction coordinates, `0 <= x0 < x1 <= 1` and likewise for y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let ok = |a: f64, b: f64| (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a < b;
        if !(ok(x0, x1) && ok(y0, y1)) {
            return Err(Error::invalid(format!(
                "box ({x0}, {y0}, {x1}, {y1}) is not a nonempty sub-rectangle of the unit square"
            )));
        }
        Ok(BoundingBox { x0, y0, x1, y1 })
    }

    pub fn full() -> Self {
        BoundingBox {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn area_ratio(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let iw = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let ih = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = iw * ih;
        let union = self.area_ratio() + other.area_ratio() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Fraction of each grid cell covered by the box.
    pub fn rasterize(&self, grid: (usize, usize)) -> Array2<f64> {
        let (rows, cols) = grid;
        let overlap = |lo: f64, hi: f64, i: usize, n: usize| {
            let (a, b) = (i as f64 / n as f64, (i + 1) as f64 / n as f64);
            ((hi.min(b) - lo.max(a)).max(0.0)) * n as f64
        };
        Array2::from_shape_fn(grid, |(r, c)| {
            overlap(self.y0, self.y1, r, rows) * overlap(self.x0, self.x1, c, cols)
        })
    }

    /// Cells whose center lies inside the box.
    pub fn rasterize_binary(&self, grid: (usize, usize)) -> Array2<bool> {
        let (rows, cols) = grid;
        Array2::from_shape_fn(grid, |(r, c)| {
            let cy = (r as f64 + 0.5) / rows as f64;
            let cx = (c as f64 + 0.5) / cols as f64;
            cx >= self.x0 && cx < self.x1 && cy >= self.y0 && cy < self.y1
        })
    }
}

/// Cells covered by any of the boxes (center rule).
pub fn union_mask(boxes: &[BoundingBox], grid: (usize, usize)) -> Array2<bool> {
    let mut out = Array2::from_elem(grid, false);
    for b in boxes {
        out.zip_mut_with(&b.rasterize_binary(grid), |o, &v| *o |= v);
    }
    out
}

/// `1 x (h*w)` pixel multiplier that is 1 inside the box and 0 outside.
pub fn blackout_mask(b: &BoundingBox, height: usize, width: usize) -> Array2<f64> {
    let grid = b.rasterize_binary((height, width));
    Array2::from_shape_fn((1, height * width), |(_, p)| {
        if grid[[p / width, p % width]] {
            1.0
        } else {
            0.0
        }
    })
}

/// Indices of the boxes kept by [`coco_layout_filter`], largest first.
pub fn layout_filter_indices(boxes: &[BoundingBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].area_ratio().total_cmp(&boxes[a].area_ratio()));
    let mut kept = Vec::new();
    let mut total = 0.0;
    for i in order {
        if total + boxes[i].area_ratio() >= 0.5 {
            break;
        }
        total += boxes[i].area_ratio();
        kept.push(i);
    }
    if kept.is_empty() && !boxes.is_empty() {
        log::warn!("largest box covers at least half the image; layout filter kept nothing");
    }
    kept
}

/// Largest boxes first, keeping the prefix whose cumulative area stays
/// below half the image. A largest box of half the image or more yields
/// an empty layout.
pub fn coco_layout_filter(boxes: &[BoundingBox]) -> Vec<BoundingBox> {
    layout_filter_indices(boxes).into_iter().map(|i| boxes[i]).collect()
}

/// Entry of a layout file; `lambda` defaults to `0.15 / sqrt(area)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutEntry {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

/// COCO `instances_*.json` subset.
#[derive(Debug, Clone, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, Deserialize)]
struct CocoImage {
    id: u64,
    width: f64,
    height: f64,
    #[serde(default)]
    file_name: String,
}

#[derive(Debug, Clone, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Clone, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Filtered layout of one COCO image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoLayout {
    pub image_id: u64,
    pub file_name: String,
    pub objects: Vec<(String, BoundingBox)>,
}

/// Reads an instances file and applies [`coco_layout_filter`] per image.
/// Crowd annotations are ignored; object texts use `template` with
/// `{label}` replaced by the category name.
pub fn read_coco_layouts(path: &Path, template: &str) -> Result<Vec<CocoLayout>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coco_layouts(&text, template)
}

pub fn parse_coco_layouts(json: &str, template: &str) -> Result<Vec<CocoLayout>> {
    let file: CocoFile = serde_json::from_str(json)?;
    let names: BTreeMap<u64, &str> = file.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let mut out = Vec::new();
    for img in &file.images {
        let mut objects = Vec::new();
        for a in file.annotations.iter().filter(|a| a.image_id == img.id && a.iscrowd == 0) {
            let [x, y, w, h] = a.bbox;
            let clamp = |v: f64| v.clamp(0.0, 1.0);
            let b = match BoundingBox::new(
                clamp(x / img.width),
                clamp(y / img.height),
                clamp((x + w) / img.width),
                clamp((y + h) / img.height),
            ) {
                Ok(b) => b,
                Err(_) => continue,
            };
            let label = names
                .get(&a.category_id)
                .ok_or_else(|| Error::invalid(format!("annotation uses unknown category {}", a.category_id)))?;
            objects.push((label.to_string(), b));
        }
        let boxes: Vec<BoundingBox> = objects.iter().map(|(_, b)| *b).collect();
        let objects = layout_filter_indices(&boxes)
            .into_iter()
            .map(|i| (template.replace("{label}", &objects[i].0), objects[i].1))
            .collect();
        out.push(CocoLayout {
            image_id: img.id,
            file_name: img.file_name.clone(),
            objects,
        });
    }
    Ok(out)
}
