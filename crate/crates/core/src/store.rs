// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run directories: config snapshot, metrics, images, heatmaps, plots, log.
//!
//! ```text
//! <output>/config.json      re-runnable snapshot
//! <output>/metrics.json     deterministic, no timestamps
//! <output>/run.log
//! <output>/images/*.png
//! <output>/heatmaps/*.png   grayscale, presentation only
//! <output>/heatmaps/*.json  raw floats
//! <output>/plots/*.svg
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::Image;
use crate::plot;
use crate::relevance::export::export_heatmap;

pub const METRICS_SCHEMA_ID: &str = "explguide/metrics/v1";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const LOG_FILE: &str = "run.log";

pub fn to_json_text<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Exclusive handle on one run directory.
#[derive(Debug)]
pub struct ArtifactDir {
    root: PathBuf,
    log: Vec<String>,
}

impl ArtifactDir {
    /// The directory must not exist yet or be empty.
    pub fn create(root: &Path) -> Result<Self> {
        if root.exists() {
            let mut entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
            if entries.next().is_some() {
                return Err(Error::config(
                    "output",
                    format!("{} is not empty; every run needs its own directory", root.display()),
                ));
            }
        }
        for sub in ["", "images", "heatmaps", "plots"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(ArtifactDir {
            root: root.to_path_buf(),
            log: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log(&mut self, line: impl Into<String>) {
        let line = line.into();
        log::info!("{line}");
        self.log.push(line);
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<PathBuf> {
        self.write_text(rel, &to_json_text(value)?)
    }

    pub fn save_image(&self, name: &str, image: &Image) -> Result<PathBuf> {
        let path = self.root.join("images").join(format!("{name}.png"));
        image.save_png(&path)?;
        Ok(path)
    }

    /// `heatmaps/<name>.png` plus its float sidecar.
    pub fn save_heatmap(&self, name: &str, heatmap: &Array2<f64>, prompt: &str) -> Result<()> {
        export_heatmap(&self.root.join("heatmaps").join(name), heatmap, prompt)?;
        Ok(())
    }

    /// Writes the log file and consumes the handle.
    pub fn finish(self) -> Result<PathBuf> {
        let mut text = self.log.join("\n");
        text.push('\n');
        self.write_text(LOG_FILE, &text)?;
        Ok(self.root)
    }
}

pub fn read_metrics(dir: &Path) -> Result<Value> {
    let path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotReport {
    pub written: Vec<PathBuf>,
    /// One note per series that was absent or unusable.
    pub notes: Vec<String>,
}

fn points(v: &Value, x: &str, y: &str) -> Option<Vec<(f64, f64)>> {
    v.as_array()?
        .iter()
        .map(|p| Some((p.get(x)?.as_f64()?, p.get(y)?.as_f64()?)))
        .collect()
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::Number(n) => n.as_f64().map_or_else(|| n.to_string(), |f| format!("{f:.4}")),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Renders every plot whose series exists in `metrics.json` of `dir`.
///
/// Series: `lambda_curve` (`[{lambda, accuracy}]`), `pos.means`, and
/// `sweep` (`[{lambda, similarity, error}]`).
pub fn emit_plots(dir: &Path) -> Result<PlotReport> {
    let metrics = read_metrics(dir)?;
    let plots = dir.join("plots");
    fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut report = PlotReport::default();
    let write = |name: &str, svg: String, report: &mut PlotReport| -> Result<()> {
        let path = plots.join(name);
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        report.written.push(path);
        Ok(())
    };

    match metrics.get("lambda_curve").and_then(|v| points(v, "lambda", "accuracy")) {
        Some(p) if !p.is_empty() => write(
            "lambda_sensitivity.svg",
            plot::line_plot("accuracy vs lambda", "lambda", "accuracy", &p),
            &mut report,
        )?,
        _ => report.notes.push("no lambda_curve series; sensitivity plot skipped".into()),
    }

    match metrics.pointer("/pos/means").and_then(Value::as_object) {
        Some(m) if !m.is_empty() => {
            let bars: Vec<(String, f64)> = m.iter().filter_map(|(k, v)| Some((k.clone(), v.as_f64()?))).collect();
            write(
                "pos.svg",
                plot::bar_chart("mean normalized relevance per tag", "relevance", &bars),
                &mut report,
            )?
        }
        _ => report.notes.push("no pos.means series; tag bar chart skipped".into()),
    }

    match metrics.get("sweep").and_then(Value::as_array) {
        Some(rows) if !rows.is_empty() => {
            let cols = ["lambda", "similarity", "error"];
            let rows: Vec<Vec<String>> = rows
                .iter()
                .map(|r| cols.iter().map(|c| cell(r.get(*c).unwrap_or(&Value::Null))).collect())
                .collect();
            write("sweep.svg", plot::table("lambda sweep", &cols, &rows), &mut report)?
        }
        _ => report.notes.push("no sweep series; sweep table skipped".into()),
    }
    Ok(report)
}
