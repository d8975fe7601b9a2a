// SPDX-License-Identifier: MIT OR Apache-2.0

//! Versioned run configuration for every pipeline.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::basis::{AugPolicy, FuseConfig};
use crate::edit::EditRequest;
use crate::error::{Error, Result};
use crate::eval::pos::MIN_TAG_COUNT;
use crate::layout::{GenerateConfig, LayoutEntry};
use crate::model::PluginRegistry;
use crate::presets;
use crate::prompt::train::SyntheticSpec;
use crate::prompt::TunerConfig;

pub const SCHEMA_ID: &str = "explguide/run-config/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pipeline {
    PromptTrain,
    PromptEval,
    Edit,
    LayoutGen,
    Fuse,
    Eval,
    PosAnalysis,
}

impl Pipeline {
    pub const ALL: [Pipeline; 7] = [
        Pipeline::PromptTrain,
        Pipeline::PromptEval,
        Pipeline::Edit,
        Pipeline::LayoutGen,
        Pipeline::Fuse,
        Pipeline::Eval,
        Pipeline::PosAnalysis,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::PromptTrain => "prompt-train",
            Pipeline::PromptEval => "prompt-eval",
            Pipeline::Edit => "edit",
            Pipeline::LayoutGen => "layout-gen",
            Pipeline::Fuse => "fuse",
            Pipeline::Eval => "eval",
            Pipeline::PosAnalysis => "pos-analysis",
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pipeline::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| {
            let known: Vec<&str> = Pipeline::ALL.iter().map(|p| p.as_str()).collect();
            Error::config("pipeline", format!("unknown pipeline `{s}`; expected one of {}", known.join(", ")))
        })
    }
}

/// Adapter ids, resolved through the plugin registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Adapters {
    pub encoder: String,
    pub generator: String,
    pub tagger: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector: Option<String>,
}

impl Default for Adapters {
    fn default() -> Self {
        Adapters {
            encoder: "toy".into(),
            generator: "toy-generator".into(),
            tagger: "lexicon".into(),
            detector: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Directory with `classnames.txt` and one folder of PNGs per class.
    Folders(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTrainParams {
    pub dataset: DatasetSource,
    /// Evaluated after training; the training set when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<DatasetSource>,
    #[serde(default)]
    pub tuner: TunerConfig,
    /// Extra weights to train and evaluate for the sensitivity curve.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lambda_sweep: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptEvalParams {
    /// `prompts.json` written by a prompt-train run.
    pub prompts: PathBuf,
    pub dataset: DatasetSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayoutSource {
    Objects(Vec<LayoutEntry>),
    /// JSON array of layout entries.
    File(PathBuf),
    Coco(CocoSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CocoSource {
    pub annotations: PathBuf,
    /// First image of the file when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<u64>,
    #[serde(default = "default_template")]
    pub template: String,
}

fn default_template() -> String {
    "{label}".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutGenParams {
    pub layout: LayoutSource,
    #[serde(default)]
    pub generate: GenerateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseParams {
    pub prompt: String,
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_fuse_lambda")]
    pub lambda: f64,
    /// Chosen from a first-pass image when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_set: Option<Vec<String>>,
    #[serde(default)]
    pub augmentation: AugPolicy,
    #[serde(default)]
    pub fuse: FuseConfig,
}

fn default_candidates() -> usize {
    16
}

fn default_k() -> usize {
    4
}

fn default_fuse_lambda() -> f64 {
    presets::FUSE_LAMBDA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalParams {
    /// Output directories of layout-gen runs.
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum CorpusSource {
    /// JSON array of `{"caption": ..., "image": <png path>}`.
    File(PathBuf),
    /// Captions rendered by the generator; caption `i` uses the run seed plus `i`.
    Generated(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosAnalysisParams {
    pub corpus: CorpusSource,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
}

fn default_min_count() -> usize {
    MIN_TAG_COUNT
}

#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    PromptTrain(PromptTrainParams),
    PromptEval(PromptEvalParams),
    Edit(EditRequest),
    LayoutGen(LayoutGenParams),
    Fuse(FuseParams),
    Eval(EvalParams),
    PosAnalysis(PosAnalysisParams),
}

impl Params {
    pub fn pipeline(&self) -> Pipeline {
        match self {
            Params::PromptTrain(_) => Pipeline::PromptTrain,
            Params::PromptEval(_) => Pipeline::PromptEval,
            Params::Edit(_) => Pipeline::Edit,
            Params::LayoutGen(_) => Pipeline::LayoutGen,
            Params::Fuse(_) => Pipeline::Fuse,
            Params::Eval(_) => Pipeline::Eval,
            Params::PosAnalysis(_) => Pipeline::PosAnalysis,
        }
    }

    fn to_value(&self) -> Value {
        let v = match self {
            Params::PromptTrain(p) => serde_json::to_value(p),
            Params::PromptEval(p) => serde_json::to_value(p),
            Params::Edit(p) => serde_json::to_value(p),
            Params::LayoutGen(p) => serde_json::to_value(p),
            Params::Fuse(p) => serde_json::to_value(p),
            Params::Eval(p) => serde_json::to_value(p),
            Params::PosAnalysis(p) => serde_json::to_value(p),
        };
        v.expect("params serialize")
    }

    fn from_value(pipeline: Pipeline, v: Value) -> Result<Self> {
        Ok(match pipeline {
            Pipeline::PromptTrain => Params::PromptTrain(parse_params(v)?),
            Pipeline::PromptEval => Params::PromptEval(parse_params(v)?),
            Pipeline::Edit => Params::Edit(parse_params(v)?),
            Pipeline::LayoutGen => Params::LayoutGen(parse_params(v)?),
            Pipeline::Fuse => Params::Fuse(parse_params(v)?),
            Pipeline::Eval => Params::Eval(parse_params(v)?),
            Pipeline::PosAnalysis => Params::PosAnalysis(parse_params(v)?),
        })
    }
}

fn parse_params<T: DeserializeOwned>(v: Value) -> Result<T> {
    let v = if v.is_null() { Value::Object(Default::default()) } else { v };
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "params".to_string() } else { format!("params.{path}") };
        Error::config(path, e.into_inner().to_string())
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "default_schema")]
    schema: String,
    pipeline: String,
    #[serde(default)]
    seed: u64,
    output: PathBuf,
    #[serde(default)]
    adapters: Adapters,
    #[serde(default, skip_serializing_if = "is_empty_registry")]
    plugins: PluginRegistry,
    #[serde(default)]
    params: Value,
}

fn default_schema() -> String {
    SCHEMA_ID.into()
}

fn is_empty_registry(r: &PluginRegistry) -> bool {
    r.entries.is_empty()
}

/// One run: pipeline parameters, adapters, seed and output directory.
///
/// The top-level `seed` overrides every seed inside `params`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub adapters: Adapters,
    /// Extra adapters on top of the builtins.
    pub plugins: PluginRegistry,
    pub params: Params,
}

impl RunConfig {
    pub fn new(params: Params, output: impl Into<PathBuf>) -> Self {
        RunConfig {
            seed: 0,
            output: output.into(),
            adapters: Adapters::default(),
            plugins: PluginRegistry::default(),
            params,
        }
    }

    pub fn pipeline(&self) -> Pipeline {
        self.params.pipeline()
    }

    /// Parses and validates; relative paths are taken against `base`.
    pub fn from_json(text: &str, base: Option<&Path>) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "(root)".into() } else { path }, e.into_inner().to_string())
        })?;
        if raw.schema != SCHEMA_ID {
            return Err(Error::config("schema", format!("unsupported schema `{}`, expected `{SCHEMA_ID}`", raw.schema)));
        }
        let pipeline: Pipeline = raw.pipeline.parse()?;
        let params = Params::from_value(pipeline, raw.params)?;
        let mut cfg = RunConfig {
            seed: raw.seed,
            output: raw.output,
            adapters: raw.adapters,
            plugins: raw.plugins,
            params,
        };
        if let Some(base) = base {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text, path.parent())
    }

    pub fn to_json(&self) -> String {
        let raw = RawConfig {
            schema: SCHEMA_ID.into(),
            pipeline: self.pipeline().as_str().into(),
            seed: self.seed,
            output: self.output.clone(),
            adapters: self.adapters.clone(),
            plugins: self.plugins.clone(),
            params: self.params.to_value(),
        };
        let mut s = serde_json::to_string_pretty(&raw).expect("config serializes");
        s.push('\n');
        s
    }

    /// Registry with the builtins plus this config's plugins.
    pub fn registry(&self) -> PluginRegistry {
        PluginRegistry::with_builtins().merged(&self.plugins)
    }

    /// Checks that every adapter the pipeline needs is registered.
    pub fn check_adapters(&self) -> Result<()> {
        let r = self.registry();
        let a = &self.adapters;
        let mut needed = vec![&a.encoder];
        match self.pipeline() {
            Pipeline::Edit | Pipeline::LayoutGen | Pipeline::Fuse => needed.push(&a.generator),
            Pipeline::PosAnalysis => {
                needed.push(&a.tagger);
                if matches!(self.params, Params::PosAnalysis(PosAnalysisParams { corpus: CorpusSource::Generated(_), .. })) {
                    needed.push(&a.generator);
                }
            }
            _ => {}
        }
        if let Pipeline::Fuse = self.pipeline() {
            if matches!(&self.params, Params::Fuse(f) if f.semantic_set.is_none()) {
                needed.push(&a.tagger);
            }
        }
        if let (Pipeline::Eval, Some(d)) = (self.pipeline(), &a.detector) {
            needed.push(d);
        }
        for id in needed {
            r.spec(id)?;
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        let fix_ds = |d: &mut DatasetSource| {
            if let DatasetSource::Folders(p) = d {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        match &mut self.params {
            Params::PromptTrain(p) => {
                fix_ds(&mut p.dataset);
                if let Some(t) = &mut p.test {
                    fix_ds(t);
                }
            }
            Params::PromptEval(p) => {
                fix(&mut p.prompts);
                fix_ds(&mut p.dataset);
            }
            Params::LayoutGen(p) => match &mut p.layout {
                LayoutSource::File(f) => fix(f),
                LayoutSource::Coco(c) => fix(&mut c.annotations),
                LayoutSource::Objects(_) => {}
            },
            Params::Eval(p) => p.runs.iter_mut().for_each(fix),
            Params::PosAnalysis(PosAnalysisParams {
                corpus: CorpusSource::File(f),
                ..
            }) => fix(f),
            _ => {}
        }
    }

    /// Copies the top-level seed into the pipeline parameters.
    pub fn seeded_params(&self) -> Params {
        let mut p = self.params.clone();
        match &mut p {
            Params::PromptTrain(t) => t.tuner.seed = self.seed,
            Params::Edit(e) => {
                e.seed = self.seed;
                e.generator = self.adapters.generator.clone();
            }
            Params::LayoutGen(l) => l.generate.seed = self.seed,
            Params::Fuse(f) => f.augmentation.seed = self.seed,
            _ => {}
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn layout_json() -> Value {
        json!({
            "pipeline": "layout-gen",
            "seed": 3,
            "output": "/tmp/out",
            "params": {"layout": {"objects": [{"box": [0.0, 0.0, 0.5, 0.5], "text": "a red ball"}]}}
        })
    }

    #[test]
    fn unknown_pipeline_names_field() {
        let mut v = layout_json();
        v["pipeline"] = json!("layout-generate");
        match RunConfig::from_json(&v.to_string(), None) {
            Err(Error::Config { path, message }) => {
                assert_eq!(path, "pipeline");
                assert!(message.contains("layout-generate"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_param_reports_path() {
        let mut v = layout_json();
        v["params"]["generate"] = json!({"steps": "many"});
        match RunConfig::from_json(&v.to_string(), None) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "params.generate.steps"),
            other => panic!("{other:?}"),
        }
        let mut v = layout_json();
        v["colour"] = json!(1);
        assert!(matches!(RunConfig::from_json(&v.to_string(), None), Err(Error::Config { .. })));
        let mut v = layout_json();
        v["schema"] = json!("explguide/run-config/v0");
        assert!(matches!(RunConfig::from_json(&v.to_string(), None), Err(Error::Config { path, .. }) if path == "schema"));
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::from_json(&layout_json().to_string(), None).unwrap();
        let again = RunConfig::from_json(&cfg.to_json(), None).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.to_json(), again.to_json());
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn relative_paths_follow_base() {
        let mut v = layout_json();
        v["output"] = json!("runs/a");
        let cfg = RunConfig::from_json(&v.to_string(), Some(Path::new("/data/cfg"))).unwrap();
        assert_eq!(cfg.output, PathBuf::from("/data/cfg/runs/a"));
    }

    #[test]
    fn missing_adapter_is_not_found() {
        let mut v = layout_json();
        v["adapters"] = json!({"generator": "vqgan"});
        let cfg = RunConfig::from_json(&v.to_string(), None).unwrap();
        assert!(matches!(cfg.check_adapters(), Err(Error::NotFound(_))));
    }
}
