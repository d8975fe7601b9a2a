// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adapter registry: model ids resolved to in-process builtins or to
//! executables speaking the [`wire`](super::wire) protocol.
//!
//! Module strings:
//! - `builtin:toy` (options: [`ToyConfig`] fields)
//! - `builtin:toy-generator` (options: `latent_dim`, `seed`)
//! - `builtin:lexicon` part-of-speech tagger (options: `lexicon` word to tag map)
//! - `builtin:relevance-detector` (options: `labels`; defaults to the
//!   ground-truth labels of the evaluated layouts)
//! - `exec:<program>` with options `args`; the program is looked up in the
//!   directories of `EXPLGUIDE_PLUGIN_PATH` before `PATH`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::wire::{self, Frame};
use super::{check_image, DiffEncoder, Encoder, EncoderInfo, Generator, Image, Tokenized, ToyBiModalModel, ToyConfig, ToyGenerator};
use crate::error::{Error, Result};
use crate::eval::pos::{LexiconTagger, PosTagger};
use crate::eval::{Detector, RelevanceDetector};
use crate::relevance::EncoderTrace;

pub const PLUGIN_PATH_ENV: &str = "EXPLGUIDE_PLUGIN_PATH";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginSpec {
    pub module: String,
    #[serde(default)]
    pub options: Value,
}

impl PluginSpec {
    pub fn new(module: &str, options: Value) -> Self {
        PluginSpec {
            module: module.to_string(),
            options,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PluginRegistry {
    pub entries: BTreeMap<String, PluginSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorOptions {
    #[serde(default = "default_latent_dim")]
    latent_dim: usize,
    #[serde(default)]
    seed: u64,
}

fn default_latent_dim() -> usize {
    16
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExecOptions {
    #[serde(default)]
    args: Vec<String>,
}

fn options<T: serde::de::DeserializeOwned + Default>(id: &str, v: &Value) -> Result<T> {
    if v.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(v.clone()).map_err(|e| Error::config(format!("plugins.{id}.options"), e.to_string()))
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions {
            latent_dim: default_latent_dim(),
            seed: 0,
        }
    }
}

impl PluginRegistry {
    /// Registry with `toy`, `toy-generator` and `lexicon` preregistered.
    pub fn with_builtins() -> Self {
        let mut r = PluginRegistry::default();
        r.register("toy", PluginSpec::new("builtin:toy", Value::Null));
        r.register("toy-generator", PluginSpec::new("builtin:toy-generator", Value::Null));
        r.register("lexicon", PluginSpec::new("builtin:lexicon", Value::Null));
        r.register("relevance-detector", PluginSpec::new("builtin:relevance-detector", Value::Null));
        r
    }

    pub fn register(&mut self, id: &str, spec: PluginSpec) {
        self.entries.insert(id.to_string(), spec);
    }

    pub fn merged(mut self, other: &PluginRegistry) -> Self {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
        self
    }

    pub fn spec(&self, id: &str) -> Result<&PluginSpec> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("adapter `{id}` is not registered")))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn encoder(&self, id: &str) -> Result<Arc<dyn Encoder>> {
        let spec = self.spec(id)?;
        if let Some(cmd) = spec.module.strip_prefix("exec:") {
            let opts: ExecOptions = options(id, &spec.options)?;
            return Ok(Arc::new(ProcessEncoder::new(id, cmd, opts.args)?));
        }
        let enc: Arc<dyn Encoder> = self.diff_encoder(id)?;
        Ok(enc)
    }

    /// In-process encoders only; optimization through relevance needs the tape.
    pub fn diff_encoder(&self, id: &str) -> Result<Arc<dyn DiffEncoder>> {
        let spec = self.spec(id)?;
        match spec.module.as_str() {
            "builtin:toy" => {
                let cfg: ToyConfig = options(id, &spec.options)?;
                Ok(Arc::new(ToyBiModalModel::new(cfg)?))
            }
            m if m.starts_with("exec:") => Err(Error::NotFound(format!(
                "adapter `{id}` is out-of-process and cannot be differentiated through"
            ))),
            m => Err(Error::NotFound(format!("adapter `{id}`: `{m}` is not an encoder module"))),
        }
    }

    pub fn generator(&self, id: &str) -> Result<Arc<dyn Generator>> {
        let spec = self.spec(id)?;
        match spec.module.as_str() {
            "builtin:toy-generator" => {
                let o: GeneratorOptions = options(id, &spec.options)?;
                Ok(Arc::new(ToyGenerator::new(o.latent_dim, (3, 16, 16), o.seed)?))
            }
            m => Err(Error::NotFound(format!("adapter `{id}`: `{m}` is not a generator module"))),
        }
    }

    pub fn tagger(&self, id: &str) -> Result<Arc<dyn PosTagger>> {
        let spec = self.spec(id)?;
        match spec.module.as_str() {
            "builtin:lexicon" => {
                let extra: BTreeMap<String, String> = options(id, spec.options.get("lexicon").unwrap_or(&Value::Null))?;
                Ok(Arc::new(LexiconTagger::with_entries(extra)))
            }
            m => Err(Error::NotFound(format!("adapter `{id}`: `{m}` is not a tagger module"))),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectorOptions {
    labels: Option<Vec<String>>,
}

impl PluginRegistry {
    pub fn detector(&self, id: &str, encoder: Arc<dyn Encoder>, default_labels: &[String]) -> Result<Arc<dyn Detector>> {
        let spec = self.spec(id)?;
        match spec.module.as_str() {
            "builtin:relevance-detector" => {
                let o: DetectorOptions = options(id, &spec.options)?;
                let labels = o.labels.unwrap_or_else(|| default_labels.to_vec());
                Ok(Arc::new(RelevanceDetector::new(encoder, labels)))
            }
            m => Err(Error::NotFound(format!("adapter `{id}`: `{m}` is not a detector module"))),
        }
    }
}

fn resolve_program(cmd: &str) -> PathBuf {
    if !cmd.contains(std::path::MAIN_SEPARATOR) {
        if let Some(dirs) = std::env::var_os(PLUGIN_PATH_ENV) {
            for dir in std::env::split_paths(&dirs) {
                let candidate = dir.join(cmd);
                if candidate.is_file() {
                    return candidate;
                }
            }
        }
    }
    PathBuf::from(cmd)
}

/// Encoder backed by an executable; one process per call.
#[derive(Debug, Clone)]
pub struct ProcessEncoder {
    id: String,
    program: PathBuf,
    args: Vec<String>,
    info: EncoderInfo,
}

impl ProcessEncoder {
    pub fn new(id: &str, cmd: &str, args: Vec<String>) -> Result<Self> {
        let mut enc = ProcessEncoder {
            id: id.to_string(),
            program: resolve_program(cmd),
            args,
            info: EncoderInfo {
                image_shape: (0, 0, 0),
                patch_grid: (0, 0),
                max_text_tokens: 0,
                cls_index: 0,
            },
        };
        enc.info = wire::info_from(&enc.call(&Frame::new("describe", json!({})))?)?;
        Ok(enc)
    }

    fn call(&self, request: &Frame) -> Result<Frame> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::NotFound(format!("adapter `{}`: cannot start {}: {e}", self.id, self.program.display())))?;
        let mut buf = Vec::new();
        request.write_to(&mut buf)?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            stdin.write_all(&buf).map_err(|e| Error::io(&self.program, e))?;
        }
        let out = child.wait_with_output().map_err(|e| Error::io(&self.program, e))?;
        let frame = Frame::read_from(&mut out.stdout.as_slice())?
            .ok_or_else(|| Error::ProtocolViolation(format!("adapter `{}` sent no response", self.id)))?;
        wire::check_error(&frame)?;
        Ok(frame)
    }
}

impl Encoder for ProcessEncoder {
    fn info(&self) -> EncoderInfo {
        self.info.clone()
    }

    fn tokenize(&self, text: &str) -> Result<Tokenized> {
        self.call(&Frame::new("tokenize", json!({ "text": text })))?.field("tokens")
    }

    fn encode_and_trace(&self, tokens: &Tokenized, image: &Image) -> Result<(f64, EncoderTrace)> {
        check_image(&self.info, image.shape())?;
        let req = wire::image_tensor(Frame::new("encode", json!({ "tokens": tokens })), image);
        let trace = wire::trace_from(&self.call(&req)?)?;
        if trace.n_text_tokens != tokens.len() || trace.eot_index != tokens.eot_index {
            return Err(Error::ProtocolViolation("trace token layout does not match the request".into()));
        }
        Ok((trace.similarity, trace))
    }

    fn similarity(&self, tokens: &Tokenized, image: &Image) -> Result<f64> {
        check_image(&self.info, image.shape())?;
        let req = wire::image_tensor(Frame::new("similarity", json!({ "tokens": tokens })), image);
        self.call(&req)?.field("similarity")
    }
}
