// SPDX-License-Identifier: MIT OR Apache-2.0

//! Frame format for out-of-process encoders.
//!
//! A frame is the magic `XGT1`, a little-endian `u32` header length, a JSON
//! header and then each tensor's data as little-endian `f64` in header
//! order. The header names the message kind, carries scalar fields, lists
//! tensors (`name`, `shape`, `dtype`) and, for traces, the layer order.
//!
//! Requests: `describe`, `tokenize {text}`, `encode {tokens}` with an
//! `image` tensor, `similarity {tokens}` with an `image` tensor.
//! Responses: `info`, `tokenized`, `trace`, `similarity`, `error`.

use std::io::{Read, Write};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Encoder, EncoderInfo, Image, Tokenized};
use crate::error::{Error, Result};
use crate::relevance::{AttentionRecord, EncoderTrace};

pub const MAGIC: &[u8; 4] = b"XGT1";
const MAX_HEADER: u32 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    #[serde(default)]
    fields: Value,
    #[serde(default)]
    tensors: Vec<TensorMeta>,
    #[serde(default)]
    layer_order: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: String,
    pub fields: Value,
    pub tensors: Vec<NamedTensor>,
    pub layer_order: Vec<String>,
}

fn violation(msg: impl Into<String>) -> Error {
    Error::ProtocolViolation(msg.into())
}

impl Frame {
    pub fn new(kind: &str, fields: Value) -> Self {
        Frame {
            kind: kind.to_string(),
            fields,
            tensors: Vec::new(),
            layer_order: Vec::new(),
        }
    }

    pub fn with_tensor(mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Self {
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            shape,
            data,
        });
        self
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn field<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        let v = self
            .fields
            .get(name)
            .ok_or_else(|| violation(format!("`{}` frame lacks field `{name}`", self.kind)))?;
        serde_json::from_value(v.clone()).map_err(|e| violation(format!("field `{name}`: {e}")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            fields: self.fields.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorMeta {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    dtype: "f64".into(),
                })
                .collect(),
            layer_order: self.layer_order.clone(),
        };
        let text = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(8 + text.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
        buf.extend_from_slice(&text);
        for t in &self.tensors {
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(|e| Error::io("<frame>", e))?;
        w.flush().map_err(|e| Error::io("<frame>", e))
    }

    /// Reads one frame; `Ok(None)` on clean end of stream.
    pub fn read_from(r: &mut impl Read) -> Result<Option<Frame>> {
        let mut magic = [0u8; 4];
        match read_exact_or_eof(r, &mut magic)? {
            false => return Ok(None),
            true if &magic != MAGIC => return Err(violation("bad frame magic")),
            true => {}
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|e| violation(format!("truncated frame: {e}")))?;
        let len = u32::from_le_bytes(len);
        if len > MAX_HEADER {
            return Err(violation("frame header too large"));
        }
        let mut text = vec![0u8; len as usize];
        r.read_exact(&mut text).map_err(|e| violation(format!("truncated header: {e}")))?;
        let header: Header = serde_json::from_slice(&text).map_err(|e| violation(format!("bad header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for meta in header.tensors {
            if meta.dtype != "f64" {
                return Err(violation(format!("tensor `{}` has dtype {}", meta.name, meta.dtype)));
            }
            let n: usize = meta.shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)
                .map_err(|e| violation(format!("truncated tensor `{}`: {e}", meta.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name: meta.name,
                shape: meta.shape,
                data,
            });
        }
        Ok(Some(Frame {
            kind: header.kind,
            fields: header.fields,
            tensors,
            layer_order: header.layer_order,
        }))
    }
}

fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(violation("truncated frame magic")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io("<frame>", e)),
        }
    }
    Ok(true)
}

pub fn image_tensor(frame: Frame, image: &Image) -> Frame {
    let (c, h, w) = image.shape();
    frame.with_tensor("image", vec![c, h, w], image.0.iter().copied().collect())
}

pub fn image_from(frame: &Frame) -> Result<Image> {
    let t = frame.tensor("image").ok_or_else(|| violation("request lacks `image` tensor"))?;
    let [c, h, w] = t.shape[..] else {
        return Err(violation("image tensor must be 3-d"));
    };
    Ok(Image(Array3::from_shape_vec((c, h, w), t.data.clone()).expect("sized by shape")))
}

fn layer_names(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |l| format!("{prefix}.{l}"))
}

pub fn trace_frame(trace: &EncoderTrace) -> Frame {
    let mut frame = Frame::new(
        "trace",
        json!({
            "similarity": trace.similarity,
            "n_text_tokens": trace.n_text_tokens,
            "n_image_tokens": trace.n_image_tokens,
            "eot_index": trace.eot_index,
            "sot_index": trace.sot_index,
            "text_padding": trace.text_padding,
            "cls_index": trace.cls_index,
            "patch_grid": trace.patch_grid,
        }),
    );
    let layers = layer_names("text", trace.text_layers.len())
        .zip(&trace.text_layers)
        .chain(layer_names("image", trace.image_layers.len()).zip(&trace.image_layers));
    for (name, rec) in layers {
        let shape = rec.attention.shape().to_vec();
        frame = frame
            .with_tensor(&format!("{name}.attention"), shape.clone(), rec.attention.iter().copied().collect())
            .with_tensor(&format!("{name}.gradient"), shape, rec.gradient.iter().copied().collect());
        frame.layer_order.push(name);
    }
    frame
}

fn array3(t: &NamedTensor) -> Result<Array3<f64>> {
    let [h, n, m] = t.shape[..] else {
        return Err(violation(format!("tensor `{}` must be [heads, n, n]", t.name)));
    };
    Ok(Array3::from_shape_vec((h, n, m), t.data.clone()).expect("sized by shape"))
}

/// Decodes and validates a trace response.
pub fn trace_from(frame: &Frame) -> Result<EncoderTrace> {
    if frame.kind != "trace" {
        return Err(violation(format!("expected trace, got `{}`", frame.kind)));
    }
    let mut text_layers = Vec::new();
    let mut image_layers = Vec::new();
    for name in &frame.layer_order {
        let get = |part: &str| {
            frame
                .tensor(&format!("{name}.{part}"))
                .ok_or_else(|| violation(format!("layer `{name}` lacks its {part} tensor")))
        };
        let attention = array3(get("attention")?)?;
        let gradient = array3(get("gradient")?)?;
        let rec = AttentionRecord::new(attention, gradient).map_err(|e| violation(e.to_string()))?;
        rec.check_stochastic()?;
        match name.split('.').next() {
            Some("text") => text_layers.push(rec),
            Some("image") => image_layers.push(rec),
            _ => return Err(violation(format!("unknown layer `{name}`"))),
        }
    }
    let trace = EncoderTrace {
        similarity: frame.field("similarity")?,
        text_layers,
        image_layers,
        n_text_tokens: frame.field("n_text_tokens")?,
        n_image_tokens: frame.field("n_image_tokens")?,
        eot_index: frame.field("eot_index")?,
        sot_index: frame.field("sot_index")?,
        text_padding: frame.field("text_padding")?,
        cls_index: frame.field("cls_index")?,
        patch_grid: frame.field("patch_grid")?,
    };
    trace.validate().map_err(|e| violation(e.to_string()))?;
    Ok(trace)
}

/// Error kinds carried by `error` frames.
fn error_frame(e: &Error) -> Frame {
    let kind = match e {
        Error::InvalidArgument(_) => "invalid-argument",
        Error::NotFound(_) => "not-found",
        _ => "internal",
    };
    Frame::new("error", json!({"kind": kind, "message": e.to_string()}))
}

/// Turns an `error` response into the matching [`Error`].
pub fn check_error(frame: &Frame) -> Result<()> {
    if frame.kind != "error" {
        return Ok(());
    }
    let kind: String = frame.field("kind").unwrap_or_default();
    let message: String = frame.field("message").unwrap_or_default();
    Err(match kind.as_str() {
        "invalid-argument" => Error::InvalidArgument(message),
        "not-found" => Error::NotFound(message),
        _ => violation(format!("plugin error: {message}")),
    })
}

fn handle(encoder: &dyn Encoder, req: &Frame) -> Result<Frame> {
    match req.kind.as_str() {
        "describe" => Ok(Frame::new("info", json!({ "info": encoder.info() }))),
        "tokenize" => {
            let text: String = req.field("text")?;
            Ok(Frame::new("tokenized", json!({ "tokens": encoder.tokenize(&text)? })))
        }
        "encode" => {
            let tokens: Tokenized = req.field("tokens")?;
            let (_, trace) = encoder.encode_and_trace(&tokens, &image_from(req)?)?;
            Ok(trace_frame(&trace))
        }
        "similarity" => {
            let tokens: Tokenized = req.field("tokens")?;
            let s = encoder.similarity(&tokens, &image_from(req)?)?;
            Ok(Frame::new("similarity", json!({ "similarity": s })))
        }
        other => Err(Error::invalid(format!("unknown request `{other}`"))),
    }
}

/// Answers request frames from `input` until end of stream.
pub fn serve(encoder: &dyn Encoder, input: &mut impl Read, output: &mut impl Write) -> Result<()> {
    while let Some(req) = Frame::read_from(input)? {
        let resp = handle(encoder, &req).unwrap_or_else(|e| error_frame(&e));
        resp.write_to(output)?;
    }
    Ok(())
}

pub(crate) fn info_from(frame: &Frame) -> Result<EncoderInfo> {
    check_error(frame)?;
    frame.field("info")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ToyBiModalModel;

    fn roundtrip(frame: &Frame) -> Frame {
        let mut buf = Vec::new();
        frame.write_to(&mut buf).unwrap();
        Frame::read_from(&mut buf.as_slice()).unwrap().unwrap()
    }

    #[test]
    fn frame_roundtrip_is_exact() {
        let f = Frame::new("x", json!({"a": 1})).with_tensor("t", vec![2, 2], vec![0.1, -2.5, f64::MIN_POSITIVE, 3.0]);
        assert_eq!(roundtrip(&f), f);
        let mut empty: &[u8] = &[];
        assert!(Frame::read_from(&mut empty).unwrap().is_none());
        let mut bad: &[u8] = b"NOPE\0\0\0\0";
        assert!(matches!(Frame::read_from(&mut bad), Err(Error::ProtocolViolation(_))));
    }

    #[test]
    fn trace_roundtrip_is_exact() {
        let m = ToyBiModalModel::with_seed(0);
        let t = m.tokenize("a photo of a cat").unwrap();
        let (_, trace) = m.encode_and_trace(&t, &Image::filled((3, 16, 16), 0.3)).unwrap();
        assert_eq!(trace_from(&roundtrip(&trace_frame(&trace))).unwrap(), trace);
    }

    #[test]
    fn missing_gradient_and_bad_rows_rejected() {
        let m = ToyBiModalModel::with_seed(0);
        let t = m.tokenize("a cat").unwrap();
        let (_, trace) = m.encode_and_trace(&t, &Image::filled((3, 16, 16), 0.3)).unwrap();
        let mut f = trace_frame(&trace);
        f.tensors.retain(|t| t.name != "image.1.gradient");
        assert!(matches!(trace_from(&f), Err(Error::ProtocolViolation(_))));

        let mut f = trace_frame(&trace);
        f.tensors[0].data[0] += 0.1;
        assert!(matches!(trace_from(&f), Err(Error::ProtocolViolation(_))));
    }

    #[test]
    fn serve_answers_requests_in_order() {
        let m = ToyBiModalModel::with_seed(0);
        let mut input = Vec::new();
        Frame::new("describe", json!({})).write_to(&mut input).unwrap();
        Frame::new("tokenize", json!({"text": "a dog"})).write_to(&mut input).unwrap();
        Frame::new("bogus", json!({})).write_to(&mut input).unwrap();
        let mut out = Vec::new();
        serve(&m, &mut input.as_slice(), &mut out).unwrap();
        let mut r = out.as_slice();
        let info = info_from(&Frame::read_from(&mut r).unwrap().unwrap()).unwrap();
        assert_eq!(info, m.info());
        let tok = Frame::read_from(&mut r).unwrap().unwrap();
        assert_eq!(tok.field::<Tokenized>("tokens").unwrap(), m.tokenize("a dog").unwrap());
        let err = Frame::read_from(&mut r).unwrap().unwrap();
        assert!(matches!(check_error(&err), Err(Error::InvalidArgument(_))));
    }
}
