//! The "AGBN" weight file.
//!
//! ```text
//! magic    "AGBN"                      4 bytes
//! version  u32 LE (= 1)
//! count    u32 LE                      number of records
//! record   u16 LE name length, UTF-8 name,
//!          u8 rank, rank × u32 LE extents,
//!          payload: product(extents) × f32 LE
//! crc      u32 LE                      CRC-32 (IEEE) of all preceding bytes
//! ```
//!
//! The plain-text layer manifest travels as the record `__manifest__` with
//! rank 1; its extent is the UTF-8 byte length and its payload the raw text.
//! Running statistics are stored as `<bn>.running_mean` / `<bn>.running_var`
//! and the BN mode mask lives in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::normalization::ChannelStats;
use crate::tensor::Tensor;

use super::{BnLayerMode, LayerKind, LayerSpec, ModelGraph, Projection};

pub const MAGIC: &[u8; 4] = b"AGBN";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_RECORD: &str = "__manifest__";
const MANIFEST_HEADER: &str = "agbn-manifest";

fn manifest_err(msg: impl Into<String>) -> Error {
    FormatError::Manifest(msg.into()).into()
}

fn check_token(s: &str) -> Result<()> {
    if s.is_empty() || s.contains(|c: char| c.is_whitespace() || c == '=' || c == ',') {
        return Err(manifest_err(format!("`{s}` cannot be written to a manifest")));
    }
    Ok(())
}

fn manifest_line(index: usize, layer: &LayerSpec, model: &ModelGraph) -> String {
    let mut fields: Vec<String> = Vec::new();
    let kind = match &layer.kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            fields.push(format!("in={in_channels} out={out_channels} kernel={kernel} stride={stride} padding={padding}"));
            "conv"
        }
        LayerKind::BatchNorm { channels } => {
            let mode = model.bn_mask.get(&layer.name).copied().unwrap_or(BnLayerMode::Source);
            fields.push(format!("channels={channels} mode={}", mode.as_str()));
            "batchnorm"
        }
        LayerKind::Relu => "relu",
        LayerKind::AvgPool { window, stride } => {
            fields.push(format!("window={window} stride={stride}"));
            "avgpool"
        }
        LayerKind::MaxPool { window, stride } => {
            fields.push(format!("window={window} stride={stride}"));
            "maxpool"
        }
        LayerKind::GlobalAvgPool => "globalavgpool",
        LayerKind::Flatten => "flatten",
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            fields.push(format!("in={in_features} out={out_features}"));
            "linear"
        }
        LayerKind::ResidualBegin => "residual-begin",
        LayerKind::ResidualEnd { projection } => {
            if let Some(p) = projection {
                fields.push(format!(
                    "proj_in={} proj_out={} proj_stride={}",
                    p.in_channels, p.out_channels, p.stride
                ));
            }
            "residual-end"
        }
    };
    let mut params: Vec<String> = layer.param_shapes().into_iter().map(|(n, _)| n).collect();
    if matches!(layer.kind, LayerKind::BatchNorm { .. }) {
        params.push(format!("{}.running_mean", layer.name));
        params.push(format!("{}.running_var", layer.name));
    }
    let mut line = format!("{index} {kind} name={}", layer.name);
    for f in fields {
        line.push(' ');
        line.push_str(&f);
    }
    if !params.is_empty() {
        line.push_str(" params=");
        line.push_str(&params.join(","));
    }
    line
}

/// Plain-text manifest: a header line, then one line per layer.
pub fn manifest(model: &ModelGraph) -> Result<String> {
    check_token(&model.arch)?;
    let mut text = format!(
        "{MANIFEST_HEADER} version={FORMAT_VERSION} arch={} input_channels={} classes={} bn_epsilon={}\n",
        model.arch, model.input_channels, model.class_count, model.bn_epsilon
    );
    for (i, layer) in model.layers.iter().enumerate() {
        check_token(&layer.name)?;
        text.push_str(&manifest_line(i, layer, model));
        text.push('\n');
    }
    Ok(text)
}

struct Fields<'a> {
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    fn parse(tokens: impl Iterator<Item = &'a str>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| manifest_err(format!("expected key=value, got `{tok}`")))?;
            map.insert(k, v);
        }
        Ok(Fields { map })
    }

    fn str(&self, key: &str) -> Result<&'a str> {
        self.map
            .get(key)
            .copied()
            .ok_or_else(|| manifest_err(format!("missing `{key}`")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.str(key)?;
        raw.parse()
            .map_err(|_| manifest_err(format!("`{key}={raw}` is not a valid number")))
    }
}

struct ParsedManifest {
    arch: String,
    input_channels: usize,
    class_count: usize,
    bn_epsilon: f32,
    layers: Vec<LayerSpec>,
    mask: BTreeMap<String, BnLayerMode>,
}

fn parse_manifest(text: &str) -> Result<ParsedManifest> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| manifest_err("empty manifest"))?;
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some(MANIFEST_HEADER) {
        return Err(manifest_err("missing manifest header"));
    }
    let head = Fields::parse(tokens)?;
    let version: u32 = head.num("version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let mut layers = Vec::new();
    let mut mask = BTreeMap::new();
    for (expected, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let mut tokens = line.split_whitespace();
        let index: usize = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| manifest_err(format!("bad layer index in `{line}`")))?;
        if index != expected {
            return Err(manifest_err(format!("layer index {index}, expected {expected}")));
        }
        let kind = tokens.next().ok_or_else(|| manifest_err("missing layer kind"))?;
        let f = Fields::parse(tokens)?;
        let name = f.str("name")?.to_string();
        let kind = match kind {
            "conv" => LayerKind::Conv {
                in_channels: f.num("in")?,
                out_channels: f.num("out")?,
                kernel: f.num("kernel")?,
                stride: f.num("stride")?,
                padding: f.num("padding")?,
            },
            "batchnorm" => {
                mask.insert(name.clone(), f.str("mode")?.parse::<BnLayerMode>().map_err(|e| manifest_err(e.to_string()))?);
                LayerKind::BatchNorm {
                    channels: f.num("channels")?,
                }
            }
            "relu" => LayerKind::Relu,
            "avgpool" => LayerKind::AvgPool {
                window: f.num("window")?,
                stride: f.num("stride")?,
            },
            "maxpool" => LayerKind::MaxPool {
                window: f.num("window")?,
                stride: f.num("stride")?,
            },
            "globalavgpool" => LayerKind::GlobalAvgPool,
            "flatten" => LayerKind::Flatten,
            "linear" => LayerKind::Linear {
                in_features: f.num("in")?,
                out_features: f.num("out")?,
            },
            "residual-begin" => LayerKind::ResidualBegin,
            "residual-end" => LayerKind::ResidualEnd {
                projection: if f.map.contains_key("proj_in") {
                    Some(Projection {
                        in_channels: f.num("proj_in")?,
                        out_channels: f.num("proj_out")?,
                        stride: f.num("proj_stride")?,
                    })
                } else {
                    None
                },
            },
            other => return Err(manifest_err(format!("unknown layer kind `{other}`"))),
        };
        layers.push(LayerSpec { name, kind });
    }
    Ok(ParsedManifest {
        arch: head.str("arch")?.to_string(),
        input_channels: head.num("input_channels")?,
        class_count: head.num("classes")?,
        bn_epsilon: head.num("bn_epsilon")?,
        layers,
        mask,
    })
}

fn push_record(out: &mut Vec<u8>, name: &str, extents: &[usize], payload: impl FnOnce(&mut Vec<u8>)) -> Result<()> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| FormatError::Record(format!("record name `{name}` too long")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(extents.len() as u8);
    for &e in extents {
        let e = u32::try_from(e).map_err(|_| FormatError::Record(format!("extent {e} too large")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    payload(out);
    Ok(())
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    push_record(out, name, t.shape(), |out| {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    })
}

/// Encodes a model as AGBN bytes.
pub fn to_bytes(model: &ModelGraph) -> Result<Vec<u8>> {
    let text = manifest(model)?;
    let mut tensors: Vec<(String, Tensor)> = model.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    for (name, stats) in &model.bn_stats {
        let c = stats.channels();
        tensors.push((format!("{name}.running_mean"), Tensor::new(&[c], stats.mean.clone())?));
        tensors.push((format!("{name}.running_var"), Tensor::new(&[c], stats.variance.clone())?));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&((tensors.len() + 1) as u32).to_le_bytes());
    push_record(&mut out, MANIFEST_RECORD, &[text.len()], |out| out.extend_from_slice(text.as_bytes()))?;
    for (name, t) in &tensors {
        push_tensor(&mut out, name, t)?;
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(FormatError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Decodes AGBN bytes, checking magic, version, checksum and every tensor
/// shape against the embedded manifest.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic.try_into().expect("4 bytes")).into());
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let count = r.u32("record count")?;
    let mut manifest_text = None;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2, "record name length")?.try_into().expect("2 bytes"));
        let name = std::str::from_utf8(r.take(name_len as usize, "record name")?)
            .map_err(|_| FormatError::Record("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "record rank")?[0] as usize;
        let extents = (0..rank)
            .map(|_| r.u32("record extents").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        if name == MANIFEST_RECORD {
            if rank != 1 {
                return Err(FormatError::Record("manifest record must have rank 1".into()).into());
            }
            let text = std::str::from_utf8(r.take(extents[0], "manifest text")?)
                .map_err(|_| FormatError::Manifest("manifest is not UTF-8".into()))?;
            manifest_text = Some(text.to_string());
            continue;
        }
        let len = extents
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| FormatError::Record(format!("`{name}` is too large")))?;
        let payload = r.take(len, "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&extents, data).map_err(|e| FormatError::Record(format!("`{name}`: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(FormatError::Record(format!("duplicate record `{name}`")).into());
        }
    }
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(FormatError::Record(format!("{} trailing bytes after checksum", bytes.len() - r.pos)).into());
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }

    let text = manifest_text.ok_or_else(|| manifest_err("no manifest record"))?;
    let parsed = parse_manifest(&text)?;
    let mut params = BTreeMap::new();
    let mut bn_stats = BTreeMap::new();
    for layer in &parsed.layers {
        for (name, shape) in layer.param_shapes() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| FormatError::ShapeMismatch(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(FormatError::ShapeMismatch(format!(
                    "`{name}` stored as {:?}, manifest implies {shape:?}",
                    t.shape()
                ))
                .into());
            }
            params.insert(name, t);
        }
        if let LayerKind::BatchNorm { channels } = layer.kind {
            let mut stat = |suffix: &str| -> Result<Vec<f32>> {
                let key = format!("{}.{suffix}", layer.name);
                let t = tensors
                    .remove(&key)
                    .ok_or_else(|| FormatError::ShapeMismatch(format!("missing tensor `{key}`")))?;
                if t.shape() != [channels] {
                    return Err(FormatError::ShapeMismatch(format!(
                        "`{key}` stored as {:?}, expected [{channels}]",
                        t.shape()
                    ))
                    .into());
                }
                Ok(t.into_data())
            };
            let mean = stat("running_mean")?;
            let var = stat("running_var")?;
            let stats = ChannelStats::new(mean, var).map_err(|e| FormatError::Record(e.to_string()))?;
            bn_stats.insert(layer.name.clone(), stats);
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(FormatError::Record(format!("record `{extra}` is not named by the manifest")).into());
    }
    let model = ModelGraph {
        arch: parsed.arch,
        input_channels: parsed.input_channels,
        class_count: parsed.class_count,
        bn_epsilon: parsed.bn_epsilon,
        layers: parsed.layers,
        params,
        bn_stats,
        bn_mask: parsed.mask,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_weights(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelGraph> {
    from_bytes(&fs::read(path)?)
}

/// SHA-256 of the model's AGBN encoding, hex encoded.
pub fn model_hash(model: &ModelGraph) -> Result<String> {
    let digest = Sha256::digest(to_bytes(model)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl ModelGraph {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        from_bytes(bytes)
    }

    pub fn manifest(&self) -> Result<String> {
        manifest(self)
    }
}
