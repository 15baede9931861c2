//! Model files: a JSON manifest `<name>.json` plus a little-endian blob
//! `<name>.bin` that ends in a CRC32 of everything before it.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use super::{ActivationKind, BatchNorm, Conv2d, Dense, DepthwiseConv2d, Graph, LayerSpec, Padding};
use crate::error::{Error, Result};
use crate::tensor::{QuantParams, Shape};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
    I32,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 | Dtype::I32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Element count.
    pub len: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qparams: Option<QuantParams>,
    /// Real value of one integer step for i32 tensors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub kind: String,
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_qparams: Option<QuantParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub file: String,
    /// Payload bytes, excluding the trailing checksum.
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub graph_kind: String,
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub notes: Vec<String>,
    pub input_shape: Shape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_qparams: Option<QuantParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
    pub layers: Vec<LayerEntry>,
    pub blob: BlobInfo,
}

/// `path` with `.json` and `.bin` extensions.
pub fn artifact_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("bin"))
}

#[derive(Default)]
pub(crate) struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn entry(&self, name: &str, dtype: Dtype, len: usize) -> TensorEntry {
        TensorEntry {
            name: name.to_string(),
            dtype,
            offset: self.bytes.len() as u64,
            len: len as u64,
            qparams: None,
            scale: None,
        }
    }

    pub fn f32s(&mut self, name: &str, values: &[f32]) -> TensorEntry {
        let e = self.entry(name, Dtype::F32, values.len());
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        e
    }

    pub fn u8s(&mut self, name: &str, values: &[u8]) -> TensorEntry {
        let e = self.entry(name, Dtype::U8, values.len());
        self.bytes.extend_from_slice(values);
        e
    }

    pub fn i32s(&mut self, name: &str, values: &[i32]) -> TensorEntry {
        let e = self.entry(name, Dtype::I32, values.len());
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        e
    }

    pub fn finish(self, path: &Path, manifest: &mut Manifest) -> Result<()> {
        let (json_path, bin_path) = artifact_paths(path);
        if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut bytes = self.bytes;
        manifest.blob = BlobInfo {
            file: bin_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            bytes: bytes.len() as u64,
        };
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        fs::write(&bin_path, &bytes).map_err(|e| Error::io(&bin_path, e))?;
        let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Json {
            path: json_path.clone(),
            source: e,
        })?;
        fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))
    }
}

pub(crate) struct BlobReader {
    path: PathBuf,
    payload: Vec<u8>,
}

impl BlobReader {
    fn slice(&self, e: &TensorEntry, dtype: Dtype) -> Result<&[u8]> {
        if e.dtype != dtype {
            return Err(Error::format(
                &self.path,
                format!("tensor `{}` has dtype {:?}, expected {dtype:?}", e.name, e.dtype),
            ));
        }
        let start = e.offset as usize;
        let end = start + e.len as usize * dtype.size();
        self.payload.get(start..end).ok_or_else(|| {
            Error::format(
                &self.path,
                format!("tensor `{}` extends past the end of the blob (truncated)", e.name),
            )
        })
    }

    pub fn f32s(&self, e: &TensorEntry) -> Result<Vec<f32>> {
        Ok(self
            .slice(e, Dtype::F32)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    pub fn u8s(&self, e: &TensorEntry) -> Result<Vec<u8>> {
        Ok(self.slice(e, Dtype::U8)?.to_vec())
    }

    pub fn i32s(&self, e: &TensorEntry) -> Result<Vec<i32>> {
        Ok(self
            .slice(e, Dtype::I32)?
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

/// Reads and validates a manifest and its blob.
pub(crate) fn read_artifact(path: &Path, graph_kind: &str) -> Result<(Manifest, BlobReader)> {
    let (json_path, bin_path) = artifact_paths(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: json_path.clone(),
        source: e,
    })?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::format(&json_path, "missing format_version"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            path: json_path,
            found: version as u32,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Json {
        path: json_path.clone(),
        source: e,
    })?;
    if manifest.graph_kind != graph_kind {
        return Err(Error::format(
            &json_path,
            format!(
                "manifest describes a {} graph, expected {graph_kind}",
                manifest.graph_kind
            ),
        ));
    }
    let bin_path = json_path
        .parent()
        .map(|d| d.join(&manifest.blob.file))
        .unwrap_or(bin_path);
    let mut bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() as u64 != manifest.blob.bytes + 4 {
        return Err(Error::format(
            &bin_path,
            format!(
                "blob has {} bytes, manifest declares {} plus checksum (truncated)",
                bytes.len(),
                manifest.blob.bytes
            ),
        ));
    }
    let tail = bytes.split_off(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(&bytes);
    if stored != computed {
        return Err(Error::Checksum {
            path: bin_path,
            stored,
            computed,
        });
    }
    Ok((
        manifest,
        BlobReader {
            path: bin_path,
            payload: bytes,
        },
    ))
}

pub(crate) fn params<T: Serialize>(p: &T) -> serde_json::Map<String, serde_json::Value> {
    match serde_json::to_value(p) {
        Ok(serde_json::Value::Object(m)) => m,
        _ => serde_json::Map::new(),
    }
}

pub(crate) fn parse_params<T: for<'de> Deserialize<'de>>(path: &Path, entry: &LayerEntry) -> Result<T> {
    serde_json::from_value(serde_json::Value::Object(entry.params.clone()))
        .map_err(|e| Error::format(path, format!("bad parameters for `{}` layer: {e}", entry.kind)))
}

pub(crate) fn tensor<'a>(path: &Path, entry: &'a LayerEntry, name: &str) -> Result<&'a TensorEntry> {
    find_tensor(entry, name)
        .ok_or_else(|| Error::format(path, format!("`{}` layer lacks tensor `{name}`", entry.kind)))
}

pub(crate) fn find_tensor<'a>(entry: &'a LayerEntry, name: &str) -> Option<&'a TensorEntry> {
    entry.tensors.iter().find(|t| t.name == name)
}

#[derive(Serialize, Deserialize)]
pub(crate) struct ConvParams {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: Padding,
    pub in_ch: usize,
    pub out_ch: usize,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct DepthwiseParams {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: Padding,
    pub channels: usize,
}

#[derive(Serialize, Deserialize)]
struct BnParams {
    epsilon: f32,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct DenseParams {
    pub in_features: usize,
    pub out_features: usize,
}

fn layer_entry(layer: &LayerSpec, blob: &mut BlobWriter) -> LayerEntry {
    let mut entry = LayerEntry {
        kind: layer.kind_name().to_string(),
        params: serde_json::Map::new(),
        tensors: vec![],
        output_qparams: None,
    };
    match layer {
        LayerSpec::Conv2d(c) => {
            entry.params = params(&ConvParams {
                kh: c.kh,
                kw: c.kw,
                stride: c.stride,
                padding: c.padding,
                in_ch: c.in_ch,
                out_ch: c.out_ch,
            });
            entry.tensors.push(blob.f32s("weights", &c.weights));
            if let Some(b) = &c.bias {
                entry.tensors.push(blob.f32s("bias", b));
            }
        }
        LayerSpec::DepthwiseConv2d(d) => {
            entry.params = params(&DepthwiseParams {
                kh: d.kh,
                kw: d.kw,
                stride: d.stride,
                padding: d.padding,
                channels: d.channels,
            });
            entry.tensors.push(blob.f32s("weights", &d.weights));
            if let Some(b) = &d.bias {
                entry.tensors.push(blob.f32s("bias", b));
            }
        }
        LayerSpec::BatchNorm(bn) => {
            entry.params = params(&BnParams { epsilon: bn.epsilon });
            entry.tensors.push(blob.f32s("gamma", &bn.gamma));
            entry.tensors.push(blob.f32s("beta", &bn.beta));
            entry.tensors.push(blob.f32s("mean", &bn.mean));
            entry.tensors.push(blob.f32s("variance", &bn.variance));
        }
        LayerSpec::Dense(d) => {
            entry.params = params(&DenseParams {
                in_features: d.in_features,
                out_features: d.out_features,
            });
            entry.tensors.push(blob.f32s("weights", &d.weights));
            entry.tensors.push(blob.f32s("bias", &d.bias));
        }
        LayerSpec::Activation(_) | LayerSpec::GlobalAvgPool | LayerSpec::Softmax => {}
    }
    entry
}

fn parse_layer(path: &Path, entry: &LayerEntry, blob: &BlobReader) -> Result<LayerSpec> {
    let opt_bias = |e: &LayerEntry| -> Result<Option<Vec<f32>>> {
        find_tensor(e, "bias").map(|t| blob.f32s(t)).transpose()
    };
    Ok(match entry.kind.as_str() {
        "conv2d" => {
            let p: ConvParams = parse_params(path, entry)?;
            LayerSpec::Conv2d(Conv2d {
                kh: p.kh,
                kw: p.kw,
                stride: p.stride,
                padding: p.padding,
                in_ch: p.in_ch,
                out_ch: p.out_ch,
                weights: blob.f32s(tensor(path, entry, "weights")?)?,
                bias: opt_bias(entry)?,
            })
        }
        "depthwise_conv2d" => {
            let p: DepthwiseParams = parse_params(path, entry)?;
            LayerSpec::DepthwiseConv2d(DepthwiseConv2d {
                kh: p.kh,
                kw: p.kw,
                stride: p.stride,
                padding: p.padding,
                channels: p.channels,
                weights: blob.f32s(tensor(path, entry, "weights")?)?,
                bias: opt_bias(entry)?,
            })
        }
        "batch_norm" => {
            let p: BnParams = parse_params(path, entry)?;
            LayerSpec::BatchNorm(BatchNorm {
                gamma: blob.f32s(tensor(path, entry, "gamma")?)?,
                beta: blob.f32s(tensor(path, entry, "beta")?)?,
                mean: blob.f32s(tensor(path, entry, "mean")?)?,
                variance: blob.f32s(tensor(path, entry, "variance")?)?,
                epsilon: p.epsilon,
            })
        }
        "relu" => LayerSpec::Activation(ActivationKind::Relu),
        "relu6" => LayerSpec::Activation(ActivationKind::Relu6),
        "global_avg_pool" => LayerSpec::GlobalAvgPool,
        "softmax" => LayerSpec::Softmax,
        "dense" => {
            let p: DenseParams = parse_params(path, entry)?;
            LayerSpec::Dense(Dense {
                in_features: p.in_features,
                out_features: p.out_features,
                weights: blob.f32s(tensor(path, entry, "weights")?)?,
                bias: blob.f32s(tensor(path, entry, "bias")?)?,
            })
        }
        other => {
            return Err(Error::UnknownLayerKind {
                kind: other.to_string(),
                format_version: FORMAT_VERSION,
            })
        }
    })
}

/// Writes `<path>.json` and `<path>.bin`.
pub fn save_graph(g: &Graph, path: &Path) -> Result<()> {
    let mut blob = BlobWriter::default();
    let layers = g.layers.iter().map(|l| layer_entry(l, &mut blob)).collect();
    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        graph_kind: "float".into(),
        name: g.name.clone(),
        seed: g.seed,
        notes: g.notes.clone(),
        input_shape: g.input_shape,
        input_qparams: None,
        extra: None,
        layers,
        blob: BlobInfo {
            file: String::new(),
            bytes: 0,
        },
    };
    blob.finish(path, &mut manifest)
}

pub fn load_graph(path: &Path) -> Result<Graph> {
    let (manifest, blob) = read_artifact(path, "float")?;
    let (json_path, _) = artifact_paths(path);
    let layers = manifest
        .layers
        .iter()
        .map(|e| parse_layer(&json_path, e, &blob))
        .collect::<Result<Vec<_>>>()?;
    let g = Graph {
        name: manifest.name,
        seed: manifest.seed,
        notes: manifest.notes,
        input_shape: manifest.input_shape,
        layers,
    };
    g.infer_shapes()?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_baseline_mini, build_friendly_mini, ArchSpec};

    fn filled(mut g: Graph) -> Graph {
        let mut k = 0.0f32;
        for layer in &mut g.layers {
            let mut bump = |v: &mut Vec<f32>| {
                for x in v.iter_mut() {
                    k += 0.37;
                    *x = (k.sin() * 3.0) + 1e-7 * k;
                }
            };
            match layer {
                LayerSpec::Conv2d(c) => {
                    bump(&mut c.weights);
                    if let Some(b) = c.bias.as_mut() {
                        bump(b)
                    }
                }
                LayerSpec::DepthwiseConv2d(d) => {
                    bump(&mut d.weights);
                    if let Some(b) = d.bias.as_mut() {
                        bump(b)
                    }
                }
                LayerSpec::BatchNorm(bn) => {
                    bump(&mut bn.gamma);
                    bump(&mut bn.mean);
                }
                LayerSpec::Dense(d) => bump(&mut d.weights),
                _ => {}
            }
        }
        g
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        for g in [
            filled(build_baseline_mini(&ArchSpec::default()).unwrap()),
            filled(build_friendly_mini(&ArchSpec::default()).unwrap()),
        ] {
            let p = dir.path().join(&g.name);
            save_graph(&g, &p).unwrap();
            let back = load_graph(&p).unwrap();
            assert_eq!(back, g);
        }
    }

    #[test]
    fn unknown_kind_is_a_versioned_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m");
        save_graph(&build_baseline_mini(&ArchSpec::default()).unwrap(), &p).unwrap();
        let json = p.with_extension("json");
        let text = fs::read_to_string(&json).unwrap();
        fs::write(&json, text.replacen("\"global_avg_pool\"", "\"max_pool\"", 1)).unwrap();
        match load_graph(&p) {
            Err(Error::UnknownLayerKind { kind, format_version }) => {
                assert_eq!(kind, "max_pool");
                assert_eq!(format_version, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_checksum_and_truncation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m");
        let g = filled(build_friendly_mini(&ArchSpec::default()).unwrap());
        save_graph(&g, &p).unwrap();
        let (json, bin) = artifact_paths(&p);

        let bytes = fs::read(&bin).unwrap();
        let mut flipped = bytes.clone();
        flipped[10] ^= 0x40;
        fs::write(&bin, &flipped).unwrap();
        assert!(matches!(load_graph(&p), Err(Error::Checksum { .. })));

        fs::write(&bin, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_graph(&p), Err(Error::Format { .. })));
        fs::write(&bin, &bytes).unwrap();
        assert!(load_graph(&p).is_ok());

        let text = fs::read_to_string(&json).unwrap();
        fs::write(
            &json,
            text.replacen("\"format_version\": 1", "\"format_version\": 7", 1),
        )
        .unwrap();
        assert!(matches!(load_graph(&p), Err(Error::Version { found: 7, .. })));
    }
}
