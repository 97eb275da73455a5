//! Binary containers for feature caches and model files.
//!
//! Both share one layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic: b"ATFC" (feature cache) or b"ATMD" (model)
//! 4       4     format version, u32 little-endian (currently 1)
//! 8       4     header length N, u32 little-endian
//! 12      N     UTF-8 JSON header
//! 12+N    ...   payload, little-endian floats
//! ```
//!
//! Feature caches carry `frames × dims` row-major `f32` values. Model files
//! carry the `f64` tensors listed in the header's `tensors` array, in order,
//! each row-major.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMatrix, NormStats, FRAME_PERIOD_MS};
use crate::nn::{Activation, DenseLayer, MlpModel};

pub const FEATURE_MAGIC: &[u8; 4] = b"ATFC";
pub const MODEL_MAGIC: &[u8; 4] = b"ATMD";
pub const FORMAT_VERSION: u32 = 1;

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::Container {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn encode(magic: &[u8; 4], header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

fn decode<'a>(path: &Path, magic: &[u8; 4], bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(corrupt(path, format!("missing {:?} magic", String::from_utf8_lossy(magic))));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(corrupt(path, format!("unsupported format version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + len {
        return Err(corrupt(path, "truncated header"));
    }
    Ok((&bytes[12..12 + len], &bytes[12 + len..]))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub kind: FeatureKind,
    pub chunk_id: String,
    pub frames: usize,
    pub dims: usize,
    pub frame_period_ms: f64,
    pub norm_stats_id: Option<String>,
    pub dtype: String,
}

pub fn encode_features(matrix: &FeatureMatrix, norm_stats_id: Option<&str>) -> Vec<u8> {
    let header = FeatureHeader {
        kind: matrix.kind,
        chunk_id: matrix.chunk_id.clone(),
        frames: matrix.frames(),
        dims: matrix.dims(),
        frame_period_ms: FRAME_PERIOD_MS,
        norm_stats_id: norm_stats_id.map(str::to_string),
        dtype: "f32".into(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut payload = Vec::with_capacity(matrix.values.len() * 4);
    for v in matrix.values.iter() {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    encode(FEATURE_MAGIC, &header, &payload)
}

pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<(FeatureHeader, FeatureMatrix)> {
    let (header, payload) = decode(path, FEATURE_MAGIC, bytes)?;
    let header: FeatureHeader =
        serde_json::from_slice(header).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
    if header.dtype != "f32" {
        return Err(corrupt(path, format!("unsupported dtype {}", header.dtype)));
    }
    let n = header.frames * header.dims;
    if payload.len() != n * 4 {
        return Err(corrupt(path, format!("payload is {} bytes, expected {}", payload.len(), n * 4)));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let values = Array2::from_shape_vec((header.frames, header.dims), values)
        .map_err(|e| corrupt(path, e.to_string()))?;
    let matrix = FeatureMatrix::new(header.chunk_id.clone(), header.kind, values);
    Ok((header, matrix))
}

pub fn write_features(path: &Path, matrix: &FeatureMatrix, norm_stats_id: Option<&str>) -> Result<()> {
    write_atomic(path, &encode_features(matrix, norm_stats_id))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    Ok(decode_features(path, &read_bytes(path)?)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    family: String,
    seed: u64,
    norm_stats_id: Option<String>,
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

/// Named `f64` tensors plus a JSON description, tagged with a model family.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub family: String,
    pub seed: u64,
    pub norm_stats_id: Option<String>,
    pub meta: serde_json::Value,
    pub tensors: Vec<(TensorInfo, Vec<f64>)>,
}

impl ModelFile {
    pub fn new(family: &str, seed: u64, meta: serde_json::Value) -> Self {
        ModelFile {
            family: family.to_string(),
            seed,
            norm_stats_id: None,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((
            TensorInfo {
                name: name.into(),
                shape,
            },
            data,
        ));
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(info, _)| info.name == name)
            .map(|(info, data)| (info.shape.as_slice(), data.as_slice()))
            .ok_or_else(|| Error::Shape(format!("model file has no tensor {name:?}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let (shape, data) = self.tensor(name)?;
        if shape.len() != 2 {
            return Err(Error::Shape(format!("tensor {name} is not a matrix")));
        }
        Array2::from_shape_vec((shape[0], shape[1]), data.to_vec()).map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>> {
        let (_, data) = self.tensor(name)?;
        Ok(Array1::from(data.to_vec()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = ModelHeader {
            family: self.family.clone(),
            seed: self.seed,
            norm_stats_id: self.norm_stats_id.clone(),
            dtype: "f64".into(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(i, _)| i.clone()).collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut payload = Vec::new();
        for (_, data) in &self.tensors {
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        encode(MODEL_MAGIC, &header, &payload)
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<ModelFile> {
        let (header, payload) = decode(path, MODEL_MAGIC, bytes)?;
        let header: ModelHeader =
            serde_json::from_slice(header).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
        if header.dtype != "f64" {
            return Err(corrupt(path, format!("unsupported dtype {}", header.dtype)));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in header.tensors {
            let n: usize = info.shape.iter().product();
            let end = offset + n * 8;
            if end > payload.len() {
                return Err(corrupt(path, format!("payload too short for tensor {}", info.name)));
            }
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            offset = end;
            tensors.push((info, data));
        }
        if offset != payload.len() {
            return Err(corrupt(path, "trailing bytes after last tensor"));
        }
        Ok(ModelFile {
            family: header.family,
            seed: header.seed,
            norm_stats_id: header.norm_stats_id,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<ModelFile> {
        ModelFile::decode(path, &read_bytes(path)?)
    }

    /// Embeds normalization statistics as `norm.mean` / `norm.std`.
    pub fn push_norm(&mut self, stats: &NormStats) {
        self.norm_stats_id = Some(stats.id());
        self.push("norm.mean", vec![stats.dims()], stats.mean.clone());
        self.push("norm.std", vec![stats.dims()], stats.std.clone());
    }

    pub fn norm(&self) -> Result<NormStats> {
        Ok(NormStats {
            mean: self.tensor("norm.mean")?.1.to_vec(),
            std: self.tensor("norm.std")?.1.to_vec(),
        })
    }

    /// Stores an MLP under `prefix` with its layer descriptors in `meta[prefix]`.
    pub fn push_mlp(&mut self, prefix: &str, model: &MlpModel) {
        let layers: Vec<serde_json::Value> = model
            .layers
            .iter()
            .map(|l| {
                serde_json::json!({
                    "inputs": l.input_dim(),
                    "outputs": l.output_dim(),
                    "activation": l.activation,
                    "dropout_rate": l.dropout_rate,
                })
            })
            .collect();
        if let Some(obj) = self.meta.as_object_mut() {
            obj.insert(prefix.to_string(), serde_json::json!({ "layers": layers, "seed": model.seed }));
        }
        for (i, l) in model.layers.iter().enumerate() {
            self.push(
                format!("{prefix}.{i}.weight"),
                vec![l.output_dim(), l.input_dim()],
                l.weights.iter().copied().collect(),
            );
            self.push(format!("{prefix}.{i}.bias"), vec![l.output_dim()], l.biases.to_vec());
        }
    }

    pub fn mlp(&self, prefix: &str) -> Result<MlpModel> {
        let desc = self
            .meta
            .get(prefix)
            .ok_or_else(|| Error::Shape(format!("model file has no network {prefix:?}")))?;
        let layers_desc = desc
            .get("layers")
            .and_then(|l| l.as_array())
            .ok_or_else(|| Error::Shape(format!("network {prefix:?} has no layer list")))?;
        let seed = desc.get("seed").and_then(|s| s.as_u64()).unwrap_or(self.seed);
        let mut layers = Vec::with_capacity(layers_desc.len());
        for (i, d) in layers_desc.iter().enumerate() {
            let activation: Activation = serde_json::from_value(d["activation"].clone())
                .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
            let dropout_rate = d["dropout_rate"].as_f64().unwrap_or(0.0);
            let weights = self.matrix(&format!("{prefix}.{i}.weight"))?;
            let biases = self.vector(&format!("{prefix}.{i}.bias"))?;
            layers.push(DenseLayer {
                weights,
                biases,
                activation,
                dropout_rate,
            });
        }
        if layers.is_empty() {
            return Err(Error::Shape(format!("network {prefix:?} has no layers")));
        }
        let model = MlpModel { layers, seed };
        model.validate()?;
        Ok(model)
    }
}
