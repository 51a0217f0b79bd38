//! Bit-exact persistence for models, supernets, datasets, and searched
//! configurations.
//!
//! The binary container is: 4-byte magic `GLRA`, a little-endian u32 version,
//! a little-endian u64 header length, a UTF-8 JSON header, then the raw
//! little-endian payload of every tensor in manifest order. Manifest offsets
//! are relative to the payload start and must be contiguous; loading checks
//! every length against the actual file size before reading, and rejects
//! anything `save` would not have produced. Writes go to a temporary sibling
//! file first and are renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::GenerationStat;
use crate::glora::{
    GloraLinear, LayerConfig, LayerSearchSpace, MergedLinear, ModelConfig, FACTOR_SLOTS,
};
use crate::supernet::{layer_shapes, LayerRole, MergedModel, ModelKind, ToyModel};
use crate::synth::{Dataset, DatasetMeta, Split, Targets};
use crate::tensor::{DenseMatrix, ElemType, Scalar};

pub const MAGIC: [u8; 4] = *b"GLRA";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    kind: ModelKind,
    merged: bool,
    dims: Vec<usize>,
    labels: Vec<LayerRole>,
    r_max: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    spaces: Option<Vec<LayerSearchSpace>>,
    /// Per-layer bias presence flags.
    biases: Vec<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    container: String,
    elem: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelHeader>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<DatasetMeta>,
    tensors: Vec<TensorEntry>,
}

enum TensorData<'a, T> {
    Float(&'a DenseMatrix<T>),
    U32(&'a [u32]),
}

struct ContainerWriter<'a, T> {
    entries: Vec<TensorEntry>,
    tensors: Vec<TensorData<'a, T>>,
    offset: u64,
}

impl<'a, T: Scalar> ContainerWriter<'a, T> {
    fn new() -> Self {
        ContainerWriter {
            entries: Vec::new(),
            tensors: Vec::new(),
            offset: 0,
        }
    }

    fn push_float(&mut self, name: String, m: &'a DenseMatrix<T>) {
        let byte_len = (m.len() * T::BYTES) as u64;
        self.entries.push(TensorEntry {
            name,
            dtype: T::ELEM.name().to_string(),
            shape: vec![m.rows(), m.cols()],
            offset: self.offset,
            byte_len,
        });
        self.tensors.push(TensorData::Float(m));
        self.offset += byte_len;
    }

    fn push_u32(&mut self, name: String, values: &'a [u32]) {
        let byte_len = (values.len() * 4) as u64;
        self.entries.push(TensorEntry {
            name,
            dtype: "u32".to_string(),
            shape: vec![values.len(), 1],
            offset: self.offset,
            byte_len,
        });
        self.tensors.push(TensorData::U32(values));
        self.offset += byte_len;
    }

    /// Serialize the header and payload and write them atomically.
    fn write(
        self,
        path: &Path,
        container: &str,
        model: Option<ModelHeader>,
        dataset: Option<DatasetMeta>,
    ) -> Result<u64> {
        let header = Header {
            container: container.to_string(),
            elem: T::ELEM.name().to_string(),
            model,
            dataset,
            tensors: self.entries,
        };
        let header_json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;

        let mut bytes = Vec::with_capacity(16 + header_json.len() + self.offset as usize);
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        for tensor in &self.tensors {
            match tensor {
                TensorData::Float(m) => {
                    for &v in m.data() {
                        v.write_le(&mut bytes);
                    }
                }
                TensorData::U32(values) => {
                    for v in *values {
                        bytes.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        atomic_write(path, &bytes)?;
        Ok(bytes.len() as u64)
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parsed container: header plus the raw payload, with every manifest entry
/// validated against the actual byte counts.
struct Container {
    header: Header,
    payload: Vec<u8>,
}

impl Container {
    fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 {
            return Err(Error::Format(format!(
                "file too short: {} bytes",
                bytes.len()
            )));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic, not a GLRA container".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version}, expected {VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if 16 + header_len > bytes.len() {
            return Err(Error::Format(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            )));
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
            .map_err(|e| Error::Format(format!("bad header JSON: {e}")))?;
        let payload = bytes[16 + header_len..].to_vec();

        // Offsets must be contiguous from zero and cover the payload exactly.
        let mut expected_offset = 0u64;
        for entry in &header.tensors {
            if entry.offset != expected_offset {
                return Err(Error::Format(format!(
                    "tensor {} at offset {}, expected {expected_offset}",
                    entry.name, entry.offset
                )));
            }
            let elem_bytes: u64 = match entry.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                "u32" => 4,
                other => return Err(Error::Format(format!("unknown dtype {other}"))),
            };
            let count: u64 = entry.shape.iter().map(|&d| d as u64).product();
            if count * elem_bytes != entry.byte_len {
                return Err(Error::Format(format!(
                    "tensor {}: shape {:?} disagrees with byte length {}",
                    entry.name, entry.shape, entry.byte_len
                )));
            }
            expected_offset += entry.byte_len;
        }
        if expected_offset != payload.len() as u64 {
            return Err(Error::Format(format!(
                "payload holds {} bytes, manifest expects {expected_offset}",
                payload.len()
            )));
        }
        Ok(Container { header, payload })
    }

    fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    fn float_tensor<T: Scalar>(&self, name: &str) -> Result<DenseMatrix<T>> {
        let entry = self.entry(name)?;
        if entry.dtype != T::ELEM.name() {
            return Err(Error::Format(format!(
                "tensor {name} has dtype {}, expected {}",
                entry.dtype,
                T::ELEM.name()
            )));
        }
        if entry.shape.len() != 2 {
            return Err(Error::Format(format!("tensor {name} is not 2-D")));
        }
        let (rows, cols) = (entry.shape[0], entry.shape[1]);
        let start = entry.offset as usize;
        let data: Vec<T> = self.payload[start..start + entry.byte_len as usize]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        DenseMatrix::new(rows, cols, data)
    }

    fn u32_tensor(&self, name: &str) -> Result<Vec<u32>> {
        let entry = self.entry(name)?;
        if entry.dtype != "u32" {
            return Err(Error::Format(format!(
                "tensor {name} has dtype {}, expected u32",
                entry.dtype
            )));
        }
        let start = entry.offset as usize;
        Ok(self.payload[start..start + entry.byte_len as usize]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// What a file holds, readable without committing to an element type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilePeek {
    pub container: String,
    pub elem: ElemType,
    pub merged: bool,
}

pub fn peek(path: &Path) -> Result<FilePeek> {
    let c = Container::read(path)?;
    let elem = match c.header.elem.as_str() {
        "f32" => ElemType::F32,
        "f64" => ElemType::F64,
        other => return Err(Error::Format(format!("unknown element type {other}"))),
    };
    Ok(FilePeek {
        container: c.header.container.clone(),
        elem,
        merged: c.header.model.as_ref().is_some_and(|m| m.merged),
    })
}

fn layer_tensor_name(layer: usize, field: &str) -> String {
    format!("layer{layer}.{field}")
}

/// Persist a supernet (or plain model) with every base and factor tensor,
/// optionally carrying its per-layer search spaces. Returns bytes written.
pub fn save_model<T: Scalar>(
    model: &ToyModel<T>,
    spaces: Option<&[LayerSearchSpace]>,
    path: &Path,
) -> Result<u64> {
    let mut writer = ContainerWriter::new();
    let mut biases = Vec::with_capacity(model.n_layers());
    for (i, layer) in model.layers().iter().enumerate() {
        writer.push_float(layer_tensor_name(i, "w0"), layer.w0());
        if let Some(b0) = layer.b0() {
            writer.push_float(layer_tensor_name(i, "b0"), b0);
        }
        biases.push(layer.b0().is_some());
        for slot in FACTOR_SLOTS {
            writer.push_float(layer_tensor_name(i, slot.name()), layer.factor(slot));
        }
    }
    let header = ModelHeader {
        kind: model.kind(),
        merged: false,
        dims: model.dims().to_vec(),
        labels: model.labels().to_vec(),
        r_max: model.layer(0).r_max(),
        spaces: spaces.map(<[LayerSearchSpace]>::to_vec),
        biases,
    };
    writer.write(path, "model", Some(header), None)
}

/// Load a supernet or plain model saved by [`save_model`].
pub fn load_model<T: Scalar>(path: &Path) -> Result<(ToyModel<T>, Option<Vec<LayerSearchSpace>>)> {
    let c = Container::read(path)?;
    let model_header = c
        .header
        .model
        .as_ref()
        .ok_or_else(|| Error::Format("not a model container".into()))?;
    if c.header.container != "model" || model_header.merged {
        return Err(Error::Format(format!(
            "expected an unmerged model container, found {} (merged: {})",
            c.header.container, model_header.merged
        )));
    }
    let shapes = layer_shapes(model_header.kind, &model_header.dims)?;
    if model_header.biases.len() != shapes.len() {
        return Err(Error::Format("bias flags disagree with layer count".into()));
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for (i, _) in shapes.iter().enumerate() {
        let w0 = c.float_tensor::<T>(&layer_tensor_name(i, "w0"))?;
        let b0 = if model_header.biases[i] {
            Some(c.float_tensor::<T>(&layer_tensor_name(i, "b0"))?)
        } else {
            None
        };
        let factors: [DenseMatrix<T>; 8] = {
            let mut v = Vec::with_capacity(8);
            for slot in FACTOR_SLOTS {
                v.push(c.float_tensor::<T>(&layer_tensor_name(i, slot.name()))?);
            }
            v.try_into().expect("eight factor slots")
        };
        layers.push(GloraLinear::from_parts(
            w0,
            b0,
            model_header.r_max,
            factors,
        )?);
    }
    let model = ToyModel::from_parts(
        model_header.kind,
        model_header.dims.clone(),
        layers,
        model_header.labels.clone(),
    )?;
    Ok((model, model_header.spaces.clone()))
}

/// Persist a merged model: exactly one weight (and optional bias) per layer.
pub fn save_merged<T: Scalar>(model: &MergedModel<T>, path: &Path) -> Result<u64> {
    let mut writer = ContainerWriter::new();
    let mut biases = Vec::with_capacity(model.n_layers());
    for (i, layer) in model.layers().iter().enumerate() {
        writer.push_float(layer_tensor_name(i, "w_uni"), &layer.w_uni);
        if let Some(b) = &layer.b_uni {
            writer.push_float(layer_tensor_name(i, "b_uni"), b);
        }
        biases.push(layer.b_uni.is_some());
    }
    let header = ModelHeader {
        kind: model.kind(),
        merged: true,
        dims: model.dims().to_vec(),
        labels: model.labels().to_vec(),
        r_max: 0,
        spaces: None,
        biases,
    };
    writer.write(path, "model", Some(header), None)
}

pub fn load_merged<T: Scalar>(path: &Path) -> Result<MergedModel<T>> {
    let c = Container::read(path)?;
    let model_header = c
        .header
        .model
        .as_ref()
        .ok_or_else(|| Error::Format("not a model container".into()))?;
    if !model_header.merged {
        return Err(Error::Format("expected a merged model container".into()));
    }
    let shapes = layer_shapes(model_header.kind, &model_header.dims)?;
    if model_header.biases.len() != shapes.len() {
        return Err(Error::Format("bias flags disagree with layer count".into()));
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for (i, _) in shapes.iter().enumerate() {
        let w_uni = c.float_tensor::<T>(&layer_tensor_name(i, "w_uni"))?;
        let b_uni = if model_header.biases[i] {
            Some(c.float_tensor::<T>(&layer_tensor_name(i, "b_uni"))?)
        } else {
            None
        };
        layers.push(MergedLinear { w_uni, b_uni });
    }
    MergedModel::from_parts(
        model_header.kind,
        model_header.dims.clone(),
        layers,
        model_header.labels.clone(),
    )
}

/// Persist a dataset: features, targets (float matrix or u32 labels, kept as
/// distinct element types), and split tags.
pub fn save_dataset<T: Scalar>(ds: &Dataset<T>, path: &Path) -> Result<u64> {
    ds.validate()?;
    let split_tags: Vec<u32> = ds
        .split
        .iter()
        .map(|s| match s {
            Split::Train => 0u32,
            Split::Val => 1,
            Split::Test => 2,
        })
        .collect();
    let class_meta: Vec<u32> = match &ds.targets {
        Targets::Regression(_) => Vec::new(),
        Targets::Classification { n_classes, .. } => vec![*n_classes as u32],
    };

    let mut writer = ContainerWriter::new();
    writer.push_float("features".into(), &ds.features);
    match &ds.targets {
        Targets::Regression(t) => writer.push_float("targets".into(), t),
        Targets::Classification { labels, .. } => {
            writer.push_u32("labels".into(), labels);
            writer.push_u32("n_classes".into(), &class_meta);
        }
    }
    writer.push_u32("splits".into(), &split_tags);
    writer.write(path, "dataset", None, Some(ds.meta.clone()))
}

pub fn load_dataset<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    let c = Container::read(path)?;
    if c.header.container != "dataset" {
        return Err(Error::Format(format!(
            "expected a dataset container, found {}",
            c.header.container
        )));
    }
    let meta = c
        .header
        .dataset
        .clone()
        .ok_or_else(|| Error::Format("dataset container missing metadata".into()))?;
    let features = c.float_tensor::<T>("features")?;
    let targets = match meta.task {
        crate::synth::TaskKind::Regression => Targets::Regression(c.float_tensor::<T>("targets")?),
        crate::synth::TaskKind::Classification => {
            let labels = c.u32_tensor("labels")?;
            let n_classes = c
                .u32_tensor("n_classes")?
                .first()
                .copied()
                .ok_or_else(|| Error::Format("empty n_classes tensor".into()))?
                as usize;
            Targets::Classification { labels, n_classes }
        }
    };
    let split = c
        .u32_tensor("splits")?
        .into_iter()
        .map(|v| match v {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split tag {other}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        features,
        targets,
        split,
        meta,
    };
    ds.validate()?;
    Ok(ds)
}

/// Where a searched configuration came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub generation: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fitness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param_count: Option<usize>,
}

/// Human-readable JSON document holding a per-layer configuration, its
/// provenance, and (for search outputs) the per-generation history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub layers: Vec<LayerConfig>,
    pub provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history: Option<Vec<GenerationStat>>,
}

impl ConfigDocument {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers.clone(),
        }
    }
}

pub fn save_config_document(doc: &ConfigDocument, path: &Path) -> Result<u64> {
    let mut bytes = serde_json::to_vec_pretty(doc).map_err(|e| Error::Format(e.to_string()))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_config_document(path: &Path) -> Result<ConfigDocument> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("bad config JSON: {e}")))
}
