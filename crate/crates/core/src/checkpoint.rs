//! Model checkpoints: one line of JSON manifest, a newline, then the
//! little-endian tensor payloads at the offsets the manifest lists.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, LayerSpec, Model, Params};
use crate::quantizer::{quantized_layers, QuantScheme};
use crate::tensor::Tensor;

const FORMAT: &str = "prunix-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I32,
    U8,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub stage: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub regularized_layers: usize,
    pub layers: Vec<LayerSpec>,
    pub level_ranges: Option<Vec<f32>>,
    pub scheme: Option<QuantScheme>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub model: Model,
    /// Present once the model has been quantized; level indices are then
    /// stored alongside the float weights.
    pub scheme: Option<QuantScheme>,
}

struct Payload {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl Payload {
    fn push(&mut self, name: String, dtype: DType, shape: &[usize], raw: impl IntoIterator<Item = u8>) {
        let offset = self.bytes.len();
        self.bytes.extend(raw);
        self.entries.push(TensorEntry {
            name,
            dtype,
            shape: shape.to_vec(),
            offset,
        });
    }
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, model: Model, scheme: Option<QuantScheme>) -> Self {
        Self {
            stage: stage.into(),
            model,
            scheme,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Payload {
            bytes: Vec::new(),
            entries: Vec::new(),
        };
        let levels = match &self.scheme {
            Some(s) => Some(quantized_layers(&self.model, s)?),
            None => None,
        };
        for (i, p) in self.model.params().enumerate() {
            let f32s = |t: &Tensor| t.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>();
            payload.push(format!("w{i}.weight"), DType::F32, p.weight.shape(), f32s(&p.weight));
            payload.push(format!("w{i}.bias"), DType::F32, p.bias.shape(), f32s(&p.bias));
            payload.push(format!("w{i}.mask"), DType::U8, p.weight.shape(), p.mask.iter().map(|&m| m as u8));
            if let Some(levels) = &levels {
                let q = &levels[i];
                let raw = q.indices.iter().flat_map(|k| k.to_le_bytes());
                payload.push(format!("w{i}.levels"), DType::I32, &q.shape, raw);
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            stage: self.stage.clone(),
            input_shape: self.model.input_shape(),
            num_classes: self.model.num_classes(),
            regularized_layers: self.model.regularized_layers(),
            layers: self.model.layers().iter().map(|l| l.spec).collect(),
            level_ranges: self.model.level_ranges().map(<[f32]>::to_vec),
            scheme: self.scheme.clone(),
            tensors: payload.entries,
        };
        let mut out = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.push(b'\n');
        out.extend(payload.bytes);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing manifest line".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            )));
        }
        let payload = &bytes[split + 1..];
        let raw = |name: &str, dtype: DType| -> Result<(&[u8], &[usize])> {
            let e = manifest
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if e.dtype != dtype {
                return Err(Error::Checkpoint(format!("tensor {name} has dtype {:?}", e.dtype)));
            }
            let len = e.shape.iter().product::<usize>() * dtype.width();
            let end = e.offset.checked_add(len).filter(|&end| end <= payload.len());
            let end = end.ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past the payload")))?;
            Ok((&payload[e.offset..end], &e.shape))
        };
        let f32_tensor = |name: &str| -> Result<Tensor> {
            let (b, shape) = raw(name, DType::F32)?;
            let data = b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::new(shape.to_vec(), data)
        };
        let mut layers = Vec::with_capacity(manifest.layers.len());
        let mut ordinal = 0;
        for spec in &manifest.layers {
            let params = if spec.has_params() {
                let weight = f32_tensor(&format!("w{ordinal}.weight"))?;
                let bias = f32_tensor(&format!("w{ordinal}.bias"))?;
                let (m, _) = raw(&format!("w{ordinal}.mask"), DType::U8)?;
                let mask = m.iter().map(|&b| b != 0).collect();
                ordinal += 1;
                Some(Params { weight, bias, mask })
            } else {
                None
            };
            layers.push(Layer { spec: *spec, params });
        }
        let model = Model::from_parts(
            manifest.input_shape,
            layers,
            manifest.num_classes,
            manifest.regularized_layers,
            manifest.level_ranges.clone(),
        )?;
        if let Some(scheme) = &manifest.scheme {
            for (i, q) in quantized_layers(&model, scheme)?.iter().enumerate() {
                let (bytes, _) = raw(&format!("w{i}.levels"), DType::I32)?;
                let stored: Vec<i32> = bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                if stored != q.indices {
                    return Err(Error::Checkpoint(format!("w{i}.levels disagrees with stored weights")));
                }
            }
        }
        Ok(Self {
            stage: manifest.stage,
            model,
            scheme: manifest.scheme,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
