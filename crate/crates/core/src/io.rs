//! Bit-exact container I/O for adapter bundles and checkpoints.
//!
//! File layout: 8-byte little-endian header length, a UTF-8 JSON header
//! mapping tensor names to `{"dtype":"F32","shape":[...],"data_offsets":
//! [begin,end]}` (offsets relative to the end of the header) plus a
//! `"__metadata__"` string map, then the raw payload. Tensor names and
//! metadata keys are written in lexicographic order so identical inputs
//! produce byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{AdapterBundle, AdapterLayerEntry, LayerRole, LoraFactors, Provenance};
use crate::tensor::Tensor2D;

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// An in-memory named tensor; files store 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }
}

/// Named-tensor container with a string metadata map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    pub tensors: BTreeMap<String, NamedTensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "tensor shape/data mismatch");
        self.tensors.insert(
            name.into(),
            NamedTensor {
                shape,
                data: data.iter().map(|&x| x as f32).collect(),
            },
        );
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Structural(format!("tensor `{name}` not found in container")))
    }

    pub fn tensor_2d(&self, name: &str) -> Result<Tensor2D> {
        let t = self.tensor(name)?;
        if t.shape.len() != 2 {
            return Err(Error::Validation(format!(
                "tensor `{name}` has shape {:?}, expected 2-D",
                t.shape
            )));
        }
        Tensor2D::new(t.shape[0], t.shape[1], t.to_f64())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Structural(format!("metadata key `{key}` missing")))
    }

    /// Serialize deterministically.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header: BTreeMap<String, serde_json::Value> = BTreeMap::new();
        if !self.metadata.is_empty() {
            header.insert(
                "__metadata__".into(),
                serde_json::to_value(&self.metadata).unwrap(),
            );
        }
        let mut offset = 0usize;
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let nbytes = t.data.len() * 4;
            header.insert(
                name.clone(),
                serde_json::to_value(HeaderEntry {
                    dtype: "F32".into(),
                    shape: t.shape.clone(),
                    data_offsets: [offset, offset + nbytes],
                })
                .unwrap(),
            );
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += nbytes;
        }
        let header_json = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::with_capacity(8 + header_json.len() + payload.len());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Parse {
                offset: 0,
                detail: "file shorter than the 8-byte header length".into(),
            });
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let data_start = 8usize.checked_add(header_len).ok_or(Error::Parse {
            offset: 0,
            detail: "header length overflows".into(),
        })?;
        if bytes.len() < data_start {
            return Err(Error::Parse {
                offset: 8,
                detail: format!(
                    "declared header length {header_len} exceeds file size {}",
                    bytes.len()
                ),
            });
        }
        let header: BTreeMap<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..data_start]).map_err(|e| Error::Parse {
                offset: 8,
                detail: format!("header JSON: {e}"),
            })?;
        let payload = &bytes[data_start..];

        let mut metadata = BTreeMap::new();
        let mut entries: Vec<(String, HeaderEntry)> = Vec::new();
        for (name, value) in header {
            if name == "__metadata__" {
                metadata = serde_json::from_value(value).map_err(|e| Error::Parse {
                    offset: 8,
                    detail: format!("__metadata__: {e}"),
                })?;
                continue;
            }
            let entry: HeaderEntry = serde_json::from_value(value).map_err(|e| Error::Parse {
                offset: 8,
                detail: format!("tensor `{name}`: {e}"),
            })?;
            entries.push((name, entry));
        }

        // Ranges must tile the payload exactly: in-bounds, non-overlapping,
        // contiguous.
        let mut ranges: Vec<(usize, usize, &str)> = entries
            .iter()
            .map(|(n, e)| (e.data_offsets[0], e.data_offsets[1], n.as_str()))
            .collect();
        ranges.sort();
        let mut cursor = 0usize;
        for (begin, end, name) in &ranges {
            if *begin != cursor {
                return Err(Error::Parse {
                    offset: data_start + cursor,
                    detail: format!(
                        "tensor `{name}` byte range [{begin},{end}) overlaps or leaves a gap"
                    ),
                });
            }
            if end < begin {
                return Err(Error::Parse {
                    offset: data_start + begin,
                    detail: format!("tensor `{name}` has negative-length range"),
                });
            }
            cursor = *end;
        }
        if cursor != payload.len() {
            return Err(Error::Parse {
                offset: data_start + cursor,
                detail: format!(
                    "payload is {} bytes but ranges cover {cursor}",
                    payload.len()
                ),
            });
        }

        let mut tensors = BTreeMap::new();
        for (name, e) in entries {
            if e.dtype != "F32" {
                return Err(Error::Validation(format!(
                    "tensor `{name}`: unsupported dtype {}",
                    e.dtype
                )));
            }
            let numel: usize = e.shape.iter().product();
            let nbytes = e.data_offsets[1] - e.data_offsets[0];
            if nbytes != numel * 4 {
                return Err(Error::Validation(format!(
                    "tensor `{name}`: {nbytes} bytes for {numel} F32 elements"
                )));
            }
            let raw = &payload[e.data_offsets[0]..e.data_offsets[1]];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(
                name,
                NamedTensor {
                    shape: e.shape,
                    data,
                },
            );
        }
        Ok(TensorContainer { tensors, metadata })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}

// ---------------------------------------------------------------------------
// Adapter bundle <-> container
// ---------------------------------------------------------------------------

/// Serialize a bundle: tensors `<layer>.lora_A` / `<layer>.lora_B` plus
/// rank/alpha, roles, ordering, and provenance in metadata.
pub fn bundle_to_container(bundle: &AdapterBundle) -> Result<TensorContainer> {
    bundle.validate()?;
    let mut c = TensorContainer::new();
    c.metadata
        .insert("format_version".into(), FORMAT_VERSION.into());
    c.metadata
        .insert("base_model_id".into(), bundle.base_model_id.clone());
    if let Some(first) = bundle.entries.first() {
        c.metadata
            .insert("total_layers".into(), first.total_layers.to_string());
    }
    if let Some(p) = &bundle.provenance {
        c.metadata.insert("provenance.domain".into(), p.domain.clone());
        c.metadata.insert("provenance.seed".into(), p.seed.to_string());
        c.metadata
            .insert("provenance.corpus_hash".into(), p.corpus_hash.clone());
    }
    for (pos, e) in bundle.entries.iter().enumerate() {
        let f = &e.factors;
        c.insert_f64(
            format!("{}.lora_A", e.name),
            vec![f.a.rows, f.a.cols],
            &f.a.data,
        );
        c.insert_f64(
            format!("{}.lora_B", e.name),
            vec![f.b.rows, f.b.cols],
            &f.b.data,
        );
        let m = &mut c.metadata;
        m.insert(format!("layer.{}.index", e.name), e.layer_index.to_string());
        m.insert(format!("layer.{}.role", e.name), e.role.as_str().into());
        m.insert(format!("layer.{}.rank", e.name), f.rank.to_string());
        m.insert(format!("layer.{}.alpha", e.name), format!("{}", f.alpha));
        m.insert(format!("layer.{}.pos", e.name), pos.to_string());
    }
    Ok(c)
}

pub fn container_to_bundle(c: &TensorContainer) -> Result<AdapterBundle> {
    let base_model_id = c.meta("base_model_id")?.to_string();
    let total_layers: usize = c
        .metadata
        .get("total_layers")
        .map(|s| s.parse())
        .transpose()
        .map_err(|e| Error::Validation(format!("total_layers: {e}")))?
        .unwrap_or(0);
    let provenance = match c.metadata.get("provenance.domain") {
        Some(domain) => Some(Provenance {
            domain: domain.clone(),
            seed: c
                .meta("provenance.seed")?
                .parse()
                .map_err(|e| Error::Validation(format!("provenance.seed: {e}")))?,
            corpus_hash: c.meta("provenance.corpus_hash")?.to_string(),
        }),
        None => None,
    };

    // Collect layer names from `<name>.lora_A` tensors and require partners.
    let mut names: Vec<String> = Vec::new();
    for key in c.tensors.keys() {
        if let Some(stem) = key.strip_suffix(".lora_A") {
            names.push(stem.to_string());
        } else if !key.ends_with(".lora_B") {
            return Err(Error::Structural(format!(
                "tensor `{key}` is neither a lora_A nor a lora_B factor"
            )));
        }
    }
    for key in c.tensors.keys() {
        if let Some(stem) = key.strip_suffix(".lora_B") {
            if !names.iter().any(|n| n == stem) {
                return Err(Error::Structural(format!(
                    "layer `{stem}` has lora_B but no lora_A partner"
                )));
            }
        }
    }

    let mut entries: Vec<(usize, AdapterLayerEntry)> = Vec::new();
    for name in names {
        let a = c
            .tensor_2d(&format!("{name}.lora_A"))
            .map_err(|_| Error::Structural(format!("layer `{name}` missing lora_A tensor")))?;
        let b = c.tensor_2d(&format!("{name}.lora_B")).map_err(|_| {
            Error::Structural(format!("layer `{name}` has lora_A but no lora_B partner"))
        })?;
        let rank: usize = c
            .meta(&format!("layer.{name}.rank"))?
            .parse()
            .map_err(|e| Error::Validation(format!("layer.{name}.rank: {e}")))?;
        let alpha: f64 = c
            .meta(&format!("layer.{name}.alpha"))?
            .parse()
            .map_err(|e| Error::Validation(format!("layer.{name}.alpha: {e}")))?;
        let layer_index: usize = c
            .meta(&format!("layer.{name}.index"))?
            .parse()
            .map_err(|e| Error::Validation(format!("layer.{name}.index: {e}")))?;
        let role = LayerRole::parse(c.meta(&format!("layer.{name}.role"))?)?;
        let pos: usize = c
            .meta(&format!("layer.{name}.pos"))?
            .parse()
            .map_err(|e| Error::Validation(format!("layer.{name}.pos: {e}")))?;
        let factors = LoraFactors::new(b, a, rank, alpha)?;
        entries.push((
            pos,
            AdapterLayerEntry {
                name,
                layer_index,
                total_layers,
                role,
                factors,
            },
        ));
    }
    entries.sort_by_key(|(pos, _)| *pos);
    let bundle = AdapterBundle {
        entries: entries.into_iter().map(|(_, e)| e).collect(),
        base_model_id,
        provenance,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_bundle(bundle: &AdapterBundle, path: &Path) -> Result<()> {
    bundle_to_container(bundle)?.write(path)
}

pub fn load_bundle(path: &Path) -> Result<AdapterBundle> {
    container_to_bundle(&TensorContainer::read(path)?)
}
