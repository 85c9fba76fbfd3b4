//! Binary container for every matrix the pipeline persists.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! [8 bytes  magic "GATOMS01"]
//! [u32      metadata length in bytes]
//! [metadata UTF-8 JSON]
//! [payload  f64 values]
//! ```
//!
//! The metadata declares the payload kind, the named tensors packed into the
//! payload (in order), and optional registry/document-id/attribute blocks.
//! The JSON is produced from ordered structures only, so identical logical
//! content always serializes to identical bytes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GATOMS01";
pub const DTYPE_F64: &str = "f64";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Gradients,
    KfacStats,
    Basis,
    Projected,
    Dictionary,
    Codes,
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PayloadKind::Gradients => "gradients",
            PayloadKind::KfacStats => "kfac_stats",
            PayloadKind::Basis => "basis",
            PayloadKind::Projected => "projected",
            PayloadKind::Dictionary => "dictionary",
            PayloadKind::Codes => "codes",
        };
        f.write_str(s)
    }
}

/// One linear module inside the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub name: String,
    pub out_dim: usize,
    pub in_dim: usize,
    pub offset: usize,
}

impl ModuleSpec {
    pub fn numel(&self) -> usize {
        self.out_dim * self.in_dim
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// Ordered list of modules describing how a length-`d` vector is laid out.
///
/// Each module occupies `out_dim * in_dim` consecutive entries, flattened
/// row-major over `(out, in)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleRegistry {
    pub modules: Vec<ModuleSpec>,
    pub d: usize,
}

impl ModuleRegistry {
    /// Builds a registry with contiguous offsets from `(name, out_dim, in_dim)`.
    pub fn from_shapes<S: Into<String>>(
        shapes: impl IntoIterator<Item = (S, usize, usize)>,
    ) -> Result<Self> {
        let mut offset = 0;
        let mut modules = Vec::new();
        for (name, out_dim, in_dim) in shapes {
            modules.push(ModuleSpec {
                name: name.into(),
                out_dim,
                in_dim,
                offset,
            });
            offset += out_dim * in_dim;
        }
        let reg = ModuleRegistry { modules, d: offset };
        reg.validate()?;
        Ok(reg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modules.is_empty() {
            return Err(Error::Layout("registry has no modules".into()));
        }
        let mut names = HashSet::new();
        let mut expected = 0usize;
        for m in &self.modules {
            if m.out_dim == 0 || m.in_dim == 0 {
                return Err(Error::Layout(format!(
                    "module {:?} has a zero dimension ({}x{})",
                    m.name, m.out_dim, m.in_dim
                )));
            }
            if !names.insert(m.name.as_str()) {
                return Err(Error::Layout(format!("duplicate module name {:?}", m.name)));
            }
            if m.offset != expected {
                return Err(Error::Layout(format!(
                    "module {:?} starts at offset {} but the previous module ends at {}",
                    m.name, m.offset, expected
                )));
            }
            expected += m.numel();
        }
        if expected != self.d {
            return Err(Error::Layout(format!(
                "modules cover {} parameters but registry declares d = {}",
                expected, self.d
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn module(&self, name: &str) -> Option<&ModuleSpec> {
        self.modules.iter().find(|m| m.name == name)
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("registry serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Header of a tensor file; serialized verbatim as the metadata JSON block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorFileHeader {
    pub payload_kind: PayloadKind,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub byte_length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<ModuleRegistry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, Value>,
}

impl TensorFileHeader {
    pub fn new(payload_kind: PayloadKind) -> Self {
        TensorFileHeader {
            payload_kind,
            dtype: DTYPE_F64.to_string(),
            tensors: Vec::new(),
            byte_length: 0,
            registry: None,
            doc_ids: None,
            attrs: BTreeMap::new(),
        }
    }

    /// Appends a tensor declaration and grows `byte_length` to match.
    pub fn with_tensor(mut self, name: impl Into<String>, shape: Vec<usize>) -> Self {
        let entry = TensorEntry {
            name: name.into(),
            shape,
        };
        self.byte_length += 8 * entry.numel() as u64;
        self.tensors.push(entry);
        self
    }

    pub fn with_registry(mut self, registry: ModuleRegistry) -> Self {
        self.registry = Some(registry);
        self
    }

    pub fn with_doc_ids(mut self, doc_ids: Vec<String>) -> Self {
        self.doc_ids = Some(doc_ids);
        self
    }

    pub fn with_attr(mut self, key: impl Into<String>, value: impl Into<Value>) -> Self {
        self.attrs.insert(key.into(), value.into());
        self
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(TensorEntry::numel).sum()
    }

    fn check_consistent(&self, payload_len: usize) -> Result<()> {
        if self.dtype != DTYPE_F64 {
            return Err(Error::Shape(format!("unsupported dtype {:?}", self.dtype)));
        }
        let numel = self.numel();
        if self.byte_length != 8 * numel as u64 {
            return Err(Error::Shape(format!(
                "declared tensors hold {} values but byte_length is {}",
                numel, self.byte_length
            )));
        }
        if numel != payload_len {
            return Err(Error::Shape(format!(
                "declared tensors hold {} values but payload has {}",
                numel, payload_len
            )));
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: PayloadKind) -> Result<()> {
        if self.payload_kind != kind {
            return Err(Error::Kind {
                expected: kind.to_string(),
                found: self.payload_kind.to_string(),
            });
        }
        Ok(())
    }

    pub fn attr(&self, key: &str) -> Result<&Value> {
        self.attrs
            .get(key)
            .ok_or_else(|| Error::Parse(format!("missing attribute {key:?}")))
    }

    pub fn attr_f64(&self, key: &str) -> Result<f64> {
        self.attr(key)?
            .as_f64()
            .ok_or_else(|| Error::Parse(format!("attribute {key:?} is not a number")))
    }

    pub fn attr_usize(&self, key: &str) -> Result<usize> {
        self.attr(key)?
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Error::Parse(format!("attribute {key:?} is not an integer")))
    }

    pub fn attr_str(&self, key: &str) -> Result<&str> {
        self.attr(key)?
            .as_str()
            .ok_or_else(|| Error::Parse(format!("attribute {key:?} is not a string")))
    }

    pub fn require_registry(&self) -> Result<&ModuleRegistry> {
        self.registry
            .as_ref()
            .ok_or_else(|| Error::Parse("metadata has no module registry".into()))
    }
}

/// Serializes a header and payload to the on-disk byte layout.
pub fn encode(header: &TensorFileHeader, payload: &[f64]) -> Result<Vec<u8>> {
    header.check_consistent(payload.len())?;
    let meta = serde_json::to_vec(header).map_err(|e| Error::Parse(e.to_string()))?;
    let meta_len = u32::try_from(meta.len())
        .map_err(|_| Error::Shape(format!("metadata of {} bytes is too large", meta.len())))?;
    let mut out = Vec::with_capacity(12 + meta.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(&meta);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(TensorFileHeader, Vec<f64>)> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::Corruption(format!(
            "file holds {} bytes, shorter than the magic tag",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..8]),
            std::str::from_utf8(MAGIC).unwrap()
        )));
    }
    if bytes.len() < 12 {
        return Err(Error::Corruption("truncated metadata length".into()));
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let meta_end = 12 + meta_len;
    if bytes.len() < meta_end {
        return Err(Error::Corruption(format!(
            "metadata declares {} bytes but only {} remain",
            meta_len,
            bytes.len() - 12
        )));
    }
    let header: TensorFileHeader =
        serde_json::from_slice(&bytes[12..meta_end]).map_err(|e| Error::Parse(e.to_string()))?;
    let body = &bytes[meta_end..];
    if body.len() as u64 != header.byte_length {
        return Err(Error::Corruption(format!(
            "payload holds {} bytes but header declares {}",
            body.len(),
            header.byte_length
        )));
    }
    if body.len() % 8 != 0 {
        return Err(Error::Corruption(format!(
            "payload length {} is not a multiple of 8",
            body.len()
        )));
    }
    let payload: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    header.check_consistent(payload.len())?;
    Ok((header, payload))
}

pub fn write_tensor_file(path: &Path, header: &TensorFileHeader, payload: &[f64]) -> Result<()> {
    let bytes = encode(header, payload)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<(TensorFileHeader, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Decoded file with by-name access to the packed tensors.
#[derive(Debug, Clone)]
pub struct TensorBundle {
    pub header: TensorFileHeader,
    pub payload: Vec<f64>,
}

impl TensorBundle {
    pub fn read(path: &Path) -> Result<Self> {
        let (header, payload) = read_tensor_file(path)?;
        Ok(TensorBundle { header, payload })
    }

    pub fn read_kind(path: &Path, kind: PayloadKind) -> Result<Self> {
        let bundle = Self::read(path)?;
        bundle.header.expect_kind(kind)?;
        Ok(bundle)
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let mut start = 0;
        for t in &self.header.tensors {
            let n = t.numel();
            if t.name == name {
                return Ok((&t.shape, &self.payload[start..start + n]));
            }
            start += n;
        }
        Err(Error::Parse(format!("tensor {name:?} not declared")))
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let (shape, data) = self.tensor(name)?;
        if shape.len() != 1 {
            return Err(Error::Shape(format!(
                "tensor {name:?} has shape {shape:?}, expected a vector"
            )));
        }
        Ok(data.to_vec())
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let (shape, data) = self.tensor(name)?;
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "tensor {name:?} has shape {shape:?}, expected a matrix"
            )));
        }
        Array2::from_shape_vec((shape[0], shape[1]), data.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))
    }
}

/// Appends a matrix in row-major order regardless of its memory layout.
pub(crate) fn push_matrix(payload: &mut Vec<f64>, m: ArrayView2<'_, f64>) {
    payload.extend(m.iter().copied());
}

/// Per-document raw gradients plus the layout of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub registry: ModuleRegistry,
    pub values: Array2<f64>,
    pub doc_ids: Vec<String>,
}

impl GradientSet {
    pub fn new(
        registry: ModuleRegistry,
        values: Array2<f64>,
        doc_ids: Vec<String>,
    ) -> Result<Self> {
        let gs = GradientSet {
            registry,
            values,
            doc_ids,
        };
        gs.validate()?;
        Ok(gs)
    }

    pub fn n_docs(&self) -> usize {
        self.values.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        validate_gradient_set(self)
    }

    pub fn index_of(&self, doc_id: &str) -> Option<usize> {
        self.doc_ids.iter().position(|d| d == doc_id)
    }

    pub fn header(&self) -> TensorFileHeader {
        TensorFileHeader::new(PayloadKind::Gradients)
            .with_tensor("gradients", vec![self.values.nrows(), self.values.ncols()])
            .with_registry(self.registry.clone())
            .with_doc_ids(self.doc_ids.clone())
            .with_attr("reduction", "sum")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.write_with(path, self.header())
    }

    /// Writes with a caller-supplied header (extra attributes), which must
    /// still describe this set.
    pub fn write_with(&self, path: &Path, header: TensorFileHeader) -> Result<()> {
        let mut payload = Vec::with_capacity(self.values.len());
        push_matrix(&mut payload, self.values.view());
        write_tensor_file(path, &header, &payload)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bundle = TensorBundle::read_kind(path, PayloadKind::Gradients)?;
        Self::from_bundle(&bundle)
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        bundle.header.expect_kind(PayloadKind::Gradients)?;
        let registry = bundle.header.require_registry()?.clone();
        let values = bundle.matrix("gradients")?;
        let doc_ids = bundle
            .header
            .doc_ids
            .clone()
            .ok_or_else(|| Error::Parse("gradient file has no doc_ids".into()))?;
        GradientSet::new(registry, values, doc_ids)
    }
}

/// Checks every registry and gradient-set invariant, reporting the first
/// violation.
pub fn validate_gradient_set(gs: &GradientSet) -> Result<()> {
    gs.registry.validate()?;
    if gs.values.ncols() != gs.registry.d {
        return Err(Error::Layout(format!(
            "gradient rows have {} columns but registry d = {}",
            gs.values.ncols(),
            gs.registry.d
        )));
    }
    if gs.doc_ids.len() != gs.values.nrows() {
        return Err(Error::Shape(format!(
            "{} doc ids for {} gradient rows",
            gs.doc_ids.len(),
            gs.values.nrows()
        )));
    }
    let mut seen = HashSet::new();
    for id in &gs.doc_ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateDocId(id.clone()));
        }
    }
    for (i, row) in gs.values.outer_iter().enumerate() {
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient row {} ({}) column {}",
                i, gs.doc_ids[i], j
            )));
        }
    }
    Ok(())
}
