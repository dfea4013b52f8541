//! File formats: the SAEM tensor container, permutation documents,
//! CSV reports, and target-index files.
//!
//! # SAEM container
//!
//! ```text
//! bytes 0..4    magic "SAEM"
//! bytes 4..8    version, u32 little-endian, = 1
//! bytes 8..16   header_len, u64 little-endian
//! bytes 16..    UTF-8 JSON header of exactly header_len bytes
//! rest          payload: raw little-endian tensor data, row-major
//! ```
//!
//! The header is `{"tensors": {name: {"dtype": "f32"|"f64", "shape":
//! [..], "offset": .., "nbytes": ..}}, "meta": {"layer_id": ..,
//! "folded": .., "kind": "sae"|"activations", ...}}`. Offsets are
//! relative to the payload start and may not overlap; `nbytes` must
//! equal the shape product times the element size. A `"sae"` container
//! holds exactly `w_enc [F,d]`, `b_enc [F]`, `w_dec [d,F]`, `b_dec [d]`
//! and `theta [F]`; an `"activations"` container holds one tensor
//! `data [T,n]` plus a `batch_kind` meta field (`"hidden"` or
//! `"feature"`). Everything is written as f64; f32 tensors are widened
//! to f64 on load.
//!
//! Readers never trust header-declared ranges beyond the actual file
//! bounds, and a malformed file never yields a partially built object.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::assignment::{validate_bijection, Permutation, Provenance};
use crate::error::{Error, FormatError, Result};
use crate::matching::MatchResult;
use crate::sae::{ActivationBatch, BatchKind, SaeParams};

const MAGIC: &[u8; 4] = b"SAEM";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<u64>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    layer_id: u32,
    folded: bool,
    kind: String,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: BTreeMap<String, TensorEntry>,
    meta: Meta,
}

fn dtype_size(dtype: &str) -> Result<u64> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(FormatError::MalformedHeader(format!("unknown dtype \"{other}\"")).into()),
    }
}

fn shape_product(shape: &[u64]) -> Result<u64> {
    shape.iter().try_fold(1u64, |acc, &s| {
        acc.checked_mul(s)
            .ok_or_else(|| FormatError::Shape("shape product overflows".into()).into())
    })
}

fn validate_layout(tensors: &BTreeMap<String, TensorEntry>, payload_len: u64) -> Result<()> {
    let mut ranges: Vec<(u64, u64, &str)> = Vec::with_capacity(tensors.len());
    for (name, entry) in tensors {
        let elem = dtype_size(&entry.dtype)?;
        let count = shape_product(&entry.shape)?;
        let expected = count.checked_mul(elem).ok_or_else(|| {
            Error::from(FormatError::Shape(format!("tensor \"{name}\" byte size overflows")))
        })?;
        if entry.nbytes != expected {
            return Err(FormatError::Shape(format!(
                "tensor \"{name}\": nbytes {} != shape product {} x {} bytes",
                entry.nbytes, count, elem
            ))
            .into());
        }
        let end = entry.offset.checked_add(entry.nbytes).ok_or_else(|| {
            Error::from(FormatError::OutOfBounds {
                name: name.clone(),
                offset: entry.offset,
                nbytes: entry.nbytes,
                payload: payload_len,
            })
        })?;
        if end > payload_len {
            return Err(FormatError::OutOfBounds {
                name: name.clone(),
                offset: entry.offset,
                nbytes: entry.nbytes,
                payload: payload_len,
            }
            .into());
        }
        ranges.push((entry.offset, entry.nbytes, name));
    }
    ranges.sort();
    for pair in ranges.windows(2) {
        let (off_a, len_a, name_a) = pair[0];
        let (off_b, _, name_b) = pair[1];
        if off_a + len_a > off_b {
            return Err(FormatError::Overlap(name_a.to_string(), name_b.to_string()).into());
        }
    }
    Ok(())
}

fn read_container(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    if bytes.len() < 16 {
        return Err(FormatError::MalformedHeader("file too short for preamble".into()).into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16u64
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            Error::from(FormatError::MalformedHeader(
                "header extends past end of file".into(),
            ))
        })?;
    let header_bytes = &bytes[16..header_end as usize];
    let header_str = std::str::from_utf8(header_bytes)
        .map_err(|e| FormatError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let header: Header = serde_json::from_str(header_str)
        .map_err(|e| FormatError::MalformedHeader(format!("header JSON: {e}")))?;
    let payload = bytes[header_end as usize..].to_vec();
    validate_layout(&header.tensors, payload.len() as u64)?;
    Ok((header, payload))
}

fn tensor_values(payload: &[u8], entry: &TensorEntry) -> Vec<f64> {
    let start = entry.offset as usize;
    let end = start + entry.nbytes as usize;
    let raw = &payload[start..end];
    match entry.dtype.as_str() {
        "f64" => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        "f32" => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        _ => unreachable!("dtype validated"),
    }
}

fn require_tensor<'a>(
    header: &'a Header,
    name: &str,
) -> Result<&'a TensorEntry> {
    header
        .tensors
        .get(name)
        .ok_or_else(|| FormatError::MissingTensor(name.to_string()).into())
}

fn write_container(
    path: &Path,
    tensors: Vec<(&str, Vec<u64>, &[f64])>,
    meta: Meta,
) -> Result<()> {
    let mut entries = BTreeMap::new();
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        let nbytes = (data.len() * 8) as u64;
        entries.insert(
            name.to_string(),
            TensorEntry {
                dtype: "f64".to_string(),
                shape: shape.clone(),
                offset,
                nbytes,
            },
        );
        offset += nbytes;
    }
    let header = Header { tensors: entries, meta };
    let header_json = serde_json::to_string(&header).expect("header serializes");

    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(header_json.as_bytes())?;
    for (_, _, data) in &tensors {
        let mut buf = Vec::with_capacity(data.len() * 8);
        for v in *data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf)?;
    }
    Ok(())
}

/// Writes an SAE container (all tensors stored as f64).
pub fn write_sae(sae: &SaeParams, path: impl AsRef<Path>) -> Result<()> {
    write_sae_with_meta(sae, path, &BTreeMap::new())
}

/// [`write_sae`] with extra metadata fields merged into `meta`.
pub fn write_sae_with_meta(
    sae: &SaeParams,
    path: impl AsRef<Path>,
    extra: &BTreeMap<String, Value>,
) -> Result<()> {
    let f = sae.num_features() as u64;
    let d = sae.hidden_dim() as u64;
    let meta = Meta {
        layer_id: sae.layer_id,
        folded: sae.folded,
        kind: "sae".to_string(),
        extra: extra.clone(),
    };
    write_container(
        path.as_ref(),
        vec![
            ("w_enc", vec![f, d], sae.w_enc.as_slice().expect("contiguous")),
            ("b_enc", vec![f], sae.b_enc.as_slice().expect("contiguous")),
            ("w_dec", vec![d, f], sae.w_dec.as_slice().expect("contiguous")),
            ("b_dec", vec![d], sae.b_dec.as_slice().expect("contiguous")),
            ("theta", vec![f], sae.theta.as_slice().expect("contiguous")),
        ],
        meta,
    )
}

const SAE_TENSORS: [&str; 5] = ["w_enc", "b_enc", "w_dec", "b_dec", "theta"];

/// Reads an SAE container, widening f32 tensors to f64.
pub fn read_sae(path: impl AsRef<Path>) -> Result<SaeParams> {
    let (header, payload) = read_container(path.as_ref())?;
    if header.meta.kind != "sae" {
        return Err(Error::KindMismatch(format!(
            "expected a \"sae\" container, found \"{}\"",
            header.meta.kind
        )));
    }
    for name in header.tensors.keys() {
        if !SAE_TENSORS.contains(&name.as_str()) {
            return Err(FormatError::UnexpectedTensor(name.clone()).into());
        }
    }
    let w_enc_entry = require_tensor(&header, "w_enc")?;
    if w_enc_entry.shape.len() != 2 {
        return Err(FormatError::Shape("w_enc must be rank 2".into()).into());
    }
    let f = w_enc_entry.shape[0];
    let d = w_enc_entry.shape[1];
    let expect_shape = |name: &str, entry: &TensorEntry, want: &[u64]| -> Result<()> {
        if entry.shape != want {
            return Err(FormatError::Shape(format!(
                "tensor \"{name}\" has shape {:?}, expected {:?}",
                entry.shape, want
            ))
            .into());
        }
        Ok(())
    };
    let b_enc_entry = require_tensor(&header, "b_enc")?;
    expect_shape("b_enc", b_enc_entry, &[f])?;
    let w_dec_entry = require_tensor(&header, "w_dec")?;
    expect_shape("w_dec", w_dec_entry, &[d, f])?;
    let b_dec_entry = require_tensor(&header, "b_dec")?;
    expect_shape("b_dec", b_dec_entry, &[d])?;
    let theta_entry = require_tensor(&header, "theta")?;
    expect_shape("theta", theta_entry, &[f])?;

    let theta = tensor_values(&payload, theta_entry);
    if !header.meta.folded && theta.iter().any(|&t| !(t > 0.0)) {
        return Err(FormatError::NonPositiveTheta.into());
    }
    let (f, d) = (f as usize, d as usize);
    SaeParams::new(
        Array2::from_shape_vec((f, d), tensor_values(&payload, w_enc_entry)).expect("shape"),
        Array1::from_vec(tensor_values(&payload, b_enc_entry)),
        Array2::from_shape_vec((d, f), tensor_values(&payload, w_dec_entry)).expect("shape"),
        Array1::from_vec(tensor_values(&payload, b_dec_entry)),
        Array1::from_vec(theta),
        header.meta.layer_id,
        header.meta.folded,
    )
}

/// Writes an activation container.
pub fn write_activations(batch: &ActivationBatch, path: impl AsRef<Path>) -> Result<()> {
    let mut extra = BTreeMap::new();
    extra.insert(
        "batch_kind".to_string(),
        Value::String(batch.kind.as_str().to_string()),
    );
    let meta = Meta {
        layer_id: batch.layer_id,
        folded: false,
        kind: "activations".to_string(),
        extra,
    };
    let t = batch.num_tokens() as u64;
    let n = batch.width() as u64;
    write_container(
        path.as_ref(),
        vec![("data", vec![t, n], batch.data.as_slice().expect("contiguous"))],
        meta,
    )
}

/// Reads an activation container.
pub fn read_activations(path: impl AsRef<Path>) -> Result<ActivationBatch> {
    let (header, payload) = read_container(path.as_ref())?;
    if header.meta.kind != "activations" {
        return Err(Error::KindMismatch(format!(
            "expected an \"activations\" container, found \"{}\"",
            header.meta.kind
        )));
    }
    for name in header.tensors.keys() {
        if name != "data" {
            return Err(FormatError::UnexpectedTensor(name.clone()).into());
        }
    }
    let entry = require_tensor(&header, "data")?;
    if entry.shape.len() != 2 {
        return Err(FormatError::Shape("data must be rank 2".into()).into());
    }
    let kind = match header.meta.extra.get("batch_kind").and_then(Value::as_str) {
        Some("hidden") => BatchKind::Hidden,
        Some("feature") => BatchKind::Feature,
        Some(other) => {
            return Err(FormatError::MalformedHeader(format!(
                "unknown batch_kind \"{other}\""
            ))
            .into())
        }
        None => {
            return Err(FormatError::MalformedHeader(
                "activations container missing batch_kind".into(),
            )
            .into())
        }
    };
    let (t, n) = (entry.shape[0] as usize, entry.shape[1] as usize);
    ActivationBatch::new(
        Array2::from_shape_vec((t, n), tensor_values(&payload, entry)).expect("shape"),
        kind,
        header.meta.layer_id,
    )
}

/// JSON document for a permutation, with optional matching costs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PermutationRecord {
    pub from_layer: u32,
    pub to_layer: u32,
    pub provenance: Provenance,
    pub map: Vec<usize>,
    pub total_cost: Option<f64>,
    pub per_pair_mse: Option<Vec<f64>>,
    pub config_fingerprint: Option<String>,
}

impl PermutationRecord {
    pub fn from_permutation(p: &Permutation) -> Self {
        PermutationRecord {
            from_layer: p.from_layer,
            to_layer: p.to_layer,
            provenance: p.provenance,
            map: p.map.clone(),
            total_cost: None,
            per_pair_mse: None,
            config_fingerprint: None,
        }
    }

    pub fn from_match_result(r: &MatchResult) -> Self {
        PermutationRecord {
            from_layer: r.permutation.from_layer,
            to_layer: r.permutation.to_layer,
            provenance: r.permutation.provenance,
            map: r.permutation.map.clone(),
            total_cost: Some(r.total_cost),
            per_pair_mse: Some(r.per_pair_mse.clone()),
            config_fingerprint: Some(r.config_fingerprint.clone()),
        }
    }

    pub fn permutation(&self) -> Result<Permutation> {
        Permutation::new(self.map.clone(), self.from_layer, self.to_layer, self.provenance)
    }

    fn validate(&self) -> Result<()> {
        validate_bijection(&self.map)
            .map_err(|_| FormatError::MalformedPermutation("map is not a bijection".into()))?;
        if let Some(mse) = &self.per_pair_mse {
            if mse.len() != self.map.len() {
                return Err(FormatError::MalformedPermutation(format!(
                    "per_pair_mse has {} entries for {} features",
                    mse.len(),
                    self.map.len()
                ))
                .into());
            }
        }
        Ok(())
    }
}

/// Writes a permutation document as pretty-printed JSON.
pub fn write_permutation(record: &PermutationRecord, path: impl AsRef<Path>) -> Result<()> {
    record.validate()?;
    let mut json = serde_json::to_string_pretty(record).expect("record serializes");
    json.push('\n');
    fs::write(path, json)?;
    Ok(())
}

/// Reads and validates a permutation document.
pub fn read_permutation(path: impl AsRef<Path>) -> Result<PermutationRecord> {
    let text = fs::read_to_string(path)?;
    let record: PermutationRecord = serde_json::from_str(&text)
        .map_err(|e| FormatError::MalformedPermutation(e.to_string()))?;
    record.validate()?;
    Ok(record)
}

/// One CSV field.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Str(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            // 17 significant digits: round-trippable f64
            Cell::Float(v) => format!("{v:.16e}"),
            Cell::Str(s) => s.clone(),
        }
    }
}

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') || field.contains('\r') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Writes a report as RFC-4180 CSV with a header row. Reals are
/// rendered with 17 significant digits so they parse back exactly.
pub fn write_report_csv(
    path: impl AsRef<Path>,
    header: &[&str],
    rows: &[Vec<Cell>],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(
        &header
            .iter()
            .map(|h| csv_escape(h))
            .collect::<Vec<_>>()
            .join(","),
    );
    out.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::dim(format!(
                "CSV row has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        out.push_str(
            &row.iter()
                .map(|c| csv_escape(&c.render()))
                .collect::<Vec<_>>()
                .join(","),
        );
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TargetsDoc {
    targets: Vec<usize>,
}

/// Writes next-token target indices as `{"targets": [..]}`.
pub fn write_targets(targets: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let mut json = serde_json::to_string_pretty(&TargetsDoc { targets: targets.to_vec() })
        .expect("targets serialize");
    json.push('\n');
    fs::write(path, json)?;
    Ok(())
}

/// Reads a target-index document.
pub fn read_targets(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let doc: TargetsDoc = serde_json::from_str(&text)
        .map_err(|e| FormatError::MalformedDocument(format!("targets JSON: {e}")))?;
    Ok(doc.targets)
}
