//! Binary container shared by feature matrices and checkpoints.
//!
//! ```text
//! magic    8 bytes   "AMGCNBIN"
//! version  u32 LE    1
//! hlen     u64 LE    length of the JSON header in bytes
//! header   hlen bytes of UTF-8 JSON
//! payload  f64 LE values, arrays concatenated in declaration order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const MAGIC: &[u8; 8] = b"AMGCNBIN";
pub const VERSION: u32 = 1;

pub fn encode(header: &Value, arrays: &[&[f64]]) -> Vec<u8> {
    let header = serde_json::to_vec(header).expect("JSON values always serialize");
    let total: usize = arrays.iter().map(|a| a.len()).sum();
    let mut out = Vec::with_capacity(20 + header.len() + 8 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for a in arrays {
        for v in *a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Value, Vec<f64>)> {
    let err = |m: &str| Error::parse(path, m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(err("not an AMGCNBIN container"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(err(&format!("unsupported container version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| err("truncated header"))?;
    let header: Value = serde_json::from_slice(body).map_err(|e| err(&format!("bad header: {e}")))?;
    let payload = &bytes[20 + hlen..];
    if payload.len() % 8 != 0 {
        return Err(err("payload is not a whole number of f64 values"));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, values))
}

pub fn write(path: &Path, header: &Value, arrays: &[&[f64]]) -> Result<()> {
    let bytes = encode(header, arrays);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(Value, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn is_container(path: &Path) -> Result<bool> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = [0u8; 8];
    match f.read_exact(&mut buf) {
        Ok(()) => Ok(&buf == MAGIC),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(false),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Writes every parameter and optimizer-moment tensor. `meta` entries are
/// merged into the header next to the tensor table.
pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: &Value) -> Result<()> {
    let tensors = params.tensors();
    let table: Vec<Value> = tensors
        .iter()
        .map(|(name, shape, _)| serde_json::json!({"name": name, "shape": shape}))
        .collect();
    let mut header = serde_json::json!({
        "kind": "checkpoint",
        "tensors": table,
        "adam_steps": [params.adam_mla.step_count, params.adam_adu.step_count],
    });
    if let (Some(h), Some(m)) = (header.as_object_mut(), meta.as_object()) {
        for (k, v) in m {
            h.entry(k.clone()).or_insert_with(|| v.clone());
        }
    }
    let slices: Vec<&[f64]> = tensors.iter().map(|(_, _, s)| *s).collect();
    write(path, &header, &slices)
}

/// Restores a checkpoint into `params`, whose architecture must match.
pub fn load_checkpoint(path: &Path, params: &mut ModelParams) -> Result<Value> {
    let (header, values) = read(path)?;
    if header["kind"] != "checkpoint" {
        return Err(Error::parse(path, "not a checkpoint"));
    }
    let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    let stored: Vec<(String, Vec<usize>)> = serde_json::from_value(
        header["tensors"]
            .as_array()
            .map(|a| {
                Value::Array(
                    a.iter()
                        .map(|t| serde_json::json!([t["name"], t["shape"]]))
                        .collect(),
                )
            })
            .unwrap_or(Value::Null),
    )
    .map_err(|e| Error::parse(path, format!("bad tensor table: {e}")))?;
    if stored != expected {
        return Err(Error::parse(path, "checkpoint tensors do not match the model architecture"));
    }
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if total != values.len() {
        return Err(Error::parse(path, format!("expected {total} values, found {}", values.len())));
    }
    let mut offset = 0;
    for dst in params.tensors_mut() {
        dst.copy_from_slice(&values[offset..offset + dst.len()]);
        offset += dst.len();
    }
    let steps = &header["adam_steps"];
    params.adam_mla.step_count = steps[0].as_u64().unwrap_or(0);
    params.adam_adu.step_count = steps[1].as_u64().unwrap_or(0);
    Ok(header)
}
