//! Parameter file: one line of compact JSON (the header) terminated by
//! `\n`, then the little-endian `f64` values of each block, concatenated in
//! the order the header lists them.
//!
//! The header always carries a `"blocks"` array of `{"name", "len"}`
//! entries; every other field is free-form model metadata.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamFile {
    pub header: Value,
    pub blocks: Vec<(String, Vec<f64>)>,
}

impl ParamFile {
    pub fn new(header: Value) -> Self {
        Self {
            header,
            blocks: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, values: Vec<f64>) {
        self.blocks.push((name.to_string(), values));
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.header.clone();
        let listing: Vec<Value> = self
            .blocks
            .iter()
            .map(|(n, v)| json!({"name": n, "len": v.len()}))
            .collect();
        if let Value::Object(map) = &mut header {
            map.insert("blocks".into(), Value::Array(listing));
        } else {
            header = json!({"meta": header, "blocks": listing});
        }
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for (_, values) in &self.blocks {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::format(path, "missing header line"))?;
        let header: Value = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        let listing = header
            .get("blocks")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::format(path, "header lacks a blocks listing"))?;
        let mut payload = &bytes[nl + 1..];
        let mut blocks = Vec::with_capacity(listing.len());
        for entry in listing {
            let name = entry.get("name").and_then(Value::as_str);
            let len = entry.get("len").and_then(Value::as_u64);
            let (Some(name), Some(len)) = (name, len) else {
                return Err(Error::format(path, "malformed block entry"));
            };
            let nbytes = len as usize * 8;
            if payload.len() < nbytes {
                return Err(Error::format(path, format!("block {name} is truncated")));
            }
            let values = payload[..nbytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            payload = &payload[nbytes..];
            blocks.push((name.to_string(), values));
        }
        if !payload.is_empty() {
            return Err(Error::format(path, "trailing bytes after last block"));
        }
        Ok(Self { header, blocks })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
