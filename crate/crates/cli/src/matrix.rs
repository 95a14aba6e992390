//! Row-major matrices on disk: little-endian payload plus a `{count, dim}`
//! JSON sidecar at `<payload>.json`.

use std::fs;
use std::path::Path;

use crossview_core::datacube::sidecar_path;
use crossview_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixShape {
    pub count: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

fn shape_of(t: &Tensor) -> MatrixShape {
    let count = t.shape().first().copied().unwrap_or(0);
    let dim = if t.shape().len() > 1 { t.row_len() } else { 0 };
    MatrixShape { count, dim }
}

pub fn write_matrix(path: &Path, t: &Tensor, precision: Precision) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * precision.width());
    for v in t.data() {
        match precision {
            Precision::F32 => bytes.extend_from_slice(&(*v as f32).to_le_bytes()),
            Precision::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
        }
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))?;
    let side = sidecar_path(path);
    let text = serde_json::to_string(&shape_of(t)).expect("shape serializes");
    fs::write(&side, text).map_err(|e| CliError::io(&side, e))
}

pub fn read_matrix(path: &Path, precision: Precision) -> Result<Tensor> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| CliError::io(&side, e))?;
    let shape: MatrixShape = serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: side.clone(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let w = precision.width();
    if bytes.len() != shape.count * shape.dim * w {
        return Err(CliError::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason: format!(
                "sidecar declares {} x {} values, payload holds {} bytes",
                shape.count,
                shape.dim,
                bytes.len()
            ),
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(w)
        .map(|c| match precision {
            Precision::F32 => f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))),
            Precision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
        })
        .collect();
    Ok(Tensor::new(vec![shape.count, shape.dim], data).expect("shape checked"))
}
