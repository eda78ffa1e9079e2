//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!   magic  b"SDTK"
//!   u32    format version (currently 1)
//!   u64    metadata length, then that many bytes of JSON metadata
//!          (`{"config": <model config>, "bias_scale_active": bool}`)
//!   u64    tensor count, then per tensor:
//!     u16  name length, then the UTF-8 name
//!     u32  rows, u32 cols
//!     rows * cols f64 values
//!
//! Tensors are written in the model's fixed registry order, so identical
//! weights serialize to identical bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use shipdet_core::fusion::{ToyModel, ToyModelConfig};

const MAGIC: &[u8; 4] = b"SDTK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ToyModelConfig,
    bias_scale_active: bool,
}

pub fn write_checkpoint(path: &Path, model: &ToyModel) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let meta = CheckpointMeta {
        config: model.config.clone(),
        bias_scale_active: model.bias_scale_active(),
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let tensors = model.named_tensors();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, mat) in tensors {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(mat.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(mat.cols() as u32).to_le_bytes());
        for v in mat.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_checkpoint(path: &Path) -> Result<ToyModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cursor = std::io::Cursor::new(bytes.as_slice());

    let mut magic = [0u8; 4];
    cursor.read_exact(&mut magic)?;
    if &magic != MAGIC {
        bail!("{}: not a toolkit checkpoint", path.display());
    }
    let version = read_u32(&mut cursor)?;
    if version != VERSION {
        bail!("{}: unsupported checkpoint version {version}", path.display());
    }
    let meta_len = read_u64(&mut cursor)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    cursor.read_exact(&mut meta_bytes)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .with_context(|| format!("{}: bad metadata", path.display()))?;

    let mut model =
        ToyModel::new(meta.config).map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
    model.set_bias_scale_active(meta.bias_scale_active);

    let tensor_count = read_u64(&mut cursor)? as usize;
    let mut expected = model.named_tensors_mut();
    if tensor_count != expected.len() {
        bail!(
            "{}: checkpoint has {} tensors, model needs {}",
            path.display(),
            tensor_count,
            expected.len()
        );
    }
    for (name, mat) in expected.iter_mut() {
        let name_len = read_u16(&mut cursor)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        cursor.read_exact(&mut name_bytes)?;
        let got = String::from_utf8(name_bytes)?;
        if got != *name {
            bail!("{}: tensor '{got}' where '{name}' expected", path.display());
        }
        let rows = read_u32(&mut cursor)? as usize;
        let cols = read_u32(&mut cursor)? as usize;
        if rows != mat.rows() || cols != mat.cols() {
            bail!(
                "{}: tensor '{name}' is {rows}x{cols}, expected {}x{}",
                path.display(),
                mat.rows(),
                mat.cols()
            );
        }
        let mut buf = [0u8; 8];
        for v in mat.data_mut() {
            cursor.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    Ok(model)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Writes a loss curve as `step,loss` CSV next to a checkpoint.
pub fn write_loss_curve(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    let mut file = fs::File::create(path)?;
    file.write_all(text.as_bytes())?;
    Ok(())
}
