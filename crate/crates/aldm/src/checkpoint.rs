//! Checkpoint archive: a JSON header (format version, net spec, seed, step,
//! shape manifest) followed by raw little-endian float32 payloads.

use crate::error::{AldmError, Result};
use crate::nets::{NetSpec, ParameterTree};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ALDMCKPT";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub spec: NetSpec,
    pub seed: u64,
    pub step: u64,
    #[serde(default)]
    pub config_hash: Option<String>,
    pub manifest: Vec<ManifestEntry>,
}

pub fn save(
    path: &Path,
    params: &ParameterTree,
    spec: &NetSpec,
    seed: u64,
    step: u64,
    config_hash: Option<&str>,
) -> Result<()> {
    params.assert_finite()?;
    let manifest: Vec<ManifestEntry> = params
        .iter()
        .map(|(name, a)| ManifestEntry {
            name: name.clone(),
            shape: a.shape().to_vec(),
            dtype: "f32".to_string(),
        })
        .collect();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        spec: spec.clone(),
        seed,
        step,
        config_hash: config_hash.map(|s| s.to_string()),
        manifest,
    };
    let header_json = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    for (_, a) in params.iter() {
        for &v in a.iter() {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParameterTree, CheckpointHeader)> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| AldmError::invalid(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AldmError::invalid("not a checkpoint file (bad magic)"));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; hlen];
    f.read_exact(&mut header_json)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(AldmError::invalid(format!(
            "unsupported checkpoint format version {}",
            header.format_version
        )));
    }
    let mut tree = ParameterTree::new();
    for entry in &header.manifest {
        if entry.dtype != "f32" {
            return Err(AldmError::invalid(format!(
                "unsupported dtype `{}` for `{}`",
                entry.dtype, entry.name
            )));
        }
        let count: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; count * 4];
        f.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| AldmError::invalid(format!("bad shape in checkpoint: {e}")))?;
        tree.insert(entry.name.clone(), arr);
    }
    Ok((tree, header))
}
