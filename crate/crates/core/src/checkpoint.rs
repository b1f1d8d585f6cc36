//! Checkpoint persistence.
//!
//! A checkpoint directory holds three files:
//! - `network.toml` — the architecture spec and build seed;
//! - `manifest.txt` — one line per parameter: name, dtype, shape, byte
//!   offset, element count, trainable flag, in creation order;
//! - `weights.bin` — the raw little-endian float32 values, concatenated
//!   in manifest order (batch-norm running statistics included).
//!
//! Loading rebuilds the network from the stored spec and overwrites every
//! parameter by name, so handles inside the layer objects stay aligned
//! with the store. Save → load → save is byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::tensor::ParamStore;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const HEADER_FILE: &str = "network.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: u32,
    pub seed: u64,
    pub network: NetworkSpec,
}

pub fn save_checkpoint(
    dir: &Path,
    spec: &NetworkSpec,
    seed: u64,
    ps: &ParamStore<f32>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = CheckpointHeader { format: 1, seed, network: spec.clone() };
    let header_str =
        toml::to_string_pretty(&header).map_err(|e| Error::config(format!("header: {e}")))?;

    let mut manifest = String::new();
    let mut blob: Vec<u8> = Vec::new();
    for (_, p) in ps.iter() {
        let (a, b, c, d) = p.value.dim();
        writeln!(
            manifest,
            "{} dtype=float32 shape={a}x{b}x{c}x{d} offset={} len={} trainable={}",
            p.name,
            blob.len(),
            p.value.len(),
            p.trainable
        )
        .expect("write to string");
        for &v in p.value.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }

    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };
    write(HEADER_FILE, header_str.as_bytes())?;
    write(MANIFEST_FILE, manifest.as_bytes())?;
    write(WEIGHTS_FILE, &blob)
}

struct ManifestLine {
    name: String,
    shape: (usize, usize, usize, usize),
    offset: usize,
    len: usize,
    trainable: bool,
}

fn parse_manifest_line(line: &str, lineno: usize) -> Result<ManifestLine> {
    let bad = |what: &str| {
        Error::data(format!("manifest line {lineno} {what}: {line}"))
    };
    let mut parts = line.split_whitespace();
    let name = parts.next().ok_or_else(|| bad("is empty"))?.to_string();
    let mut shape = None;
    let mut offset = None;
    let mut len = None;
    let mut trainable = None;
    for part in parts {
        let (key, value) = part.split_once('=').ok_or_else(|| bad("has a malformed field"))?;
        match key {
            "dtype" => {
                if value != "float32" {
                    return Err(bad("has an unsupported dtype"));
                }
            }
            "shape" => {
                let dims: Vec<usize> = value
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad("has a malformed shape")))
                    .collect::<Result<_>>()?;
                if dims.len() != 4 {
                    return Err(bad("must have a 4-d shape"));
                }
                shape = Some((dims[0], dims[1], dims[2], dims[3]));
            }
            "offset" => offset = Some(value.parse().map_err(|_| bad("has a malformed offset"))?),
            "len" => len = Some(value.parse().map_err(|_| bad("has a malformed len"))?),
            "trainable" => {
                trainable = Some(value.parse().map_err(|_| bad("has a malformed flag"))?)
            }
            _ => return Err(bad("has an unknown field")),
        }
    }
    Ok(ManifestLine {
        name,
        shape: shape.ok_or_else(|| bad("is missing shape"))?,
        offset: offset.ok_or_else(|| bad("is missing offset"))?,
        len: len.ok_or_else(|| bad("is missing len"))?,
        trainable: trainable.ok_or_else(|| bad("is missing trainable"))?,
    })
}

pub fn load_checkpoint(dir: &Path) -> Result<(Network, ParamStore<f32>, CheckpointHeader)> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let path = dir.join(name);
        std::fs::read(&path).map_err(|e| Error::io(&path, e))
    };
    let header_str = String::from_utf8(read(HEADER_FILE)?)
        .map_err(|_| Error::data("checkpoint header is not UTF-8"))?;
    let header: CheckpointHeader = toml::from_str(&header_str)
        .map_err(|e| Error::data(format!("checkpoint header: {e}")))?;
    if header.format != 1 {
        return Err(Error::data(format!("unsupported checkpoint format {}", header.format)));
    }
    let manifest_str = String::from_utf8(read(MANIFEST_FILE)?)
        .map_err(|_| Error::data("checkpoint manifest is not UTF-8"))?;
    let blob = read(WEIGHTS_FILE)?;

    let (net, mut ps) = Network::build::<f32>(&header.network, header.seed)?;
    let mut seen = 0usize;
    for (lineno, line) in manifest_str.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry = parse_manifest_line(line, lineno + 1)?;
        let id = ps.find(&entry.name).ok_or_else(|| {
            Error::data(format!("checkpoint parameter {} does not exist in the network", entry.name))
        })?;
        let value = ps.value_mut(id);
        if value.dim() != entry.shape || value.len() != entry.len {
            return Err(Error::data(format!(
                "checkpoint parameter {} has shape {:?}, network expects {:?}",
                entry.name,
                entry.shape,
                value.dim()
            )));
        }
        if ps.entry(id).trainable != entry.trainable {
            return Err(Error::data(format!(
                "checkpoint parameter {} trainable flag mismatch",
                entry.name
            )));
        }
        let end = entry.offset + entry.len * 4;
        if end > blob.len() {
            return Err(Error::data(format!(
                "checkpoint parameter {} extends past the weight blob",
                entry.name
            )));
        }
        let bytes = &blob[entry.offset..end];
        let value = ps.value_mut(id);
        for (slot, chunk) in value.iter_mut().zip(bytes.chunks_exact(4)) {
            *slot = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
        seen += 1;
    }
    if seen != ps.len() {
        return Err(Error::data(format!(
            "checkpoint holds {seen} parameters, network has {}",
            ps.len()
        )));
    }
    Ok((net, ps, header))
}
