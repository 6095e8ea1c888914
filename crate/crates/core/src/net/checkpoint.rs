//! Single-file checkpoints: an 8-byte magic, a little-endian `u64` header length, a JSON
//! header (network config, init seed, tensor names and shapes), then every tensor as
//! little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use super::model::PlacementNet;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PLCNET01";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    seed: u64,
    trained: bool,
    tensors: Vec<TensorInfo>,
}

pub fn write_checkpoint(net: &PlacementNet, out: &mut impl Write) -> Result<()> {
    let p = net.params();
    let header = Header {
        config: net.config().clone(),
        seed: net.seed(),
        trained: net.is_trained(),
        tensors: p
            .names
            .iter()
            .zip(&p.shapes)
            .map(|(name, shape)| TensorInfo {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::io("<checkpoint>", e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&json).map_err(io)?;
    for v in &p.values {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        out.write_all(&bytes).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<PlacementNet> {
    let bad = |d: String| Error::format("checkpoint", d);
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| bad("file too short".into()))?;
    if &magic != MAGIC {
        return Err(bad("not a placement-network checkpoint".into()));
    }
    let mut len = [0u8; 8];
    input
        .read_exact(&mut len)
        .map_err(|_| bad("truncated header".into()))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 24 {
        return Err(bad(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    input
        .read_exact(&mut json)
        .map_err(|_| bad("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        input
            .read_exact(&mut bytes)
            .map_err(|_| bad(format!("tensor {} is truncated", t.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((t.name, t.shape, data));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(|e| Error::io("<checkpoint>", e))? != 0 {
        return Err(bad("trailing bytes after the last tensor".into()));
    }
    PlacementNet::from_parts(header.config, header.seed, tensors, header.trained)
}

pub fn save_checkpoint(net: &PlacementNet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(net, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<PlacementNet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}
