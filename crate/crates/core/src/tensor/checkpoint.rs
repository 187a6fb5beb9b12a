//! Checkpoint file: one JSON manifest line, then the raw little-endian f64
//! payload of every tensor in manifest order.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use super::Tensor;

pub const FORMAT: &str = "pathprune-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn write<W: Write>(mut w: W, meta: serde_json::Value, tensors: &[(String, Tensor)]) -> io::Result<()> {
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
            offset += t.len() * 8;
            e
        })
        .collect();
    let manifest = Manifest { format: FORMAT.into(), version: VERSION, meta, tensors: entries };
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read<R: BufRead>(mut r: R) -> io::Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let manifest: Manifest =
        serde_json::from_str(line.trim_end()).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unsupported checkpoint {} v{}", manifest.format, manifest.version),
        ));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let bytes = payload
            .get(e.offset..e.offset + n * 8)
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, format!("payload of {}", e.name)))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(e.shape, data).map_err(|err| io::Error::new(io::ErrorKind::InvalidData, err))?;
        out.push((e.name, t));
    }
    Ok((manifest.meta, out))
}
