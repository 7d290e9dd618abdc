//! Binary checkpoint format.
//!
//! ```text
//! magic    4 bytes  "EQSG"
//! version  u32 LE   (currently 1)
//! config   u32 length + UTF-8 canonical config text
//! params   u32 count + entries
//! buffers  u32 count + entries   (batch-norm running statistics)
//! metrics  u32 length + UTF-8 `key = value` lines
//!
//! entry:   u32 name length, name bytes, u8 dtype tag (0 = f32),
//!          u8 rank, rank x u32 extents, little-endian payload
//! ```
//!
//! Save -> load -> save reproduces the file byte for byte.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use equiseg_core::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EQSG";
pub const VERSION: u32 = 1;

/// A named tensor as stored on disk.
#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub params: Vec<Entry>,
    pub buffers: Vec<Entry>,
    pub metrics_text: String,
}

fn write_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(0u8); // dtype tag: f32
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn entries_from_tensors(tensors: &[(String, Tensor<f32>)]) -> Vec<Entry> {
    tensors
        .iter()
        .map(|(name, t)| Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            data: t.data().clone(),
        })
        .collect()
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(ckpt.config_text.as_bytes());
    for section in [&ckpt.params, &ckpt.buffers] {
        out.extend_from_slice(&(section.len() as u32).to_le_bytes());
        for e in section {
            write_entry(&mut out, &e.name, &e.shape, &e.data);
        }
    }
    out.extend_from_slice(&(ckpt.metrics_text.len() as u32).to_le_bytes());
    out.extend_from_slice(ckpt.metrics_text.as_bytes());
    out
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b).context("checkpoint truncated")?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(cur: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    cur.read_exact(&mut b).context("checkpoint truncated")?;
    Ok(b)
}

fn read_entry(cur: &mut Cursor<&[u8]>) -> Result<Entry> {
    let name_len = read_u32(cur)? as usize;
    let name = String::from_utf8(read_bytes(cur, name_len)?).context("entry name not UTF-8")?;
    let mut tag = [0u8; 1];
    cur.read_exact(&mut tag).context("checkpoint truncated")?;
    if tag[0] != 0 {
        bail!("entry `{}`: unsupported dtype tag {}", name, tag[0]);
    }
    let mut rank = [0u8; 1];
    cur.read_exact(&mut rank).context("checkpoint truncated")?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        shape.push(read_u32(cur)? as usize);
    }
    let numel: usize = shape.iter().product();
    let raw = read_bytes(cur, numel * 4)?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Entry { name, shape, data })
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor::new(bytes);
    let magic = read_bytes(&mut cur, 4)?;
    if magic != MAGIC {
        bail!("not a checkpoint: bad magic {:?}", magic);
    }
    let version = read_u32(&mut cur)?;
    if version != VERSION {
        bail!("unsupported checkpoint version {} (expected {})", version, VERSION);
    }
    let cfg_len = read_u32(&mut cur)? as usize;
    let config_text = String::from_utf8(read_bytes(&mut cur, cfg_len)?)
        .context("config text not UTF-8")?;
    let mut sections = Vec::with_capacity(2);
    for _ in 0..2 {
        let count = read_u32(&mut cur)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            entries.push(read_entry(&mut cur)?);
        }
        sections.push(entries);
    }
    let buffers = sections.pop().unwrap();
    let params = sections.pop().unwrap();
    let metrics_len = read_u32(&mut cur)? as usize;
    let metrics_text = String::from_utf8(read_bytes(&mut cur, metrics_len)?)
        .context("metrics text not UTF-8")?;
    if cur.position() as usize != bytes.len() {
        bail!("checkpoint has trailing bytes");
    }
    Ok(Checkpoint {
        config_text,
        params,
        buffers,
        metrics_text,
    })
}

/// Snapshots a model's state into a checkpoint structure.
pub fn from_model(
    config_text: String,
    params: &[(String, Tensor<f32>)],
    buffers: &[(String, Tensor<f32>)],
    metrics_text: String,
) -> Checkpoint {
    Checkpoint {
        config_text,
        params: entries_from_tensors(params),
        buffers: entries_from_tensors(buffers),
        metrics_text,
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt);
    let mut f = fs::File::create(path)
        .with_context(|| format!("cannot create checkpoint at {}", path.display()))?;
    f.write_all(&bytes)
        .with_context(|| format!("cannot write checkpoint at {}", path.display()))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes =
        fs::read(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    decode(&bytes).with_context(|| format!("while decoding {}", path.display()))
}

/// Copies checkpoint entries into live tensors, matching by name; the name
/// sets and shapes must agree exactly.
pub fn restore_tensors(entries: &[Entry], targets: &[(String, Tensor<f32>)]) -> Result<()> {
    if entries.len() != targets.len() {
        bail!(
            "checkpoint holds {} tensors, model expects {}",
            entries.len(),
            targets.len()
        );
    }
    for (e, (name, t)) in entries.iter().zip(targets) {
        if &e.name != name {
            bail!("tensor order mismatch: checkpoint `{}` vs model `{}`", e.name, name);
        }
        if e.shape != t.shape() {
            bail!(
                "tensor `{}`: checkpoint shape {:?} vs model shape {:?}",
                e.name,
                e.shape,
                t.shape()
            );
        }
        t.data_mut().copy_from_slice(&e.data);
    }
    Ok(())
}
