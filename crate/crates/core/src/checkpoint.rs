//! Versioned binary checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size          field
//! 0       8             magic "HCDGCKPT"
//! 8       4             format version (u32, currently 1)
//! 12      8             header length in bytes (u64)
//! 20      header_len    header: UTF-8 JSON, schema below
//! 20+hl   ...           payload: tensor values, row-major, concatenated in
//!                       header order, each encoded per its dtype ("f32" →
//!                       4-byte IEEE 754 LE, "f64" → 8-byte LE)
//! ```
//!
//! Header JSON: `{"version", "scalar", "config_hash", "entries": [{"name",
//! "group", "dtype", "shape", "offset", "len", "trainable"}]}` with `offset`
//! and `len` counted in elements relative to the payload start. The layout is
//! self-describing so other-language tooling can read and write it.

use crate::error::{Error, Result};
use crate::nn::{Group, SegModel};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"HCDGCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub group: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub scalar: String,
    pub config_hash: String,
    pub entries: Vec<EntryMeta>,
}

fn group_tag(g: Group) -> &'static str {
    match g {
        Group::Encoder => "encoder",
        Group::StudentDecoder => "student_decoder",
        Group::Teacher => "teacher",
        Group::Classmates => "classmates",
    }
}

/// Write every parameter array of the model.
pub fn save_model<T: Scalar>(model: &SegModel<T>, config_hash: &str, path: &Path) -> Result<()> {
    let all = model.all_entries();
    let mut entries = Vec::with_capacity(all.len());
    let mut offset = 0u64;
    for (g, e) in &all {
        let len = e.tensor.len() as u64;
        entries.push(EntryMeta {
            name: format!("{}/{}", group_tag(*g), e.name),
            group: group_tag(*g).to_string(),
            dtype: T::DTYPE.to_string(),
            shape: e.tensor.shape(),
            offset,
            len,
            trainable: e.trainable,
        });
        offset += len;
    }
    let header = CheckpointHeader {
        version: VERSION,
        scalar: T::DTYPE.to_string(),
        config_hash: config_hash.to_string(),
        entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, e) in &all {
        let data = e.tensor.data();
        match T::DTYPE {
            "f32" => {
                for v in data.iter() {
                    let f: f64 = (*v).as_();
                    w.write_all(&(f as f32).to_le_bytes())?;
                }
            }
            _ => {
                for v in data.iter() {
                    let f: f64 = (*v).as_();
                    w.write_all(&f.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read header plus raw values (widened to f64).
pub fn read_raw(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".to_string()));
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf)?;
    let version = u32::from_le_bytes(vbuf);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut lbuf = [0u8; 8];
    r.read_exact(&mut lbuf)?;
    let hlen = u64::from_le_bytes(lbuf) as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header: CheckpointHeader = serde_json::from_slice(&hbuf)?;

    let total: u64 = header.entries.iter().map(|e| e.len).sum();
    let mut values = Vec::with_capacity(total as usize);
    match header.scalar.as_str() {
        "f32" => {
            let mut buf = [0u8; 4];
            for _ in 0..total {
                r.read_exact(&mut buf)?;
                values.push(f32::from_le_bytes(buf) as f64);
            }
        }
        "f64" => {
            let mut buf = [0u8; 8];
            for _ in 0..total {
                r.read_exact(&mut buf)?;
                values.push(f64::from_le_bytes(buf));
            }
        }
        other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
    }
    Ok((header, values))
}

/// Load parameters into an existing model with the same architecture.
///
/// The checkpoint dtype must match `T` exactly; the file's declared entry
/// set must cover the model's entries one for one.
pub fn load_model<T: Scalar>(model: &SegModel<T>, path: &Path) -> Result<CheckpointHeader> {
    let (header, values) = read_raw(path)?;
    if header.scalar != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype {} does not match requested {}",
            header.scalar,
            T::DTYPE
        )));
    }
    let all = model.all_entries();
    if all.len() != header.entries.len() {
        return Err(Error::Checkpoint(format!(
            "entry count mismatch: model has {}, checkpoint has {}",
            all.len(),
            header.entries.len()
        )));
    }
    for ((g, e), meta) in all.iter().zip(header.entries.iter()) {
        let expect = format!("{}/{}", group_tag(*g), e.name);
        if meta.name != expect {
            return Err(Error::Checkpoint(format!(
                "entry order mismatch: expected {expect}, found {}",
                meta.name
            )));
        }
        if meta.shape != e.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch at {}: model {:?}, checkpoint {:?}",
                meta.name,
                e.tensor.shape(),
                meta.shape
            )));
        }
        let start = meta.offset as usize;
        let end = start + meta.len as usize;
        if end > values.len() {
            return Err(Error::Checkpoint(format!("payload truncated at {}", meta.name)));
        }
        let slice = &values[start..end];
        e.tensor.update_data(|d| {
            for (dst, src) in d.iter_mut().zip(slice.iter()) {
                *dst = T::cast(*src);
            }
        });
    }
    Ok(header)
}
