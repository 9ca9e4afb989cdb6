//! `UCKP` checkpoint files.
//!
//! Layout: magic, version byte, `u32` length + UTF-8 `key=value` header
//! (config, task, frozen tensors), `u32` tensor count, then per tensor:
//! `u32` name length, name, `u8` rank, `u32` dims, little-endian `f32`
//! values. Weights are held in `f64` in memory and rounded to `f32` on save.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::config::{ModelConfig, Task};
use super::params::{check_shapes, init_random, ModelParams};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::units::truncated;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UCKP";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint<W: Write>(p: &ModelParams, mut sink: W) -> Result<()> {
    let mut header = p.config.to_key_values();
    header.set("task", p.task.name());
    header.set(
        "frozen",
        p.frozen.iter().cloned().collect::<Vec<_>>().join(","),
    );
    let header = header.to_text();
    sink.write_all(CHECKPOINT_MAGIC)?;
    sink.write_all(&[CHECKPOINT_VERSION])?;
    sink.write_all(&(header.len() as u32).to_le_bytes())?;
    sink.write_all(header.as_bytes())?;
    let named = p.tensors.named();
    sink.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t) in named {
        sink.write_all(&(name.len() as u32).to_le_bytes())?;
        sink.write_all(name.as_bytes())?;
        sink.write_all(&[2u8])?;
        sink.write_all(&(t.nrows() as u32).to_le_bytes())?;
        sink.write_all(&(t.ncols() as u32).to_le_bytes())?;
        for v in t.iter() {
            sink.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| truncated("checkpoint", e))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut source: R) -> Result<ModelParams> {
    let mut magic = [0u8; 5];
    source
        .read_exact(&mut magic)
        .map_err(|e| truncated("checkpoint", e))?;
    if &magic[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    if magic[4] != CHECKPOINT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported version {}", magic[4]),
        ));
    }
    let header_len = read_u32(&mut source)? as usize;
    let mut header = vec![0u8; header_len];
    source
        .read_exact(&mut header)
        .map_err(|e| truncated("checkpoint", e))?;
    let header = String::from_utf8(header)
        .map_err(|_| Error::format("checkpoint", "header is not UTF-8"))?;
    let kv = KeyValues::parse(&header)?;
    let config = ModelConfig::default().with_overrides(&kv)?;
    let task = Task::parse(kv.get("task").unwrap_or(""))?;
    let frozen: BTreeSet<String> = kv
        .get("frozen")
        .unwrap_or("")
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();

    let mut params = init_random(&config, task)?;
    params.frozen = frozen;
    let count = read_u32(&mut source)? as usize;
    let mut slots = params.tensors.named_mut();
    if count != slots.len() {
        return Err(Error::format(
            "checkpoint",
            format!("expected {} tensors, found {count}", slots.len()),
        ));
    }
    for (expected_name, slot) in slots.iter_mut() {
        let name_len = read_u32(&mut source)? as usize;
        let mut name = vec![0u8; name_len];
        source
            .read_exact(&mut name)
            .map_err(|e| truncated("checkpoint", e))?;
        if name != expected_name.as_bytes() {
            return Err(Error::format(
                "checkpoint",
                format!("expected tensor {expected_name}, found {}", String::from_utf8_lossy(&name)),
            ));
        }
        let mut rank = [0u8; 1];
        source
            .read_exact(&mut rank)
            .map_err(|e| truncated("checkpoint", e))?;
        if rank[0] != 2 {
            return Err(Error::format("checkpoint", format!("{expected_name}: rank {}", rank[0])));
        }
        let rows = read_u32(&mut source)? as usize;
        let cols = read_u32(&mut source)? as usize;
        if (rows, cols) != slot.dim() {
            return Err(Error::format(
                "checkpoint",
                format!("{expected_name}: shape ({rows}, {cols}) != {:?}", slot.dim()),
            ));
        }
        let mut raw = vec![0u8; rows * cols * 4];
        source
            .read_exact(&mut raw)
            .map_err(|e| truncated("checkpoint", e))?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("checkpoint", format!("{expected_name}: non-finite weight")));
        }
        **slot = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
    }
    drop(slots);
    check_shapes(&params)?;
    Ok(params)
}

pub fn save_checkpoint(p: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(p, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_transfer;

    #[test]
    fn roundtrip_rounds_to_f32() {
        let text = init_random(&ModelConfig::tiny(), Task::Text).unwrap();
        let p = init_transfer(&text, &ModelConfig::tiny()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.config, p.config);
        assert_eq!(back.task, Task::Units);
        assert_eq!(back.frozen, p.frozen);
        for ((_, a), (_, b)) in p.tensors.named().into_iter().zip(back.tensors.named()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // A second save of the loaded model is byte-identical.
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn corrupt_checkpoints_fail() {
        let p = init_random(&ModelConfig::tiny(), Task::Units).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
    }
}
