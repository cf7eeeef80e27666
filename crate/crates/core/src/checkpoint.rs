//! Flat binary container of named tensors.
//!
//! Layout: magic "CXT1", then per entry a u32-LE name length, the UTF-8 name
//! bytes, a u32-LE rank, one u64-LE per extent, and the raw little-endian
//! IEEE-754 (f64) values in row-major order. Entries follow store insertion
//! order, so identical stores serialize to identical bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CXT1";

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(8 + store.num_values() * 8);
    buf.extend_from_slice(MAGIC);
    for (name, tensor) in store.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &e in tensor.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_entries(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let parse_err = |detail: &str| Error::Parse {
        what: format!("checkpoint {}", path.display()),
        detail: detail.to_string(),
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(parse_err("missing CXT1 magic"));
    }
    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }
    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Option<&'a [u8]> {
            if self.pos + n > self.bytes.len() {
                return None;
            }
            let s = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Some(s)
        }
    }
    let mut cur = Cursor { bytes: &bytes, pos: 4 };
    let truncated = |pos: usize| Error::Parse {
        what: format!("checkpoint {}", path.display()),
        detail: format!("truncated at byte {pos}"),
    };
    let mut entries = Vec::new();
    while cur.pos < bytes.len() {
        let raw = cur.take(4).ok_or_else(|| truncated(cur.pos))?;
        let name_len = u32::from_le_bytes(raw.try_into().unwrap()) as usize;
        let raw = cur.take(name_len).ok_or_else(|| truncated(cur.pos))?;
        let name =
            String::from_utf8(raw.to_vec()).map_err(|_| parse_err("entry name is not UTF-8"))?;
        let raw = cur.take(4).ok_or_else(|| truncated(cur.pos))?;
        let rank = u32::from_le_bytes(raw.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let raw = cur.take(8).ok_or_else(|| truncated(cur.pos))?;
            shape.push(u64::from_le_bytes(raw.try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        let raw = cur.take(count * 8).ok_or_else(|| truncated(cur.pos))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

/// Load values into an existing store by name, keeping trainability flags.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let entries = load_entries(path)?;
    for (name, tensor) in entries {
        let dst = store.get_mut(&name)?;
        if dst.shape() != tensor.shape() {
            return Err(Error::Parse {
                what: format!("checkpoint {}", path.display()),
                detail: format!(
                    "{name}: shape {:?} does not match model {:?}",
                    tensor.shape(),
                    dst.shape()
                ),
            });
        }
        dst.data_mut().copy_from_slice(tensor.data());
    }
    Ok(())
}
