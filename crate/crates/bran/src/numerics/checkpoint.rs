use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8] = b"brantensor-v1";

/// Ordered collection of named parameter tensors. Insertion order is the
/// serialization order, so identical construction yields bit-identical
/// checkpoint files.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let idx = self.index[name];
        &self.entries[idx].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Writes parameters to the binary checkpoint format: the magic header,
/// then per tensor a length-prefixed name, rank, dims, and raw
/// little-endian f64 values.
pub fn save_params(params: &ParamSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for (name, tensor) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_params`].
pub fn load_params(path: &Path) -> Result<ParamSet> {
    let bad = |msg: &str| Error::Format {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing brantensor-v1 header"));
    }
    let mut pos = MAGIC.len();
    let mut params = ParamSet::new();
    while pos < bytes.len() {
        let name_len =
            read_u32(&bytes, &mut pos).ok_or_else(|| bad("truncated name length"))? as usize;
        if pos + name_len > bytes.len() {
            return Err(bad("truncated name"));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + name_len])
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        pos += name_len;
        let rank = read_u32(&bytes, &mut pos).ok_or_else(|| bad("truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let dim = read_u64(&bytes, &mut pos).ok_or_else(|| bad("truncated dims"))?;
            shape.push(dim as usize);
        }
        let numel: usize = shape.iter().product();
        if pos + numel * 8 > bytes.len() {
            return Err(bad("truncated tensor values"));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[pos..pos + 8]);
            data.push(f64::from_le_bytes(b));
            pos += 8;
        }
        params.insert(&name, Tensor::from_vec(&shape, data)?);
    }
    Ok(params)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Option<u32> {
    if *pos + 4 > bytes.len() {
        return None;
    }
    let mut b = [0u8; 4];
    b.copy_from_slice(&bytes[*pos..*pos + 4]);
    *pos += 4;
    Some(u32::from_le_bytes(b))
}

fn read_u64(bytes: &[u8], pos: &mut usize) -> Option<u64> {
    if *pos + 8 > bytes.len() {
        return None;
    }
    let mut b = [0u8; 8];
    b.copy_from_slice(&bytes[*pos..*pos + 8]);
    *pos += 8;
    Some(u64::from_le_bytes(b))
}
