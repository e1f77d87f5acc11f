//! UCLM checkpoint files: named `f32` tensors.

use std::path::Path;

use crate::data::write_atomic;
use crate::error::{invalid, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"UCLM";
const VERSION: u32 = 1;

/// Serialises named tensors. Values are stored as `f32`.
pub fn encode_checkpoint(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| invalid("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(invalid(format!("tensor name `{name}` appears twice")));
        }
        let len = u16::try_from(name.len()).map_err(|_| invalid(format!("tensor name `{name}` is too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.shape().len()).map_err(|_| invalid(format!("tensor `{name}` rank too high")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| invalid(format!("tensor `{name}` dimension too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Parses a UCLM buffer.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<(usize, &[u8])> {
        if bytes.len() - pos < n {
            return Err(format_err(pos, format!("truncated {what}")));
        }
        let at = pos;
        pos += n;
        Ok((at, &bytes[at..at + n]))
    };
    let (_, magic) = take(4, "magic")?;
    if magic != MAGIC {
        return Err(format_err(0, "bad magic, expected UCLM"));
    }
    let (_, v) = take(4, "version")?;
    let version = u32::from_le_bytes(v.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let (_, c) = take(4, "tensor count")?;
    let count = u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 12));
    for _ in 0..count {
        let (_, l) = take(2, "name length")?;
        let len = u16::from_le_bytes(l.try_into().expect("2 bytes")) as usize;
        let (at, raw) = take(len, "name")?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| format_err(at, "tensor name is not UTF-8"))?
            .to_string();
        let (_, r) = take(1, "rank")?;
        let rank = r[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let (_, d) = take(4, "dimension")?;
            shape.push(u32::from_le_bytes(d.try_into().expect("4 bytes")) as usize);
        }
        let n: usize = shape.iter().product();
        let bytes_needed = n
            .checked_mul(4)
            .ok_or_else(|| format_err(at, format!("tensor `{name}` is too large")))?;
        let (_, payload) = take(bytes_needed, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if pos != bytes.len() {
        return Err(format_err(pos, "trailing bytes"));
    }
    Ok(out)
}

/// Every tensor of `store` in registration order.
pub fn store_tensors(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.iter().map(|(_, name, t)| (name.to_string(), t.clone())).collect()
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode_checkpoint(tensors)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Copies tensors into `store` by name. Every parameter of `store` whose
/// name starts with one of `prefixes` must be present with a matching
/// shape; other tensors in `tensors` are ignored.
pub fn load_into(store: &mut ParamStore, tensors: &[(String, Tensor)], prefixes: &[&str]) -> Result<()> {
    let by_name: std::collections::HashMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let Some(t) = by_name.get(name.as_str()) else {
            return Err(Error::Compat {
                name,
                msg: "missing from checkpoint".into(),
            });
        };
        if t.shape() != store.get(id).shape() {
            return Err(Error::Compat {
                msg: format!(
                    "checkpoint shape {:?} differs from configured {:?}",
                    t.shape(),
                    store.get(id).shape()
                ),
                name,
            });
        }
        store.set(id, (*t).clone())?;
    }
    Ok(())
}
