//! Named-tensor binary container.
//!
//! Layout (little-endian): magic `EARN`, `u32` version, `u64` tensor count,
//! then per tensor a `u64` name length, the UTF-8 name, a `u64` rank, `rank`
//! `u64` extents and the `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"EARN";
pub const VERSION: u32 = 1;

pub fn write_tensors<W: Write, T: Scalar>(mut w: W, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated container".into())
    } else {
        Error::Io(e)
    }
}

/// Upper bound on a single allocation driven by header fields.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn read_tensors<R: Read, T: Scalar>(mut r: R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v).map_err(truncated)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(&mut r)?;
        if len > 1 << 16 {
            return Err(Error::Format("tensor name too long".into()));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u64(&mut r)?;
        if rank > 16 {
            return Err(Error::Format(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut n: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(&mut r)?;
            n = n.checked_mul(d).filter(|&n| n <= MAX_ELEMENTS).ok_or_else(|| Error::Format("tensor too large".into()))?;
            shape.push(d as usize);
        }
        let mut bytes = vec![0u8; 4 * n as usize];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Write to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_tensors<T: Scalar>(path: &Path, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors)?;
    write_atomic(path, &buf)
}

pub fn load_tensors<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    read_tensors(std::io::BufReader::new(std::fs::File::open(path)?))
}

fn spec_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// Weights to `path`, the network spec to the same stem with `.json`.
pub fn save_network<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    save_tensors(path, &net.named_params())?;
    write_atomic(&spec_path(path), serde_json::to_string_pretty(net.spec())?.as_bytes())
}

pub fn load_network<T: Scalar>(path: &Path) -> Result<Network<T>> {
    let sp = spec_path(path);
    if !sp.exists() {
        return Err(Error::MissingFile(sp));
    }
    let spec: NetworkSpec = serde_json::from_str(&std::fs::read_to_string(sp)?)?;
    let mut net = Network::zeros(spec)?;
    net.load_named(&load_tensors(path)?)?;
    Ok(net)
}
