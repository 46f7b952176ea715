//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "DPXRLCKP"
//! version    u32
//! config     vocab_size, embed_dim, num_layers, num_heads, mlp_ratio,
//!            max_horizon as u32, then seed as u64
//! count      u32 number of parameter records
//! record     name_len u32, name bytes (UTF-8), ndim u32, dims u32 * ndim,
//!            values f32 * prod(dims)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Policy, PolicyConfig};

pub const MAGIC: &[u8; 8] = b"DPXRLCKP";
pub const VERSION: u32 = 1;

pub fn encode(policy: &Policy) -> Vec<u8> {
    let cfg = policy.config();
    let mut out = Vec::with_capacity(64 + 4 * policy.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.vocab_size,
        cfg.embed_dim,
        cfg.num_layers,
        cfg.num_heads,
        cfg.mlp_ratio,
        cfg.max_horizon,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&(policy.param_specs().len() as u32).to_le_bytes());
    for spec in policy.param_specs() {
        out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
        for &dim in &spec.shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in &policy.params()[spec.range()] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corruption(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Policy> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut r = Reader { buf: bytes, pos: MAGIC.len() };
    let version = r.u32().map_err(|_| Error::Format("missing version".into()))?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let config = PolicyConfig {
        vocab_size: dims[0],
        embed_dim: dims[1],
        num_layers: dims[2],
        num_heads: dims[3],
        mlp_ratio: dims[4],
        max_horizon: dims[5],
        seed: r.u64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Corruption(format!("config block: {e}")))?;
    let template = Policy::init(PolicyConfig { seed: 0, ..config.clone() })?;
    let count = r.u32()? as usize;
    if count != template.param_specs().len() {
        return Err(Error::Corruption(format!(
            "expected {} parameter records, found {count}",
            template.param_specs().len()
        )));
    }
    let mut params = vec![0.0; template.num_params()];
    for spec in template.param_specs() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Corruption("parameter name is not UTF-8".into()))?;
        if name != spec.name {
            return Err(Error::Corruption(format!("expected record {}, found {name}", spec.name)));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != spec.shape {
            return Err(Error::Corruption(format!(
                "{name}: shape {shape:?} does not match config shape {:?}",
                spec.shape
            )));
        }
        let raw = r.take(4 * spec.len())?;
        for (slot, chunk) in params[spec.range()].iter_mut().zip(raw.chunks_exact(4)) {
            *slot = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Corruption(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Policy::from_parts(config, params)
}

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(policy: &Policy, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(policy))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Policy> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy() -> Policy {
        Policy::init(PolicyConfig {
            vocab_size: 4,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            mlp_ratio: 2,
            max_horizon: 10,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let p = policy();
        save_checkpoint(&p, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, p);
        let path2 = dir.path().join("q.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&policy());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        let mut bytes = encode(&policy());
        bytes[8] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_and_mismatched() {
        let bytes = encode(&policy());
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Corruption(_))));
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(matches!(decode(&extended), Err(Error::Corruption(_))));

        // first record is tok_emb [5, 8]; rewrite its leading dim
        let header = 8 + 4 + 6 * 4 + 8 + 4;
        let name_len = u32::from_le_bytes(bytes[header..header + 4].try_into().unwrap()) as usize;
        let dim0 = header + 4 + name_len + 4;
        let mut bad = bytes.clone();
        bad[dim0..dim0 + 4].copy_from_slice(&6u32.to_le_bytes());
        assert!(matches!(decode(&bad), Err(Error::Corruption(_))));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_checkpoint("/nonexistent/x.ckpt").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.ckpt"));
    }
}
