//! Weights file (little-endian):
//!
//! ```text
//! "NFVW"  u32 version
//! u32 len + fingerprint (hex)  u32 len + architecture line
//! u32 tensor count
//! per tensor: u32 name length, name, u32 rank, u32 dims…, f32 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Arch, ModelWeights};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"NFVW";
pub const WEIGHTS_VERSION: u32 = 1;

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend((s.len() as u32).to_le_bytes());
    buf.extend(s.as_bytes());
}

pub fn save_weights(w: &ModelWeights<f32>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * w.param_count());
    buf.extend(WEIGHTS_MAGIC);
    buf.extend(WEIGHTS_VERSION.to_le_bytes());
    put_str(&mut buf, &w.arch.fingerprint());
    put_str(&mut buf, &w.arch.describe());
    buf.extend((w.tensors.len() as u32).to_le_bytes());
    for t in &w.tensors {
        put_str(&mut buf, &t.name);
        buf.extend((t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            buf.extend((*d as u32).to_le_bytes());
        }
        for v in &t.data {
            buf.extend(v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated weights file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("non-UTF-8 string in weights file".into()))
    }
}

/// Loads weights; with `expected` set, the stored architecture must match
/// it exactly.
pub fn load_weights(path: &Path, expected: Option<&Arch>) -> Result<ModelWeights<f32>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::Format("not a weights file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let fingerprint = c.string()?;
    let arch = Arch::parse(&c.string()?)?;
    if arch.fingerprint() != fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: arch.fingerprint(),
            found: fingerprint,
        });
    }
    if let Some(exp) = expected {
        if exp.fingerprint() != fingerprint || *exp != arch {
            return Err(Error::FingerprintMismatch {
                expected: exp.fingerprint(),
                found: fingerprint,
            });
        }
    }
    let mut w = ModelWeights::<f32>::zeros(&arch);
    let count = c.u32()? as usize;
    if count != w.tensors.len() {
        return Err(Error::Format(format!("{count} tensors stored, architecture has {}", w.tensors.len())));
    }
    for t in &mut w.tensors {
        let name = c.string()?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != t.name || shape != t.shape {
            return Err(Error::Format(format!("tensor {name} {shape:?} does not match {} {:?}", t.name, t.shape)));
        }
        let bytes = c.take(4 * t.data.len())?;
        for (v, b) in t.data.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes in weights file".into()));
    }
    Ok(w)
}
