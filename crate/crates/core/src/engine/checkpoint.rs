//! Binary checkpoint container. All integers and floats are little-endian.
//!
//! ```text
//! magic          8 bytes  "EASIERCK"
//! version        u32      currently 1
//! spec_len       u64
//! spec           spec_len bytes of UTF-8 network text
//! tensor_count   u32
//! per tensor:
//!   name_len     u32
//!   name         name_len bytes, "<layer id>/<parameter name>"
//!   rank         u32
//!   dims         rank × u64
//!   data         Π dims × f64
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::engine::network::{Network, ParamMap};
use crate::engine::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EASIERCK";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let spec = net.spec().to_string();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.len() as u64).to_le_bytes());
    out.extend_from_slice(spec.as_bytes());
    let count: usize = net.params().values().map(BTreeMap::len).sum();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (layer, map) in net.params() {
        for (name, t) in map {
            let full = format!("{layer}/{name}");
            out.extend_from_slice(&(full.len() as u32).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} too large")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let spec_len = c.u64()?;
    let spec_text = std::str::from_utf8(c.take(spec_len)?)
        .map_err(|_| Error::Checkpoint("spec is not UTF-8".into()))?;
    let spec: NetworkSpec = spec_text.parse()?;
    let count = c.u32()?;
    let mut params: BTreeMap<String, ParamMap> = BTreeMap::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let (layer, param) = name
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("bad tensor name `{name}`")))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` too large")))?;
        let data = c
            .take(len)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        params
            .entry(layer.to_string())
            .or_default()
            .insert(param.to_string(), Tensor::new(shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Network::from_parts(spec, params)
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), &to_bytes(net))
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let spec: NetworkSpec = "input 1x6x6\nc conv2d in=1 out=2 k=3 act=prelu\nbn batchnorm c=2 act=gelu\nf flatten\nfc dense in=32 out=3\n"
            .parse()
            .unwrap();
        let net = Network::new(spec, 42).unwrap();
        let bytes = to_bytes(&net);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn truncation_is_an_error() {
        let net = Network::new("input 2\nfc dense in=2 out=2\n".parse().unwrap(), 0).unwrap();
        let bytes = to_bytes(&net);
        for cut in [0, 5, 12, 20, bytes.len() - 1] {
            assert!(from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }
}
