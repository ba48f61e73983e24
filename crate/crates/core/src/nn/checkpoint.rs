//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic   8 bytes  b"DSTNET\0\0"
//! version u32      CHECKPOINT_VERSION
//! layers  u32
//! per layer: fan_out u32, fan_in u32
//! per layer: fan_out*fan_in weights (row-major f64), then fan_out biases (f64)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Dense, Network};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSTNET\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * net.param_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for l in net.layers() {
        buf.extend_from_slice(&(l.fan_out as u32).to_le_bytes());
        buf.extend_from_slice(&(l.fan_in as u32).to_le_bytes());
    }
    for l in net.layers() {
        for v in l.weights.iter().chain(&l.bias) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Network> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Network> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Schema("not a network checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Schema(format!("unsupported checkpoint version {version}")));
    }
    let n = cur.u32()? as usize;
    let shapes = (0..n).map(|_| Ok((cur.u32()? as usize, cur.u32()? as usize))).collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(n);
    for (fan_out, fan_in) in shapes {
        let mut layer = Dense::zeros(fan_in, fan_out);
        for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            *v = cur.f64()?;
        }
        layers.push(layer);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Schema("trailing bytes after checkpoint".into()));
    }
    Network::new(layers)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let out = self.bytes.get(self.pos..end).ok_or_else(|| Error::Schema("truncated checkpoint".into()))?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
