use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::nn::Weights;
use crate::tensor::{Real, Shape, Tensor};

const MAGIC: &[u8; 8] = b"PECCKPT\0";
const VERSION: u32 = 1;

fn dtype_tag<T: Real>() -> u8 {
    if T::BYTES == 4 {
        0
    } else {
        1
    }
}

/// Container: magic, version, graph JSON, then named tensors (kind, name,
/// dtype, four extents, little-endian payload).
pub fn encode_checkpoint<T: Real>(graph: &ModelGraph, weights: &Weights<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(graph)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let entries: Vec<(u8, &str, &Tensor<T>)> = weights
        .params()
        .map(|(n, t)| (0u8, n, t))
        .chain(weights.buffers().map(|(n, t)| (1u8, n, t)))
        .collect();
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (kind, name, t) in entries {
        out.push(kind);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype_tag::<T>());
        for d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(ModelGraph, Weights<T>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u64()? as usize;
    let graph: ModelGraph = serde_json::from_slice(r.take(len)?)?;
    graph.validate()?;
    let count = r.u64()?;
    let mut weights = Weights::new();
    for _ in 0..count {
        let kind = r.u8()?;
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        let width = match dtype {
            0 => 4,
            1 => 8,
            other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
        };
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u64()? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
        let payload = r.take(shape.numel() * width)?;
        let data: Vec<T> = payload
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    T::cast(f32::read_le(c) as f64)
                } else {
                    T::cast(f64::read_le(c))
                }
            })
            .collect();
        let t = Tensor::new(shape, data)?;
        match kind {
            0 => weights.add_param(name, t)?,
            1 => weights.add_buffer(name, t)?,
            other => return Err(Error::Format(format!("unknown tensor kind {other}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((graph, weights))
}

pub fn save_checkpoint<T: Real>(path: &Path, graph: &ModelGraph, weights: &Weights<T>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(graph, weights)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ModelGraph, Weights<T>)> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::Usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}
