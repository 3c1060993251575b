//! `AVRM` model files.
//!
//! Layout (little-endian): magic `AVRM`, u32 version, u32 byte length of the
//! JSON-encoded [`ModelConfig`], the JSON bytes, u32 tensor count, then per
//! tensor a u32 rank, `rank` u32 dimensions and the values as f32.

use std::path::Path;

use diffkit::{Scalar, Tensor};

use super::{ModelConfig, Network};
use crate::binio::{len_u32, put_f32, put_u32, read_file, write_file, Reader};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVRM";
pub const CHECKPOINT_VERSION: u32 = 1;

impl<T: Scalar> Network<T> {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let config = serde_json::to_vec(self.config()).map_err(|e| Error::contract(e.to_string()))?;
        put_u32(&mut out, len_u32(config.len(), "config length")?);
        out.extend_from_slice(&config);
        write_tensors(&mut out, self.params())?;
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let n = r.u32()? as usize;
        let at = r.offset();
        let config: ModelConfig = serde_json::from_slice(r.take(n)?).map_err(|e| Error::Format {
            offset: at,
            detail: format!("model config: {e}"),
        })?;
        let params = read_tensors(&mut r)?;
        r.finish()?;
        Network::from_parts(config, params)
    }
}

pub(crate) fn write_tensors<T: Scalar>(out: &mut Vec<u8>, tensors: &[Tensor<T>]) -> Result<()> {
    put_u32(out, len_u32(tensors.len(), "tensor count")?);
    for t in tensors {
        put_u32(out, len_u32(t.rank(), "rank")?);
        for &dim in t.shape() {
            put_u32(out, len_u32(dim, "dimension")?);
        }
        for &v in t.data() {
            put_f32(out, v.to_f32().unwrap_or(f32::NAN));
        }
    }
    Ok(())
}

pub(crate) fn read_tensors<T: Scalar>(r: &mut Reader<'_>) -> Result<Vec<Tensor<T>>> {
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.offset();
        let rank = r.u32()? as usize;
        if rank > 3 {
            return Err(Error::Format {
                offset: at,
                detail: format!("tensor rank {rank} exceeds 3"),
            });
        }
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let data = r.f32_vec(shape.iter().product())?;
        tensors.push(Tensor::new(shape, data.into_iter().map(|v| T::lit(v as f64)).collect())?);
    }
    Ok(tensors)
}

/// Writes `net` to `path` in the `AVRM` format (values stored as f32).
pub fn write_checkpoint<T: Scalar>(path: &Path, net: &Network<T>) -> Result<()> {
    write_file(path, &net.to_checkpoint_bytes()?)
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Network<T>> {
    Network::from_checkpoint_bytes(&read_file(path)?)
}
