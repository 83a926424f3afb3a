//! Binary checkpoint format.
//!
//! ```text
//! "FKPT"                 magic
//! u32                    format version (1)
//! u32 + bytes            model config as canonical JSON
//! u32                    tensor count
//! per tensor:
//!   u16 + bytes          name
//!   u8                   dtype (0 = f32, 1 = f64)
//!   u8                   ndim
//!   u32 * ndim           dims
//!   values               little-endian
//! ```
//!
//! All integers are little-endian. Tensors appear in parameter-store order,
//! so writing the same model twice yields identical bytes.

use std::fs;
use std::path::Path;

use super::{FortressModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"FKPT";
pub const VERSION: u32 = 1;

/// Serializes a model to bytes.
pub fn to_bytes<T: Element>(model: &FortressModel<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_string(model.config()).map_err(|e| Error::format(format!("config encoding: {e}")))?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let store = model.store();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::format(format!("parameter name too long: {}", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE.code());
        let dims = p.value.shape().dims();
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn save<T: Element>(model: &FortressModel<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(format!("truncated checkpoint while reading {what}"))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn read_values<T: Element>(raw: &[u8], dtype: DType) -> Vec<T> {
    match dtype {
        DType::F32 if T::DTYPE == DType::F32 => raw.chunks_exact(4).map(T::read_le).collect(),
        DType::F64 if T::DTYPE == DType::F64 => raw.chunks_exact(8).map(T::read_le).collect(),
        DType::F32 => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    }
}

/// Parses a checkpoint. Any inconsistency is a format error and no model is
/// returned.
pub fn from_bytes<T: Element>(buf: &[u8]) -> Result<FortressModel<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text =
        std::str::from_utf8(r.take(cfg_len, "config")?).map_err(|_| Error::format("checkpoint config is not UTF-8"))?;
    let config: ModelConfig = serde_json::from_str(cfg_text).map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
    let mut model = FortressModel::<T>::build(&config, 0).map_err(|e| Error::format(format!("checkpoint config: {e}")))?;

    let count = r.u32("tensor count")? as usize;
    if count != model.store().len() {
        return Err(Error::format(format!("checkpoint holds {count} tensors, model expects {}", model.store().len())));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name =
            std::str::from_utf8(r.take(name_len, "name")?).map_err(|_| Error::format("parameter name is not UTF-8"))?.to_string();
        let idx = model.store().position(&name).ok_or_else(|| Error::format(format!("unknown parameter '{name}'")))?;
        if std::mem::replace(&mut seen[idx], true) {
            return Err(Error::format(format!("parameter '{name}' appears twice")));
        }
        let dtype = DType::from_code(r.u8("dtype")?).ok_or_else(|| Error::format(format!("bad dtype for '{name}'")))?;
        let ndim = r.u8("ndim")? as usize;
        if ndim != 4 {
            return Err(Error::format(format!("parameter '{name}' has {ndim} dims, expected 4")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("dims")? as usize;
        }
        let expected = model.store().by_index(idx).value.shape();
        if dims != expected.dims() {
            return Err(Error::format(format!("parameter '{name}' has shape {dims:?}, expected {expected}")));
        }
        let numel = expected.numel();
        let raw = r.take(numel * dtype.size(), "values")?;
        let values = read_values::<T>(raw, dtype);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(format!("parameter '{name}' holds non-finite values")));
        }
        model.store_mut().by_index_mut(idx).value = Tensor::from_vec(expected, values)?;
    }
    if r.pos != buf.len() {
        return Err(Error::format(format!("{} trailing bytes after checkpoint", buf.len() - r.pos)));
    }
    Ok(model)
}

pub fn load<T: Element>(path: impl AsRef<Path>) -> Result<FortressModel<T>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tikan::TikanConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            levels: 2,
            widths: vec![4, 8],
            num_classes: 3,
            kernels: vec![5],
            input_size: 16,
            tikan: TikanConfig { gamma_c: 8, ..TikanConfig::default() },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let m = FortressModel::<f32>::build(&tiny(), 11).unwrap();
        let a = to_bytes(&m).unwrap();
        let b = to_bytes(&from_bytes::<f32>(&a).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_magic_and_truncation() {
        let m = FortressModel::<f32>::build(&tiny(), 11).unwrap();
        let mut a = to_bytes(&m).unwrap();
        let t = a[..a.len() - 3].to_vec();
        assert!(matches!(from_bytes::<f32>(&t), Err(Error::Format(_))));
        a[0] = b'X';
        assert!(matches!(from_bytes::<f32>(&a), Err(Error::Format(_))));
    }
}
