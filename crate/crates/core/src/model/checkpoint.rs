//! Binary checkpoint format.
//!
//! ```text
//! "MTPSLAB1"  u32 version  u32 len + config JSON  u32 n_records
//! per record: u32 len + name  u8 dtype  u8 rank  u64 dims[rank]
//!             u64 payload_len  payload (little-endian)  u32 crc32(payload)
//! u32 crc32(all preceding bytes)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

use super::{DecoderModel, ModelConfig};

pub const MAGIC: &[u8; 8] = b"MTPSLAB1";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint_bytes<T: Scalar>(model: &DecoderModel<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(model.params().numel() * T::DTYPE.size() + 4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json = model.config().to_canonical_json()?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let mut payload = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &x in t.data() {
            x.write_le(&mut payload);
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    }
    let file_crc = crc32fast::hash(&out);
    out.extend_from_slice(&file_crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint_bytes<T: Scalar>(buf: &[u8]) -> Result<DecoderModel<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic").map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let len = r.u32("config length")? as usize;
    let json = r.take(len, "config")?;
    let config: ModelConfig = serde_json::from_slice(json)?;
    let mut model = DecoderModel::<T>::zeroed(config)?;
    let n = r.u32("record count")? as usize;
    if n != model.params().len() {
        return Err(Error::Contract(format!(
            "checkpoint has {n} parameters, configuration defines {}",
            model.params().len()
        )));
    }
    for id in 0..n {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8_lossy(r.take(name_len, "name")?).into_owned();
        let expected_name = model.params().name(id).to_string();
        if name != expected_name {
            return Err(Error::RegistryOrder {
                expected: expected_name,
                found: name,
            });
        }
        let dtype = r.u8("dtype")?;
        if dtype != T::DTYPE.code() {
            return Err(Error::DtypeMismatch {
                name,
                expected: T::DTYPE.code(),
                found: dtype,
            });
        }
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dims")? as usize);
        }
        let expected_shape = model.params().get(id).shape().to_vec();
        if dims != expected_shape {
            return Err(Error::ShapeMismatch {
                name,
                expected: expected_shape,
                found: dims,
            });
        }
        let numel: usize = dims.iter().product();
        let payload_len = r.u64("payload length")? as usize;
        if payload_len != numel * T::DTYPE.size() {
            return Err(Error::ShapeMismatch {
                name,
                expected: expected_shape,
                found: vec![payload_len / T::DTYPE.size().max(1)],
            });
        }
        let payload = r.take(payload_len, "payload")?;
        let crc = r.u32("checksum")?;
        if crc != crc32fast::hash(payload) {
            return Err(Error::Checksum(name));
        }
        let data: Vec<T> = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        *model.params_mut().get_mut(id) = Tensor::new(dims, data)?;
    }
    let body_end = r.pos;
    if r.u32("file checksum")? != crc32fast::hash(&buf[..body_end]) {
        return Err(Error::Checksum("<file>".into()));
    }
    if r.pos != buf.len() {
        return Err(Error::Contract(format!(
            "{} trailing bytes after the last record",
            buf.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &DecoderModel<T>, path: &Path) -> Result<()> {
    let bytes = write_checkpoint_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<DecoderModel<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::synthdata::SynthGrammar;

    fn model(v: Variant) -> DecoderModel<f32> {
        let mut c = ModelConfig::new(&SynthGrammar::default(), v, 3);
        c.d_model = 8;
        c.d_ff = 16;
        c.n_heads = 2;
        DecoderModel::new(c, 5).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for v in Variant::ALL {
            let m = model(v);
            let a = write_checkpoint_bytes(&m).unwrap();
            let back: DecoderModel<f32> = read_checkpoint_bytes(&a).unwrap();
            assert_eq!(back, m);
            assert_eq!(write_checkpoint_bytes(&back).unwrap(), a);
        }
    }

    #[test]
    fn distinct_errors() {
        let bytes = write_checkpoint_bytes(&model(Variant::MtpVocalnet)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint_bytes::<f32>(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            read_checkpoint_bytes::<f32>(&bad),
            Err(Error::UnsupportedVersion(9))
        ));
        assert!(matches!(
            read_checkpoint_bytes::<f32>(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            read_checkpoint_bytes::<f64>(&bytes),
            Err(Error::DtypeMismatch { .. })
        ));
        let mut bad = bytes.clone();
        let last = bad.len() - 5;
        bad[last] ^= 0x10;
        assert!(matches!(read_checkpoint_bytes::<f32>(&bad), Err(Error::Checksum(_))));
    }
}
