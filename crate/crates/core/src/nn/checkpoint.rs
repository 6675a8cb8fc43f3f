//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "LODOMCKP"
//! version      u32      1
//! config       u32 length + UTF-8 TOML
//! epoch        u32
//! adam step    u64
//! count        u32
//! count × { u32 name length, name, u32 ndim (= 2), u32 rows, u32 cols,
//!           rows·cols f32 values }
//! count × { rows·cols f64 first moments, rows·cols f64 second moments }
//! ```
//!
//! Parameter values are kept on the f32 grid by [`ParamStore`], so a write
//! followed by a read reproduces the store bit for bit.

use std::fs;
use std::path::Path;

use super::params::{ParamEntry, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 8] = b"LODOMCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    pub epoch: u32,
    pub params: ParamStore,
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut out, ckpt.config_toml.as_bytes());
    out.extend_from_slice(&ckpt.epoch.to_le_bytes());
    out.extend_from_slice(&ckpt.params.step_count().to_le_bytes());
    let entries = ckpt.params.entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        put_bytes(&mut out, e.name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(e.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(e.value.cols() as u32).to_le_bytes());
        for &v in e.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for e in entries {
        for &v in e.m.data().iter().chain(e.v.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_toml = String::from_utf8(r.bytes_field()?.to_vec())
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let epoch = r.u32()?;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(r.bytes_field()?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()?;
        if ndim != 2 {
            return Err(Error::Checkpoint(format!("{name}: unsupported rank {ndim}")));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let b: [u8; 4] = r.take(4)?.try_into().unwrap();
            data.push(f32::from_le_bytes(b) as f64);
        }
        entries.push(ParamEntry {
            name,
            value: Tensor::from_vec(rows, cols, data),
            grad: Tensor::zeros(rows, cols),
            m: Tensor::zeros(rows, cols),
            v: Tensor::zeros(rows, cols),
        });
    }
    for e in &mut entries {
        for slot in e.m.data_mut() {
            *slot = r.f64()?;
        }
        for slot in e.v.data_mut() {
            *slot = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let mut params = ParamStore::new();
    for e in entries {
        params.push_entry(e)?;
    }
    params.step = step;
    Ok(Checkpoint {
        config_toml,
        epoch,
        params,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(ckpt))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Adam;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        let a = params.register_uniform("a.weight", 3, 4, 3, 7).unwrap();
        params.register_uniform("b.bias", 1, 5, 5, 7).unwrap();
        *params.grad_mut(a) = Tensor::filled(3, 4, 0.3);
        Adam::default().step(&mut params, 1e-3);
        params.zero_grad();
        Checkpoint {
            config_toml: "[input]\npoints = 32\n".into(),
            epoch: 4,
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample();
        let back = decode(&encode(&ckpt)).unwrap();
        assert!(back.params.bit_identical(&ckpt.params));
        assert_eq!(back.config_toml, ckpt.config_toml);
        assert_eq!(back.epoch, 4);
        assert_eq!(encode(&back), encode(&ckpt));
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
