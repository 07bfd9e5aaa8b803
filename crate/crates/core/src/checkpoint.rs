//! Binary checkpoint format: config echo, step counter, RNG state, all
//! named parameters, and Adam moments, guarded by a CRC32 trailer.
//!
//! Tensors are stored as little-endian f32, so an f32 training run round
//! trips bitwise.

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::train::Adam;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const MAGIC: &[u8; 4] = b"MSVM";
pub const VERSION: u32 = 1;

// ---- CRC32 (IEEE, reflected, table-driven) ---------------------------------

fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    table
}

pub fn crc32(bytes: &[u8]) -> u32 {
    let table = crc32_table();
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

// ---- payload ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_text: String,
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub opt_t: u64,
    pub params: Vec<NamedTensor>,
    pub moments: Vec<MomentEntry>,
}

fn tensor_to_f32<T: Real>(t: &Tensor<T>) -> Vec<f32> {
    t.data().iter().map(|&v| v.as_f64() as f32).collect()
}

impl Checkpoint {
    pub fn capture<T: Real>(
        config_text: &str,
        step: u64,
        rng: &ChaCha8Rng,
        store: &ParamStore<T>,
        opt: &Adam<T>,
    ) -> Self {
        let params = store
            .iter()
            .map(|(_, e)| NamedTensor {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                data: tensor_to_f32(&e.value),
            })
            .collect();
        let moments = opt
            .state(store)
            .map(|(name, m, v)| MomentEntry {
                name,
                shape: m.shape().to_vec(),
                m: tensor_to_f32(m),
                v: tensor_to_f32(v),
            })
            .collect();
        Checkpoint {
            version: VERSION,
            config_text: config_text.to_string(),
            step,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            opt_t: opt.t,
            params,
            moments,
        }
    }

    /// Writes parameter values and optimizer state back into a store built
    /// from the same config, and returns the restored RNG.
    pub fn restore_into<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        opt: &mut Adam<T>,
    ) -> Result<ChaCha8Rng> {
        for p in &self.params {
            let id = store.find(&p.name).ok_or_else(|| {
                Error::Integrity(format!("checkpoint parameter {:?} not in model", p.name))
            })?;
            let value = store.value_mut(id);
            if value.shape() != &p.shape[..] {
                return Err(Error::Integrity(format!(
                    "parameter {:?} shape {:?} does not match checkpoint {:?}",
                    p.name,
                    value.shape(),
                    p.shape
                )));
            }
            for (dst, &src) in value.data_mut().iter_mut().zip(&p.data) {
                *dst = T::from_f64(src as f64);
            }
        }
        opt.t = self.opt_t;
        for e in &self.moments {
            let id = store.find(&e.name).ok_or_else(|| {
                Error::Integrity(format!("moment entry {:?} not in model", e.name))
            })?;
            let to_tensor = |data: &[f32]| {
                Tensor::new(
                    e.shape.clone(),
                    data.iter().map(|&v| T::from_f64(v as f64)).collect(),
                )
            };
            opt.restore_moment(id, to_tensor(&e.m)?, to_tensor(&e.v)?);
        }
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        Ok(rng)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_bytes(&mut out, self.config_text.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out.extend_from_slice(&self.opt_t.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_bytes(&mut out, p.name.as_bytes());
            put_shape(&mut out, &p.shape);
            put_f32s(&mut out, &p.data);
        }
        out.extend_from_slice(&(self.moments.len() as u32).to_le_bytes());
        for e in &self.moments {
            put_bytes(&mut out, e.name.as_bytes());
            put_shape(&mut out, &e.shape);
            put_f32s(&mut out, &e.m);
            put_f32s(&mut out, &e.v);
        }
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::Integrity("checkpoint shorter than header".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let actual = crc32(body);
        if stored != actual {
            return Err(Error::Integrity(format!(
                "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad checkpoint magic".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let config_text = String::from_utf8(r.bytes_field()?.to_vec()).map_err(|_| {
            Error::Format {
                offset: 8,
                msg: "config text is not UTF-8".into(),
            }
        })?;
        let step = r.u64()?;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let opt_t = r.u64()?;
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = r.name()?;
            let shape = r.shape()?;
            let data = r.f32s(shape.iter().product())?;
            params.push(NamedTensor { name, shape, data });
        }
        let n_moments = r.u32()? as usize;
        let mut moments = Vec::with_capacity(n_moments);
        for _ in 0..n_moments {
            let name = r.name()?;
            let shape = r.shape()?;
            let numel = shape.iter().product();
            let m = r.f32s(numel)?;
            let v = r.f32s(numel)?;
            moments.push(MomentEntry { name, shape, m, v });
        }
        if r.pos != body.len() {
            return Err(Error::Format {
                offset: r.pos,
                msg: format!("{} trailing bytes", body.len() - r.pos),
            });
        }
        Ok(Checkpoint {
            version,
            config_text,
            step,
            rng_seed,
            rng_word_pos,
            opt_t,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn put_shape(out: &mut Vec<u8>, shape: &[usize]) {
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity(format!(
                "checkpoint truncated at byte {}",
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    fn name(&mut self) -> Result<String> {
        let at = self.pos;
        String::from_utf8(self.bytes_field()?.to_vec()).map_err(|_| Error::Format {
            offset: at,
            msg: "name is not UTF-8".into(),
        })
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        Ok(shape)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
