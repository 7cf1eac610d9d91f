//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "VCENETCK" | version u32 | config hash [32] | config text (u32 len + utf-8)
//! | iteration u64 | parameters | optimizer buffers | sha256 of everything before [32]
//! ```
//!
//! A tensor section is a `u32` count followed by records of name (`u16` len + utf-8),
//! trainable flag `u8`, rank `u8`, dims (`u32` each) and `f32` values. Encoding is a
//! pure function of the [`Checkpoint`] value, so decode followed by encode
//! reproduces the original bytes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"VCENETCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub config_text: String,
    pub iteration: u64,
    pub params: Vec<TensorRecord>,
    pub optimizer: Vec<TensorRecord>,
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn capture<T: Scalar>(
        config_hash: [u8; 32],
        config_text: &str,
        iteration: u64,
        store: &ParamStore<T>,
        optimizer: Option<&Optimizer<T>>,
    ) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| TensorRecord { name: p.name.clone(), trainable: p.trainable, value: p.value.cast() })
            .collect();
        let optimizer = optimizer
            .map(|o| {
                o.buffers
                    .iter()
                    .map(|(k, v)| TensorRecord { name: k.clone(), trainable: false, value: v.cast() })
                    .collect()
            })
            .unwrap_or_default();
        Checkpoint { config_hash, config_text: config_text.into(), iteration, params, optimizer }
    }

    /// Copies the stored values into `store`, which must have exactly the same
    /// parameter names, shapes and trainable flags.
    pub fn restore<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut problems = Vec::new();
        let by_name: BTreeMap<&str, &TensorRecord> = self.params.iter().map(|r| (r.name.as_str(), r)).collect();
        for (_, p) in store.iter() {
            match by_name.get(p.name.as_str()) {
                None => problems.push(format!("missing {}", p.name)),
                Some(r) if r.value.shape() != p.value.shape() => problems.push(format!(
                    "{}: checkpoint {:?} vs model {:?}",
                    p.name,
                    r.value.shape(),
                    p.value.shape()
                )),
                Some(r) if r.trainable != p.trainable => problems.push(format!("{}: trainable flag differs", p.name)),
                Some(_) => {}
            }
        }
        for r in &self.params {
            if store.id(&r.name).is_none() {
                problems.push(format!("unexpected {}", r.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::ParamMismatch(problems));
        }
        for r in &self.params {
            let id = store.id(&r.name).expect("checked above");
            *store.value_mut(id) = r.value.cast();
        }
        Ok(())
    }

    pub fn optimizer_buffers<T: Scalar>(&self) -> BTreeMap<String, Tensor<T>> {
        self.optimizer.iter().map(|r| (r.name.clone(), r.value.cast())).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        for section in [&self.params, &self.optimizer] {
            out.extend_from_slice(&(section.len() as u32).to_le_bytes());
            for r in section {
                out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
                out.extend_from_slice(r.name.as_bytes());
                out.push(u8::from(r.trainable));
                out.push(r.value.shape().len() as u8);
                for &d in r.value.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &v in r.value.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = sha256(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Load("not a checkpoint (bad magic)".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if sha256(body) != trailer {
            return Err(Error::Load("checksum mismatch (truncated or corrupt checkpoint)".into()));
        }
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Load(format!("unsupported checkpoint version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Load("config text is not utf-8".into()))?;
        let iteration = r.u64()?;
        let params = r.section()?;
        let optimizer = r.section()?;
        if r.pos != body.len() {
            return Err(Error::Load(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { config_hash, config_text, iteration, params, optimizer })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Load(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn section(&mut self) -> Result<Vec<TensorRecord>> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = self.u16()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Load("tensor name is not utf-8".into()))?;
            let trainable = match self.u8()? {
                0 => false,
                1 => true,
                f => return Err(Error::Load(format!("bad trainable flag {f} on {name}"))),
            };
            let rank = self.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Load("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let value = Tensor::from_vec(&shape, data).map_err(|e| Error::Load(format!("{name}: {e}")))?;
            out.push(TensorRecord { name, trainable, value });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", Tensor::from_vec(&[2, 1], vec![1.5, -2.0]).unwrap(), true);
        store.add("b", Tensor::scalar(0.25), false);
        let mut opt = Optimizer::new(Default::default());
        opt.buffers.insert("a.weight.momentum".into(), Tensor::from_vec(&[2, 1], vec![0.1, 0.2]).unwrap());
        Checkpoint::capture([7; 32], "x = 1\n", 42, &store, Some(&opt))
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let ck = sample();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::decode(&bytes[..20]).is_err());
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(Checkpoint::decode(&flipped), Err(Error::Load(_))));
    }

    #[test]
    fn restore_reports_every_mismatch() {
        let ck = sample();
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", Tensor::zeros(&[3]), true);
        store.add("c", Tensor::scalar(0.0), false);
        let Err(Error::ParamMismatch(p)) = ck.restore(&mut store) else { panic!() };
        assert_eq!(p.len(), 3, "{p:?}");
    }
}
