//! Binary checkpoints of named tensors.
//!
//! Layout (little endian): magic `AADM`, `u32` version, then records until
//! end of file. Each record is a `u16` name length, the UTF-8 name, a `u8`
//! rank, `rank` `u32` extents and the `f64` payload in row-major order.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AADM";
pub const CHECKPOINT_VERSION: u32 = 1;

const META_STEP: &str = "meta.step";
const META_EPOCH: &str = "meta.epoch";
const META_FINGERPRINT: &str = "meta.fingerprint";
const MOMENT_M: &str = "optim.m.";
const MOMENT_V: &str = "optim.v.";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, t) in &self.tensors {
            let len =
                u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank of {name} too high")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &e in t.shape() {
                let e = u32::try_from(e).map_err(|_| Error::Checkpoint(format!("extent of {name} too large")))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let len = usize::from(r.u16()?);
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = usize::from(r.take(1)?[0]);
            let shape = (0..rank)
                .map(|_| r.u32().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let payload = r.take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("payload overflow".into()))?,
            )?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::decode(&bytes)
    }

    /// Snapshot of parameters, optimizer moments and training counters.
    pub fn capture(store: &ParamStore, optimizer: &Optimizer, epoch: usize, fingerprint: [u32; 2]) -> Self {
        let mut tensors = Vec::with_capacity(3 * store.len() + 3);
        for (_, p) in store.iter() {
            tensors.push((p.name.clone(), p.value.clone()));
        }
        for (id, p) in store.iter() {
            tensors.push((format!("{MOMENT_M}{}", p.name), optimizer.m[id.index()].clone()));
            tensors.push((format!("{MOMENT_V}{}", p.name), optimizer.v[id.index()].clone()));
        }
        tensors.push((META_STEP.into(), Tensor::vector(vec![optimizer.step as f64])));
        tensors.push((META_EPOCH.into(), Tensor::vector(vec![epoch as f64])));
        tensors.push((
            META_FINGERPRINT.into(),
            Tensor::vector(vec![f64::from(fingerprint[0]), f64::from(fingerprint[1])]),
        ));
        Self { tensors }
    }

    pub fn fingerprint(&self) -> Result<[u32; 2]> {
        let t = self.require(META_FINGERPRINT, &[2])?;
        Ok([t.data()[0] as u32, t.data()[1] as u32])
    }

    pub fn epoch(&self) -> Result<usize> {
        Ok(self.require(META_EPOCH, &[1])?.data()[0] as usize)
    }

    fn require(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn check_fingerprint(&self, expected: [u32; 2]) -> Result<()> {
        let found = self.fingerprint()?;
        if found != expected {
            return Err(Error::Checkpoint(format!(
                "configuration fingerprint mismatch: checkpoint {:08x}{:08x}, current {:08x}{:08x}",
                found[0], found[1], expected[0], expected[1]
            )));
        }
        Ok(())
    }

    /// Writes parameter values into `store`; every parameter must be present
    /// with a matching shape.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let t = self.require(&name, store.value(id).shape())?;
            store.get_mut(id).value = t.clone();
        }
        Ok(())
    }

    /// Restores parameters, optimizer moments and the step counter.
    /// Returns the stored epoch.
    pub fn restore(&self, store: &mut ParamStore, optimizer: &mut Optimizer) -> Result<usize> {
        self.restore_params(store)?;
        for (id, p) in store.iter() {
            let shape = p.value.shape();
            optimizer.m[id.index()] = self.require(&format!("{MOMENT_M}{}", p.name), shape)?.clone();
            optimizer.v[id.index()] = self.require(&format!("{MOMENT_V}{}", p.name), shape)?.clone();
        }
        optimizer.step = self.require(META_STEP, &[1])?.data()[0] as u64;
        self.epoch()
    }
}

/// First eight bytes of the SHA-256 digest of `description`, as two words.
pub fn fingerprint(description: &str) -> [u32; 2] {
    let digest = Sha256::digest(description.as_bytes());
    [
        u32::from_le_bytes(digest[0..4].try_into().unwrap()),
        u32::from_le_bytes(digest[4..8].try_into().unwrap()),
    ]
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
