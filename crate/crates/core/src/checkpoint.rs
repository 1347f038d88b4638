//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "CSECKPT\0"
//! version    u32
//! header     u64 length + UTF-8 JSON (configs and free-form metadata)
//! count      u32
//! tensors    count × { u32 name length, name, u32 rank, rank × u64 dims, f64 values }
//! ```
//!
//! Generator tensors are prefixed `gen.`, discriminator tensors `disc.`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::discriminator::{DiscriminatorConfig, DiscriminatorWeights};
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorWeights};

pub const MAGIC: &[u8; 8] = b"CSECKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub discriminator: Option<DiscriminatorConfig>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Tensor)>,
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
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, wide: bool) -> Result<usize> {
        let v = if wide { self.u64()? } else { u64::from(self.u32()?) };
        usize::try_from(v).map_err(|_| Error::Checkpoint("length overflows".into()))
    }
}

impl Checkpoint {
    pub fn generator(cfg: &GeneratorConfig, weights: &GeneratorWeights) -> Self {
        Self {
            header: Header {
                generator: cfg.clone(),
                discriminator: None,
                meta: BTreeMap::new(),
            },
            tensors: weights
                .named_params()
                .into_iter()
                .map(|(n, t)| (format!("gen.{n}"), t.clone()))
                .collect(),
        }
    }

    pub fn with_discriminator(mut self, cfg: &DiscriminatorConfig, weights: &DiscriminatorWeights) -> Self {
        self.header.discriminator = Some(cfg.clone());
        self.tensors.retain(|(n, _)| !n.starts_with("disc."));
        let named = weights.named_params().into_iter().map(|(n, t)| (n, t.clone()));
        self.tensors
            .extend(named.chain(weights.spectral_vectors()).map(|(n, t)| (format!("disc.{n}"), t)));
        self
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.header.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = c.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = c.len(true)?;
        let header: Header = serde_json::from_slice(c.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let count = c.len(false)?;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = c.len(false)?;
            let name = std::str::from_utf8(c.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = c.len(false)?;
            let shape = (0..rank).map(|_| c.len(true)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
            let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if c.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Generator weights, shape-checked against the stored config.
    pub fn generator_weights(&self) -> Result<GeneratorWeights> {
        let cfg = &self.header.generator;
        let mut w = GeneratorWeights::identity_mask(cfg)?;
        w.load_named(|n| self.tensor(&format!("gen.{n}")).cloned())?;
        Ok(w)
    }

    /// Discriminator weights if the checkpoint carries them.
    pub fn discriminator_weights(&self) -> Result<Option<(DiscriminatorConfig, DiscriminatorWeights)>> {
        let Some(cfg) = &self.header.discriminator else {
            return Ok(None);
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = DiscriminatorWeights::zeros(cfg, &mut rng)?;
        w.load_named(|n| self.tensor(&format!("disc.{n}")).cloned())?;
        Ok(Some((cfg.clone(), w)))
    }
}
