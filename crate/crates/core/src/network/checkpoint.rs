//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "ASPVMCK\0"
//! version    u32
//! config     u64 length + UTF-8 TOML (must contain a [network] table)
//! epoch      u64
//! step       u64
//! rng        u8 flag; when 1: seed u64, stream u64, word_pos u128
//! arrays     u32 count, then per array:
//!              kind u8 (0 param, 1 buffer, 2 optimizer m, 3 optimizer v)
//!              name u32 length + UTF-8
//!              rank u32, dims u64 * rank
//!              data f32 * prod(dims)
//! checksum   u64 FNV-1a over every preceding byte
//! ```

use std::path::Path;

use serde::Deserialize;

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ASPVMCK\0";

/// ChaCha stream position, enough to resume a generator exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArrayKind {
    Param,
    Buffer,
    OptimM,
    OptimV,
}

impl ArrayKind {
    fn tag(self) -> u8 {
        match self {
            ArrayKind::Param => 0,
            ArrayKind::Buffer => 1,
            ArrayKind::OptimM => 2,
            ArrayKind::OptimV => 3,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => ArrayKind::Param,
            1 => ArrayKind::Buffer,
            2 => ArrayKind::OptimM,
            3 => ArrayKind::OptimV,
            other => return Err(Error::Checkpoint(format!("unknown array kind {}", other))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub kind: ArrayKind,
    pub name: String,
    pub value: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub epoch: u64,
    pub step: u64,
    pub rng: Option<RngState>,
    pub arrays: Vec<NamedArray>,
}

#[derive(Deserialize)]
struct NetworkSection {
    network: NetworkConfig,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 text".into()))
    }
}

impl Checkpoint {
    /// Parameters and buffers of `net`; `config_text` must contain a
    /// `[network]` table matching `net.cfg` (it may hold other tables).
    pub fn from_network<T: Float>(net: &Network<T>, config_text: String) -> Self {
        let mut arrays = Vec::new();
        for p in net.store.params() {
            arrays.push(NamedArray { kind: ArrayKind::Param, name: p.name.clone(), value: p.value.cast() });
        }
        for b in net.store.buffers() {
            arrays.push(NamedArray { kind: ArrayKind::Buffer, name: b.name.clone(), value: b.value.cast() });
        }
        Checkpoint { config_text, epoch: 0, step: 0, rng: None, arrays }
    }

    /// Config text holding only the network table.
    pub fn network_only_config(cfg: &NetworkConfig) -> String {
        let mut t = toml::Table::new();
        t.insert("network".into(), toml::Value::Table(toml::Table::try_from(cfg).expect("serializable")));
        toml::to_string(&t).expect("serializable")
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let s: NetworkSection = toml::from_str(&self.config_text)
            .map_err(|e| Error::Checkpoint(format!("stored config has no valid [network] table: {}", e)))?;
        Ok(s.network)
    }

    pub fn arrays_of(&self, kind: ArrayKind) -> impl Iterator<Item = &NamedArray> {
        self.arrays.iter().filter(move |a| a.kind == kind)
    }

    /// Rebuilds the stored network and loads its weights.
    pub fn restore<T: Float>(&self) -> Result<Network<T>> {
        let cfg = self.network_config()?;
        let mut net = Network::build(&cfg)?;
        self.load_into(&mut net)?;
        Ok(net)
    }

    /// Loads weights into an existing network after checking that its
    /// configuration matches the stored one.
    pub fn load_into<T: Float>(&self, net: &mut Network<T>) -> Result<()> {
        let stored = self.network_config()?;
        let diff = stored.diff(&net.cfg);
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!(
                "configuration mismatch (stored != expected):\n  {}",
                diff.join("\n  ")
            )));
        }
        let mut seen = 0;
        for a in self.arrays_of(ArrayKind::Param) {
            let id = net
                .store
                .find(&a.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", a.name)))?;
            net.store
                .set_value(id, a.value.cast())
                .map_err(|e| Error::Checkpoint(format!("parameter `{}`: {}", a.name, e)))?;
            seen += 1;
        }
        if seen != net.store.params().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, network has {}",
                seen,
                net.store.params().len()
            )));
        }
        for a in self.arrays_of(ArrayKind::Buffer) {
            let id = net
                .store
                .find_buffer(&a.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected buffer `{}`", a.name)))?;
            let buf = net.store.buffer_mut(id);
            if buf.value.shape() != a.value.shape() {
                return Err(Error::Checkpoint(format!("buffer `{}` has shape {:?}", a.name, a.value.shape())));
            }
            buf.value = a.value.cast();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        b.extend_from_slice(self.config_text.as_bytes());
        b.extend_from_slice(&self.epoch.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        match self.rng {
            Some(r) => {
                b.push(1);
                b.extend_from_slice(&r.seed.to_le_bytes());
                b.extend_from_slice(&r.stream.to_le_bytes());
                b.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => b.push(0),
        }
        b.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            b.push(a.kind.tag());
            b.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            b.extend_from_slice(a.name.as_bytes());
            b.extend_from_slice(&(a.value.rank() as u32).to_le_bytes());
            for &d in a.value.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in a.value.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&b);
        b.extend_from_slice(&sum.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (this build reads {})",
                version, CHECKPOINT_VERSION
            )));
        }
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Checkpoint("checksum mismatch, file is corrupt".into()));
        }
        let n = r.u64()? as usize;
        let config_text = r.string(n)?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let rng = match r.u8()? {
            0 => None,
            1 => Some(RngState { seed: r.u64()?, stream: r.u64()?, word_pos: r.u128()? }),
            other => return Err(Error::Checkpoint(format!("bad rng flag {}", other))),
        };
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = ArrayKind::from_tag(r.u8()?)?;
            let len = r.u32()? as usize;
            let name = r.string(len)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let value = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("array `{}`: {}", name, e)))?;
            arrays.push(NamedArray { kind, name, value });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after the last array".into()));
        }
        Ok(Checkpoint { config_text, epoch, step, rng, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
