//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic, version, step, string metadata, RNG states, named `f32`
//! arrays, then an FNV-1a checksum of everything before it.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"DIFFAUG\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch; file is corrupt")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no entry {0:?}")]
    Missing(String),
}

/// Full position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub meta: Vec<(String, String)>,
    pub rngs: Vec<(String, RngState)>,
    pub arrays: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend(self.step.to_le_bytes());
        out.extend((self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend((self.rngs.len() as u32).to_le_bytes());
        for (name, s) in &self.rngs {
            put_str(&mut out, name);
            out.extend(s.seed);
            out.extend(s.stream.to_le_bytes());
            out.extend(s.word_pos.to_le_bytes());
        }
        out.extend((self.arrays.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.arrays {
            put_str(&mut out, name);
            out.extend((shape.len() as u32).to_le_bytes());
            shape.iter().for_each(|&d| out.extend((d as u64).to_le_bytes()));
            out.extend((data.len() as u64).to_le_bytes());
            data.iter().for_each(|v| out.extend(v.to_le_bytes()));
        }
        let sum = fnv1a(&out);
        out.extend(sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() + 12 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(CheckpointError::Checksum);
        }
        let mut c = Cursor { buf: body, pos: 8 };
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let step = c.u64()?;
        let mut ck = Checkpoint {
            step,
            ..Default::default()
        };
        for _ in 0..c.u32()? {
            ck.meta.push((c.string()?, c.string()?));
        }
        for _ in 0..c.u32()? {
            let name = c.string()?;
            let seed: [u8; 32] = c.take(32)?.try_into().unwrap();
            let stream = c.u64()?;
            let word_pos = c.u128()?;
            ck.rngs.push((name, RngState { seed, stream, word_pos }));
        }
        for _ in 0..c.u32()? {
            let name = c.string()?;
            let ndim = c.u32()? as usize;
            let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let len = c.u64()? as usize;
            if shape.iter().product::<usize>() != len {
                return Err(CheckpointError::Malformed(format!("array {name} shape/length disagree")));
            }
            let raw = c.take(len.checked_mul(4).ok_or_else(|| CheckpointError::Malformed("length overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            ck.arrays.push((name, shape, data));
        }
        if c.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| CheckpointError::Missing(key.to_string()))
    }

    pub fn rng(&self, name: &str) -> Result<RngState, CheckpointError> {
        self.rngs
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, s)| *s)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn array(&self, name: &str) -> Result<&[f32], CheckpointError> {
        self.arrays
            .iter()
            .find(|(k, _, _)| k == name)
            .map(|(_, _, d)| d.as_slice())
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }
}
