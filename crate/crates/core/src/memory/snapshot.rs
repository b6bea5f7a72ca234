//! Binary memory snapshots.
//!
//! Layout (little-endian): `"VKBM"`, `u32` version, `u8` dedup mode, `u64`
//! entry count, `u32` key dim, `u32` relation dim, `u64` build seed, `u32`
//! max mentions; per entry `u32` topic, `u32` target, `u32` mention count,
//! `u32` provenance count, each provenance id as `u32` length + utf-8, then
//! the relation embedding as `f64`s; finally every key as `f64`s, row-major.

use std::path::Path;

use super::{DedupMode, KeyValueMemory, MemoryEntry};
use crate::corpus::io::write_atomic;
use crate::corpus::EntityPair;
use crate::error::{Result, VkbError};

pub const MEMORY_MAGIC: &[u8; 4] = b"VKBM";
pub const MEMORY_VERSION: u32 = 1;

pub fn memory_to_bytes(m: &KeyValueMemory) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MEMORY_MAGIC);
    out.extend_from_slice(&MEMORY_VERSION.to_le_bytes());
    out.push(match m.dedup {
        DedupMode::AllMentions => 0,
        DedupMode::Averaged => 1,
    });
    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
    out.extend_from_slice(&(m.key_dim as u32).to_le_bytes());
    out.extend_from_slice(&(m.relation_dim as u32).to_le_bytes());
    out.extend_from_slice(&m.build_seed.to_le_bytes());
    out.extend_from_slice(&(m.max_mentions as u32).to_le_bytes());
    for e in m.entries() {
        out.extend_from_slice(&e.pair.topic.to_le_bytes());
        out.extend_from_slice(&e.pair.target.to_le_bytes());
        out.extend_from_slice(&e.mention_count.to_le_bytes());
        out.extend_from_slice(&(e.provenance.len() as u32).to_le_bytes());
        for p in &e.provenance {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            out.extend_from_slice(p.as_bytes());
        }
        for v in &e.relation {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for e in m.entries() {
        for v in &e.key {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'b> {
    data: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.data.len() - self.pos < n {
            return Err(VkbError::Corrupt(format!(
                "memory snapshot truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn memory_from_bytes(data: &[u8]) -> Result<KeyValueMemory> {
    let mut c = Cursor { data, pos: 0 };
    if c.take(4)? != MEMORY_MAGIC {
        return Err(VkbError::Corrupt("not a memory snapshot".into()));
    }
    let version = c.u32()?;
    if version != MEMORY_VERSION {
        return Err(VkbError::VersionMismatch {
            found: version,
            expected: MEMORY_VERSION,
        });
    }
    let dedup = match c.take(1)?[0] {
        0 => DedupMode::AllMentions,
        1 => DedupMode::Averaged,
        d => return Err(VkbError::Corrupt(format!("unknown dedup mode {d}"))),
    };
    let count = c.u64()? as usize;
    let key_dim = c.u32()? as usize;
    let relation_dim = c.u32()? as usize;
    let build_seed = c.u64()?;
    let max_mentions = c.u32()? as usize;
    // Each record needs at least 16 header bytes; reject absurd counts before allocating.
    if count > data.len() / 16 {
        return Err(VkbError::Corrupt(format!("entry count {count} exceeds file size")));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let topic = c.u32()?;
        let target = c.u32()?;
        if topic == target {
            return Err(VkbError::Corrupt("entry pairs an entity with itself".into()));
        }
        let mention_count = c.u32()?;
        let np = c.u32()? as usize;
        let mut provenance = Vec::with_capacity(np.min(1024));
        for _ in 0..np {
            let len = c.u32()? as usize;
            let s = std::str::from_utf8(c.take(len)?)
                .map_err(|_| VkbError::Corrupt("provenance is not utf-8".into()))?;
            provenance.push(s.to_string());
        }
        let relation = c.f64s(relation_dim)?;
        entries.push(MemoryEntry {
            pair: EntityPair::new(topic, target),
            value_entity: target,
            key: Vec::new(),
            relation,
            mention_count,
            provenance,
        });
    }
    for e in &mut entries {
        e.key = c.f64s(key_dim)?;
    }
    if c.pos != data.len() {
        return Err(VkbError::Corrupt("trailing bytes after memory snapshot".into()));
    }
    Ok(KeyValueMemory::empty(dedup, key_dim, relation_dim, build_seed, max_mentions).with_entries(entries))
}

pub fn save_memory(memory: &KeyValueMemory, path: &Path) -> Result<()> {
    write_atomic(path, &memory_to_bytes(memory))
}

pub fn load_memory(path: &Path) -> Result<KeyValueMemory> {
    memory_from_bytes(&std::fs::read(path)?)
}
