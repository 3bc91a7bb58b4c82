// SPDX-License-Identifier: Apache-2.0

//! NAPS binary pattern-store format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "NAPS"
//! 4       4     version (u32 LE) = 1
//! 8       4     bit_len (u32 LE)
//! 12      8     unique_count (u64 LE)
//! 20      1     has_multiplicities (0 or 1)
//! 21      ...   unique_count records of ceil(bit_len / 64) u64 LE words
//! ...     ...   if flagged: unique_count u32 LE multiplicities
//! ```
//!
//! Without the flag every multiplicity is 1. Nothing may follow the last
//! field.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{NapError, Result};
use crate::pattern::words_for;
use crate::store::PatternStore;

pub const NAPS_MAGIC: &[u8; 4] = b"NAPS";
pub const NAPS_VERSION: u32 = 1;
const HEADER_LEN: usize = 21;

pub fn encode_store(store: &PatternStore) -> Vec<u8> {
    let has_mult = store.multiplicities().iter().any(|&m| m != 1);
    let mut out = Vec::with_capacity(HEADER_LEN + store.raw_words().len() * 8 + store.len() * 4);
    out.extend_from_slice(NAPS_MAGIC);
    out.extend_from_slice(&NAPS_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.bit_len() as u32).to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    out.push(u8::from(has_mult));
    for w in store.raw_words() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    if has_mult {
        for m in store.multiplicities() {
            out.extend_from_slice(&m.to_le_bytes());
        }
    }
    out
}

pub fn decode_store(bytes: &[u8], layer_name: &str) -> Result<PatternStore> {
    if bytes.len() < 4 || &bytes[..4] != NAPS_MAGIC {
        return Err(NapError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(NapError::Truncated(format!("{}-byte NAPS header", bytes.len())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != NAPS_VERSION {
        return Err(NapError::UnsupportedVersion {
            found: version,
            supported: NAPS_VERSION,
        });
    }
    let bit_len = u32_at(8) as usize;
    let unique = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let has_mult = match bytes[20] {
        0 => false,
        1 => true,
        f => return Err(NapError::Corrupt(format!("multiplicity flag {f}"))),
    };
    let stride = words_for(bit_len) as u128;
    let body = u128::from(unique) * (stride * 8 + if has_mult { 4 } else { 0 });
    let available = (bytes.len() - HEADER_LEN) as u128;
    if available < body {
        return Err(NapError::Truncated(format!(
            "NAPS body holds {available} bytes, header requires {body}"
        )));
    }
    if available > body {
        return Err(NapError::Corrupt(format!("{} trailing bytes", available - body)));
    }
    let unique = unique as usize;
    let word_bytes = unique * stride as usize * 8;
    let words = bytes[HEADER_LEN..HEADER_LEN + word_bytes]
        .chunks_exact(8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let multiplicities = if has_mult {
        bytes[HEADER_LEN + word_bytes..]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect()
    } else {
        vec![1; unique]
    };
    PatternStore::from_parts(layer_name, bit_len, words, multiplicities)
}

pub fn save_store(path: impl AsRef<Path>, store: &PatternStore) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_store(store))?;
    f.sync_all()?;
    Ok(())
}

/// Loads a store, naming it after `layer_name`.
pub fn load_store_as(path: impl AsRef<Path>, layer_name: &str) -> Result<PatternStore> {
    decode_store(&fs::read(path)?, layer_name)
}

/// Loads a store, naming it after the file stem.
pub fn load_store(path: impl AsRef<Path>) -> Result<PatternStore> {
    let path = path.as_ref();
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
    load_store_as(path, &name)
}
