//! Binary dataset files.
//!
//! Layout: `"ATWD"`, u32 version, u32 dim, u64 count, u64 seed, schedule
//! block, then `count·dim` little-endian f64 values, row-major.

use std::fs;
use std::path::Path;

use super::{decode_schedule, encode_schedule, put_f64s, schedule_block_len, ByteReader};
use crate::error::{Error, Result};
use crate::oracle::NoisyDataset;

pub const DATASET_MAGIC: [u8; 4] = *b"ATWD";
pub const DATASET_VERSION: u32 = 1;

/// Bytes before the payload.
pub fn header_len(dataset: &NoisyDataset) -> usize {
    4 + 4 + 4 + 8 + 8 + schedule_block_len(&dataset.schedule)
}

pub fn encode_dataset(dataset: &NoisyDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(dataset) + dataset.count() * dataset.dim() * 8);
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.count() as u64).to_le_bytes());
    out.extend_from_slice(&dataset.seed.to_le_bytes());
    encode_schedule(&mut out, &dataset.schedule);
    for row in &dataset.samples {
        put_f64s(&mut out, row);
    }
    out
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<NoisyDataset> {
    if bytes.len() < 4 || bytes[..4] != DATASET_MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let mut r = ByteReader::new(&bytes[4..]);
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    let seed = r.u64()?;
    let schedule = decode_schedule(&mut r)?;
    if dim == 0 || count == 0 {
        return Err(Error::Malformed(format!("dataset with dim {dim} and count {count}")));
    }
    let payload = (count as u128) * (dim as u128) * 8;
    let have = r.remaining() as u128;
    if have < payload {
        let start = 4 + r.position() as u128;
        return Err(Error::Truncated {
            expected: (start + payload) as u64,
            found: bytes.len() as u64,
        });
    }
    if have > payload {
        return Err(Error::Malformed(format!("{} trailing bytes after payload", have - payload)));
    }
    let flat = r.f64s(count as usize * dim)?;
    let samples = flat.chunks_exact(dim).map(<[f64]>::to_vec).collect();
    NoisyDataset::new(schedule, seed, samples)
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &NoisyDataset) -> Result<()> {
    fs::write(path, encode_dataset(dataset))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<NoisyDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_dataset(&bytes, path)
}
