//! Fixed-layout little-endian binary formats.
//!
//! Feature file (`.avzf`): magic `AVZF`, u32 version=1, u32 record_count,
//! u32 audio_dim, u32 visual_dim, then per record `u64 sample_id, u32
//! class_id, audio_dim x f32, visual_dim x f32`.
//!
//! Embedding file (`.avzw`): magic `AVZW`, u32 version=1, u32 class_count,
//! u32 embed_dim, then per class `u32 class_id, embed_dim x f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ClassEmbeddingTable, DataError, FeatureRecord};

const FEATURE_MAGIC: [u8; 4] = *b"AVZF";
const EMBED_MAGIC: [u8; 4] = *b"AVZW";
const VERSION: u32 = 1;

struct Cursor<'a, R: Read> {
    inner: R,
    path: &'a Path,
}

impl<'a, R: Read> Cursor<'a, R> {
    fn u32(&mut self) -> Result<u32, DataError> {
        let mut buf = [0u8; 4];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| DataError::io(self.path, e))?;
        Ok(u32::from_le_bytes(buf))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        let mut buf = [0u8; 8];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| DataError::io(self.path, e))?;
        Ok(u64::from_le_bytes(buf))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, DataError> {
        let mut buf = vec![0u8; 4 * n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| DataError::io(self.path, e))?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), DataError> {
        let mut found = [0u8; 4];
        self.inner
            .read_exact(&mut found)
            .map_err(|e| DataError::io(self.path, e))?;
        if found != expected {
            return Err(DataError::BadMagic {
                path: self.path.to_path_buf(),
                expected,
                found,
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), DataError> {
        let found = self.u32()?;
        if found != VERSION {
            return Err(DataError::VersionMismatch {
                path: self.path.to_path_buf(),
                expected: VERSION,
                found,
            });
        }
        Ok(())
    }
}

fn payload_check(path: &Path, header_bytes: u64, expected_payload: u64) -> Result<(), DataError> {
    let actual = std::fs::metadata(path)
        .map_err(|e| DataError::io(path, e))?
        .len();
    let found = actual.saturating_sub(header_bytes);
    if actual < header_bytes || found != expected_payload {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected_bytes: expected_payload,
            found_bytes: found,
        });
    }
    Ok(())
}

/// Writes a feature subset. Every record must match the declared dims.
pub fn write_features(
    records: &[FeatureRecord],
    audio_dim: usize,
    visual_dim: usize,
    path: &Path,
) -> Result<(), DataError> {
    for r in records {
        if r.audio.len() != audio_dim {
            return Err(DataError::DimMismatch {
                context: format!("audio of sample {}", r.sample_id),
                expected: audio_dim,
                found: r.audio.len(),
            });
        }
        if r.visual.len() != visual_dim {
            return Err(DataError::DimMismatch {
                context: format!("visual of sample {}", r.sample_id),
                expected: visual_dim,
                found: r.visual.len(),
            });
        }
    }
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| DataError::io(path, e));
    write(&FEATURE_MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(records.len() as u32).to_le_bytes())?;
    write(&(audio_dim as u32).to_le_bytes())?;
    write(&(visual_dim as u32).to_le_bytes())?;
    for r in records {
        write(&r.sample_id.to_le_bytes())?;
        write(&r.class_id.to_le_bytes())?;
        for v in r.audio.iter().chain(&r.visual) {
            write(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

/// Reads a feature subset; returns the records plus the declared dims.
pub fn read_features(path: &Path) -> Result<(Vec<FeatureRecord>, usize, usize), DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut c = Cursor {
        inner: BufReader::new(file),
        path,
    };
    c.magic(FEATURE_MAGIC)?;
    c.version()?;
    let count = c.u32()? as usize;
    let audio_dim = c.u32()? as usize;
    let visual_dim = c.u32()? as usize;
    let record_bytes = 8 + 4 + 4 * (audio_dim + visual_dim) as u64;
    payload_check(path, 20, count as u64 * record_bytes)?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let sample_id = c.u64()?;
        let class_id = c.u32()?;
        let audio = c.f32s(audio_dim)?;
        let visual = c.f32s(visual_dim)?;
        records.push(FeatureRecord {
            sample_id,
            class_id,
            audio,
            visual,
        });
    }
    Ok((records, audio_dim, visual_dim))
}

/// Writes the class-embedding table in ascending class-id order.
pub fn write_embeddings(table: &ClassEmbeddingTable, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| DataError::io(path, e));
    write(&EMBED_MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(table.len() as u32).to_le_bytes())?;
    write(&(table.dim() as u32).to_le_bytes())?;
    for (class_id, row) in table.iter() {
        write(&class_id.to_le_bytes())?;
        for v in row {
            write(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<ClassEmbeddingTable, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut c = Cursor {
        inner: BufReader::new(file),
        path,
    };
    c.magic(EMBED_MAGIC)?;
    c.version()?;
    let count = c.u32()? as usize;
    let dim = c.u32()? as usize;
    payload_check(path, 16, count as u64 * (4 + 4 * dim as u64))?;
    let mut table = ClassEmbeddingTable::new(dim);
    for _ in 0..count {
        let class_id = c.u32()?;
        let row = c.f32s(dim)?;
        table.insert(class_id, row)?;
    }
    Ok(table)
}
