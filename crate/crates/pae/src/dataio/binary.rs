//! Embedding container I/O.
//!
//! Format (little-endian): magic `PAE1`, `u32` record count, `u32` dimension,
//! then `count * dim` `f32` values. A companion tab-separated index file
//! carries one `utterance_id \t label \t speaker_id \t gender` row per
//! record, with gender `F`, `M`, or `-`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, EmbeddingDataset, EmbeddingRecord, Gender};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"PAE1";

pub fn save_embeddings(
    dataset: &EmbeddingDataset,
    path: &Path,
    index_path: &Path,
) -> Result<(), DataError> {
    let mut bin = BufWriter::new(File::create(path)?);
    bin.write_all(&EMBEDDING_MAGIC)?;
    bin.write_all(&(dataset.len() as u32).to_le_bytes())?;
    bin.write_all(&(dataset.dim() as u32).to_le_bytes())?;
    for r in dataset.records() {
        for v in &r.vector {
            bin.write_all(&v.to_le_bytes())?;
        }
    }
    bin.flush()?;

    let mut idx = BufWriter::new(File::create(index_path)?);
    for r in dataset.records() {
        let gender = match r.gender {
            Some(Gender::F) => "F",
            Some(Gender::M) => "M",
            None => "-",
        };
        writeln!(
            idx,
            "{}\t{}\t{}\t{}",
            r.utterance_id, r.label, r.speaker_id, gender
        )?;
    }
    idx.flush()?;
    Ok(())
}

pub fn load_embeddings(path: &Path, index_path: &Path) -> Result<EmbeddingDataset, DataError> {
    let mut bin = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    bin.read_exact(&mut magic)?;
    if magic != EMBEDDING_MAGIC {
        return Err(DataError::MagicMismatch {
            path: path.to_path_buf(),
        });
    }
    let mut u32_buf = [0u8; 4];
    bin.read_exact(&mut u32_buf)?;
    let count = u32::from_le_bytes(u32_buf) as usize;
    bin.read_exact(&mut u32_buf)?;
    let dim = u32::from_le_bytes(u32_buf) as usize;

    let mut payload = vec![0u8; count * dim * 4];
    bin.read_exact(&mut payload)?;

    let rows = read_index(index_path)?;
    if rows.len() != count {
        return Err(DataError::CountMismatch {
            path: index_path.to_path_buf(),
            index_rows: rows.len(),
            records: count,
        });
    }

    let mut records = Vec::with_capacity(count);
    for (i, (utterance_id, label, speaker_id, gender)) in rows.into_iter().enumerate() {
        let start = i * dim * 4;
        let vector: Vec<f32> = payload[start..start + dim * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(EmbeddingRecord {
            utterance_id,
            label,
            speaker_id,
            gender,
            vector,
        });
    }
    EmbeddingDataset::new(dim, records)
}

type IndexRow = (String, String, String, Option<Gender>);

fn read_index(path: &Path) -> Result<Vec<IndexRow>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(DataError::MalformedRow {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let gender = match fields[3] {
            "F" => Some(Gender::F),
            "M" => Some(Gender::M),
            "-" => None,
            other => {
                return Err(DataError::MalformedRow {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    reason: format!("gender must be F, M, or -, got {other:?}"),
                })
            }
        };
        rows.push((
            fields[0].to_string(),
            fields[1].to_string(),
            fields[2].to_string(),
            gender,
        ));
    }
    Ok(rows)
}
