//! Protocol-split document: two header lines, then one
//! `utterance_id \t partition \t speaker_tag` row per utterance, sorted by id.

use std::path::Path;

use super::{DataError, Partition, ProtocolSplit, SpeakerTag};

const SCHEMA_VERSION: u32 = 1;

pub fn to_canonical_text(split: &ProtocolSplit) -> String {
    let mut out = String::new();
    out.push_str(&format!("schema_version: {SCHEMA_VERSION}\n"));
    out.push_str(&format!("name: {}\n", split.name()));
    for (id, a) in split.iter() {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            id,
            a.partition.as_str(),
            a.speaker_tag.as_str()
        ));
    }
    out
}

pub fn load_protocol(path: &Path) -> Result<ProtocolSplit, DataError> {
    let text = std::fs::read_to_string(path)?;
    let malformed = |line: usize, reason: String| DataError::MalformedRow {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();

    let (_, version_line) = lines
        .next()
        .ok_or_else(|| malformed(1, "empty file".into()))?;
    let version: u32 = version_line
        .strip_prefix("schema_version: ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| malformed(1, "expected `schema_version: <n>`".into()))?;
    if version != SCHEMA_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let (_, name_line) = lines
        .next()
        .ok_or_else(|| malformed(2, "missing name line".into()))?;
    let name = name_line
        .strip_prefix("name: ")
        .ok_or_else(|| malformed(2, "expected `name: <name>`".into()))?;

    let mut split = ProtocolSplit::new(name);
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(malformed(
                lineno + 1,
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        let partition = Partition::parse(fields[1])
            .ok_or_else(|| malformed(lineno + 1, format!("bad partition {:?}", fields[1])))?;
        let tag = SpeakerTag::parse(fields[2])
            .ok_or_else(|| malformed(lineno + 1, format!("bad speaker tag {:?}", fields[2])))?;
        split.assign(fields[0].to_string(), partition, tag)?;
    }
    Ok(split)
}
