use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LlmError;
use crate::graph::NodeId;

/// One accepted generation or reflection, enough to rebuild the augmented
/// graph without querying again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub client: usize,
    /// Training round that produced the record; 0 is the initial generation.
    pub round: u32,
    pub center_id: NodeId,
    pub neighbor_used: Option<NodeId>,
    pub generated_title: String,
    pub generated_abstract: String,
    pub topic_analysis: String,
    pub reflection: Option<String>,
    pub attempt: u32,
    pub generated_node_id: NodeId,
    /// Generated node this record superseded, for reflections.
    pub replaces: Option<NodeId>,
}

impl GenerationRecord {
    pub fn check(&self) -> Result<(), LlmError> {
        if self.attempt < 1 {
            return Err(LlmError::InvalidRecord(format!("{}: attempt must be >= 1", self.generated_node_id)));
        }
        if self.generated_title.trim().is_empty() || self.generated_abstract.trim().is_empty() {
            return Err(LlmError::InvalidRecord(format!("{}: empty title or abstract", self.generated_node_id)));
        }
        Ok(())
    }
}

pub fn write_records(path: &Path, records: &[GenerationRecord]) -> Result<(), LlmError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn append_records(path: &Path, records: &[GenerationRecord]) -> Result<(), LlmError> {
    let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<GenerationRecord>, LlmError> {
    if !path.exists() {
        return Err(LlmError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )));
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: GenerationRecord = serde_json::from_str(&line)
            .map_err(|e| LlmError::InvalidRecord(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seq: u32) -> GenerationRecord {
        GenerationRecord {
            client: 1,
            round: seq,
            center_id: NodeId::from("n3"),
            neighbor_used: Some(NodeId::from("n4")),
            generated_title: "title".into(),
            generated_abstract: "abstract text".into(),
            topic_analysis: "analysis".into(),
            reflection: (seq > 0).then(|| "reflected".to_string()),
            attempt: seq + 1,
            generated_node_id: NodeId::new(format!("g1:n3:{seq}")),
            replaces: (seq > 0).then(|| NodeId::new(format!("g1:n3:{}", seq - 1))),
        }
    }

    #[test]
    fn jsonl_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("generation_records.jsonl");
        write_records(&path, &[rec(0)]).unwrap();
        append_records(&path, &[rec(1), rec(2)]).unwrap();
        assert_eq!(read_records(&path).unwrap(), vec![rec(0), rec(1), rec(2)]);
    }

    #[test]
    fn invariants() {
        assert!(rec(0).check().is_ok());
        let mut bad = rec(0);
        bad.generated_abstract = "  ".into();
        assert!(bad.check().is_err());
        bad = rec(0);
        bad.attempt = 0;
        assert!(bad.check().is_err());
    }
}
