//! JSONL record wrappers. Every record line carries the `tlc/1` schema
//! version field; readers reject anything else.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::CandidateBeam;
use crate::error::{CoreError, Result};
use crate::{Float, SCHEMA_VERSION};

/// Envelope adding the schema version to a record body.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Record<T> {
    pub schema: String,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Record<T> {
    pub fn new(body: T) -> Self {
        Record {
            schema: SCHEMA_VERSION.to_string(),
            body,
        }
    }
}

/// All beams decoded for one scene, in ranking order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Float",
    deserialize = "T: Float"
))]
pub struct BeamSet<T: Float> {
    pub scene_id: u64,
    pub beams: Vec<CandidateBeam<T>>,
}

/// Writes one schema-tagged JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, bodies: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for body in bodies {
        let line = serde_json::to_string(&Record::new(body))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads schema-tagged records, failing on a version mismatch.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record<T> = serde_json::from_str(&line)?;
        if record.schema != SCHEMA_VERSION {
            return Err(CoreError::MalformedRecord(format!(
                "{}:{}: schema {:?}, expected {:?}",
                path.display(),
                lineno + 1,
                record.schema,
                SCHEMA_VERSION
            )));
        }
        records.push(record.body);
    }
    Ok(records)
}
