//! Cohort persistence: newline-delimited JSON, one patient per line, with a
//! header line carrying the schema version and generator config.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{PatientSequence, SyntheticConfig};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    config: SyntheticConfig,
}

/// Writes header + one patient per line.
pub fn save_cohort(
    path: impl AsRef<Path>,
    config: &SyntheticConfig,
    cohort: &[PatientSequence],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &Header {
            schema_version: SCHEMA_VERSION,
            config: config.clone(),
        },
    )?;
    w.write_all(b"\n")?;
    for p in cohort {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a cohort back, enforcing the schema version and every record
/// invariant. Errors carry the 1-based line number. An empty file is an
/// empty cohort with no config.
pub fn load_cohort(
    path: impl AsRef<Path>,
) -> Result<(Option<SyntheticConfig>, Vec<PatientSequence>)> {
    let reader = BufReader::new(File::open(&path)?);
    let mut config = None;
    let mut cohort = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        if lineno == 1 {
            let header: Header = serde_json::from_str(&line).map_err(|e| Error::DataFormat {
                line: lineno,
                msg: format!("bad header: {e}"),
            })?;
            if header.schema_version != SCHEMA_VERSION {
                return Err(Error::DataFormat {
                    line: lineno,
                    msg: format!(
                        "schema version {} (expected {SCHEMA_VERSION})",
                        header.schema_version
                    ),
                });
            }
            config = Some(header.config);
            continue;
        }
        let patient: PatientSequence =
            serde_json::from_str(&line).map_err(|e| Error::DataFormat {
                line: lineno,
                msg: e.to_string(),
            })?;
        patient.validate().map_err(|e| Error::DataFormat {
            line: lineno,
            msg: e.to_string(),
        })?;
        cohort.push(patient);
    }
    Ok((config, cohort))
}
