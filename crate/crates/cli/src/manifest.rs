//! Dataset manifest: one CSV row `(path, grade, domain_tag)` per image,
//! paths relative to the manifest's directory.

use std::path::{Path, PathBuf};

use gues_core::data::{Domain, NUM_GRADES};
use gues_core::pipeline::LabeledImage;
use gues_core::pnm::read_image;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub grade: usize,
    pub domain_tag: String,
}

impl ManifestRow {
    pub fn domain(&self) -> Option<Domain> {
        Domain::parse(&self.domain_tag)
    }
}

fn invalid(line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Other(format!("manifest line {line}: {msg}"))
}

/// Parses and validates manifest text. The header must be exactly
/// `path,grade,domain_tag`.
pub fn parse_manifest(bytes: &[u8]) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = reader.headers().map_err(|e| invalid(1, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["path", "grade", "domain_tag"] {
        return Err(invalid(1, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.deserialize::<ManifestRow>().enumerate() {
        let line = i + 2;
        let row = record.map_err(|e| invalid(line, e))?;
        if row.path.is_empty() {
            return Err(invalid(line, "empty path"));
        }
        if row.grade >= NUM_GRADES {
            return Err(invalid(line, format!("grade {} outside 0..{NUM_GRADES}", row.grade)));
        }
        if row.domain().is_none() {
            return Err(invalid(line, format!("unknown domain tag '{}'", row.domain_tag)));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn render_manifest(rows: &[ManifestRow]) -> Result<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    writer.into_inner().map_err(|e| CliError::Other(e.to_string()))
}

pub struct Manifest {
    pub dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path)
            .map_err(|e| CliError::Missing(format!("{}: {e} (run gen-data first)", path.display())))?;
        Ok(Manifest {
            dir: dir.to_path_buf(),
            rows: parse_manifest(&bytes)?,
        })
    }

    /// Reads every image of `domain`, in manifest order.
    pub fn images(&self, domain: Domain) -> Result<Vec<LabeledImage>> {
        self.rows
            .iter()
            .filter(|r| r.domain() == Some(domain))
            .map(|r| {
                let path = self.dir.join(&r.path);
                let image = read_image(&path).map_err(|e| match e {
                    gues_core::Error::Io { .. } => CliError::Missing(e.to_string()),
                    other => other.into(),
                })?;
                Ok(LabeledImage { image, grade: r.grade })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let rows = vec![
            ManifestRow {
                path: "source/000000.ppm".into(),
                grade: 3,
                domain_tag: "source".into(),
            },
            ManifestRow {
                path: "target/000000.ppm".into(),
                grade: 0,
                domain_tag: "target".into(),
            },
        ];
        let bytes = render_manifest(&rows).unwrap();
        assert!(bytes.starts_with(b"path,grade,domain_tag\n"));
        assert_eq!(parse_manifest(&bytes).unwrap(), rows);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(parse_manifest(b"path,grade\na,1\n").is_err());
        assert!(parse_manifest(b"path,grade,domain_tag\na,7,source\n").is_err());
        assert!(parse_manifest(b"path,grade,domain_tag\na,1,elsewhere\n").is_err());
        assert!(parse_manifest(b"path,grade,domain_tag\n,1,source\n").is_err());
        assert!(parse_manifest(b"path,grade,domain_tag\na,-1,source\n").is_err());
        assert!(parse_manifest(b"").is_err());
    }
}
