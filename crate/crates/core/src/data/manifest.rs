//! JSON-lines dataset manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One image: path relative to the dataset root, binary labels, domain and
/// the seed it was generated from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub path: String,
    pub labels: Vec<u8>,
    pub domain: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Label width, taken from the first record.
    pub fn num_classes(&self) -> Option<usize> {
        self.records.first().map(|r| r.labels.len())
    }

    /// Checks every record has `n` binary labels; errors name the 1-based
    /// record position.
    pub fn validate(&self, n: usize) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            check_record(r, n, i + 1)?;
        }
        Ok(())
    }

    pub fn domains(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.records.iter().map(|r| r.domain).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    pub fn filter_domains(&self, keep: &[usize]) -> Self {
        Self {
            records: self
                .records
                .iter()
                .filter(|r| keep.contains(&r.domain))
                .cloned()
                .collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// `[B×N]` label matrix.
    pub fn label_matrix(&self) -> Vec<Vec<u8>> {
        self.records.iter().map(|r| r.labels.clone()).collect()
    }
}

fn check_record(r: &SampleRecord, n: usize, line: usize) -> Result<()> {
    if r.labels.len() != n {
        return Err(Error::Manifest {
            line,
            msg: format!("expected {n} labels, found {}", r.labels.len()),
        });
    }
    if r.labels.iter().any(|&l| l > 1) {
        return Err(Error::Manifest {
            line,
            msg: "labels must be 0 or 1".into(),
        });
    }
    Ok(())
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    for r in &manifest.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

/// Parses a manifest without touching the image files.
pub fn parse_manifest(reader: impl BufRead) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    let mut width = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(format!("reading manifest line {line_no}"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: line_no,
            msg: e.to_string(),
        })?;
        let n = *width.get_or_insert(r.labels.len());
        check_record(&r, n, line_no)?;
        records.push(r);
    }
    Ok(DatasetManifest { records })
}

/// Loads a manifest and checks that every image exists relative to the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let manifest = parse_manifest(BufReader::new(file))?;
    let root = dataset_root(path);
    for r in &manifest.records {
        let p = root.join(&r.path);
        if !p.is_file() {
            return Err(Error::MissingImage(p));
        }
    }
    Ok(manifest)
}

/// Directory that manifest paths are relative to.
pub fn dataset_root(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}
