//! Benchmark files: line-delimited JSON records behind a versioned header
//! line carrying the digests that tie the file to its generating config.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use dsaa_core::world::SceneRecord;
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "dsaa-benchmark";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub enum DatasetError {
    Io { path: PathBuf, detail: String },
    Format { path: PathBuf, detail: String },
}

impl std::fmt::Display for DatasetError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetError::Io { path, detail } => {
                write!(f, "dataset io error at {}: {detail}", path.display())
            }
            DatasetError::Format { path, detail } => {
                write!(f, "malformed dataset {}: {detail}", path.display())
            }
        }
    }
}

impl std::error::Error for DatasetError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub split: String,
    pub seed: u64,
    pub config_digest: String,
    pub data_digest: String,
    pub records: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub records: Vec<SceneRecord>,
}

pub fn save(
    path: &Path,
    header: &DatasetHeader,
    records: &[SceneRecord],
) -> Result<(), DatasetError> {
    let io_err = |e: std::io::Error| DatasetError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io_err)?;
        }
    }
    let mut out = String::new();
    out.push_str(&serde_json::to_string(header).expect("header serializes"));
    out.push('\n');
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(out.as_bytes()).map_err(io_err)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DatasetFile, DatasetError> {
    let io_err = |e: std::io::Error| DatasetError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let bad = |detail: String| DatasetError::Format {
        path: path.to_path_buf(),
        detail,
    };
    let f = std::fs::File::open(path).map_err(io_err)?;
    let mut lines = BufReader::new(f).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .map_err(io_err)?;
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(format!("unknown format {:?}", header.format)));
    }
    if header.version != VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let mut records = Vec::with_capacity(header.records);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err)?;
        if line.is_empty() {
            continue;
        }
        let rec: SceneRecord =
            serde_json::from_str(&line).map_err(|e| bad(format!("record {}: {e}", i + 1)))?;
        records.push(rec);
    }
    if records.len() != header.records {
        return Err(bad(format!(
            "header promises {} records, file holds {}",
            header.records,
            records.len()
        )));
    }
    Ok(DatasetFile { header, records })
}
