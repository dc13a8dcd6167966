//! Checkpoint file: named parameter tensors plus the resolved run config,
//! so a checkpoint alone reconstructs its pipeline.
//!
//! Layout, all integers little-endian:
//!   magic "DSAACKPT" | u32 version | u32 config length | config JSON
//!   | u32 param count | params
//! and each param is
//!   u16 name length | name | u8 rank | u32 dims... | f64 data...

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use dsaa_core::Tensor;

use crate::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"DSAACKPT";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub enum CkptError {
    Io { path: PathBuf, detail: String },
    Format { path: PathBuf, detail: String },
}

impl std::fmt::Display for CkptError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CkptError::Io { path, detail } => {
                write!(f, "checkpoint io error at {}: {detail}", path.display())
            }
            CkptError::Format { path, detail } => {
                write!(f, "malformed checkpoint {}: {detail}", path.display())
            }
        }
    }
}

impl std::error::Error for CkptError {}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn lookup(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).cloned()
    }
}

pub fn save(
    path: &Path,
    config: &RunConfig,
    named: &[(String, Tensor)],
) -> Result<(), CkptError> {
    let io_err = |e: std::io::Error| CkptError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg_json = config.canonical_json();
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg_json.as_bytes());
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io_err)?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CkptError> {
    let io_err = |e: std::io::Error| CkptError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let bad = |detail: &str| CkptError::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(8).ok_or_else(|| bad("truncated file"))? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated file"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let cfg_len = r.u32().ok_or_else(|| bad("truncated file"))? as usize;
    let cfg_raw = r.take(cfg_len).ok_or_else(|| bad("truncated file"))?;
    let cfg_json =
        std::str::from_utf8(cfg_raw).map_err(|_| bad("config block is not utf-8"))?;
    let config: RunConfig =
        serde_json::from_str(cfg_json).map_err(|e| bad(&format!("config block: {e}")))?;
    let count = r.u32().ok_or_else(|| bad("truncated file"))? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16().ok_or_else(|| bad("truncated file"))? as usize;
        let name = r
            .take(name_len)
            .and_then(|raw| std::str::from_utf8(raw).ok())
            .ok_or_else(|| bad("bad parameter name"))?
            .to_string();
        let rank = r.take(1).ok_or_else(|| bad("truncated file"))?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().ok_or_else(|| bad("truncated file"))? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad(&format!("parameter {name} shape overflows")))?;
        let raw = r
            .take(len.saturating_mul(8))
            .ok_or_else(|| bad("truncated file"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(&format!("parameter {name}: {e}")))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(bad(&format!("duplicate parameter {name}")));
        }
    }
    if r.at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint { config, params })
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at.checked_add(n)?)?;
        self.at += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|s| u16::from_le_bytes(s.try_into().unwrap()))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|s| u32::from_le_bytes(s.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named_fixture() -> Vec<(String, Tensor)> {
        vec![
            (
                String::from("dsaa/apa/w1"),
                Tensor::new(vec![2, 3], vec![0.5, -1.0, 0.0, 3.25, f64::MIN_POSITIVE, 9.0])
                    .unwrap(),
            ),
            (String::from("encoder/bias"), Tensor::zeros(vec![4])),
        ]
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.dsaa");
        let mut cfg = RunConfig::default();
        cfg.normalize();
        save(&path, &cfg, &named_fixture()).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.params.len(), 2);
        let w1 = ck.lookup("dsaa/apa/w1").unwrap();
        assert_eq!(w1.shape(), &[2, 3]);
        assert_eq!(
            w1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            named_fixture()[0]
                .1
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn same_inputs_write_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a"), dir.path().join("b"));
        let mut cfg = RunConfig::default();
        cfg.normalize();
        save(&pa, &cfg, &named_fixture()).unwrap();
        save(&pb, &cfg, &named_fixture()).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn corruption_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.dsaa");
        let mut cfg = RunConfig::default();
        cfg.normalize();
        save(&path, &cfg, &named_fixture()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(CkptError::Format { .. })));
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load(&path), Err(CkptError::Format { .. })));
    }
}
