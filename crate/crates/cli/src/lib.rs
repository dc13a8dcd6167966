//! Command front end over the core crate: config loading, dataset and
//! checkpoint files, report emission, and the remote attribute extractor.

pub mod ckpt;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod remote;
pub mod report;

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}
