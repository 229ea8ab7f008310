//! Policy checkpoint files.
//!
//! Layout:
//!
//! ```text
//! tempered-checkpoint\n
//! {"version":"toylm-v1","vocab_hash":"..","vocab_size":V,"window":K,"context_dim":D,"body_sha256":".."}\n
//! <D*V weights, then V bias values, each f64 little-endian>
//! ```
//!
//! The body is raw IEEE-754, so a save/load roundtrip is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PolicyParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "toylm-v1";
const MAGIC: &str = "tempered-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: String,
    vocab_hash: String,
    vocab_size: usize,
    window: usize,
    context_dim: usize,
    body_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub vocab_hash: String,
}

pub fn save_checkpoint(params: &PolicyParams, vocab_hash: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut body = Vec::with_capacity(8 * params.num_parameters());
    for x in params.flat() {
        body.extend_from_slice(&x.to_le_bytes());
    }
    let header = Header {
        version: CHECKPOINT_VERSION.to_string(),
        vocab_hash: vocab_hash.to_string(),
        vocab_size: params.vocab_size(),
        window: params.window(),
        context_dim: params.context_dim(),
        body_sha256: hex::encode(Sha256::digest(&body)),
    };
    let mut out = format!("{MAGIC}\n").into_bytes();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    out.extend(body);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |why: &str| Error::persistence(path, format!("corrupt checkpoint: {why}"));

    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    if lines.next() != Some(MAGIC.as_bytes()) {
        return Err(corrupt("missing magic line"));
    }
    let header_line = lines.next().ok_or_else(|| corrupt("missing header"))?;
    let body = lines.next().ok_or_else(|| corrupt("missing body"))?;

    let raw: serde_json::Value =
        serde_json::from_slice(header_line).map_err(|e| corrupt(&format!("header: {e}")))?;
    let version = raw.get("version").and_then(|v| v.as_str()).unwrap_or("<none>");
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version.to_string(),
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| corrupt(&format!("header: {e}")))?;
    if header.context_dim != (header.window + 1) * header.vocab_size {
        return Err(corrupt("context_dim inconsistent with vocab_size and window"));
    }
    let expected = 8 * (header.context_dim * header.vocab_size + header.vocab_size);
    if body.len() != expected {
        return Err(corrupt(&format!(
            "body has {} bytes, header implies {expected}",
            body.len()
        )));
    }
    if hex::encode(Sha256::digest(body)) != header.body_sha256 {
        return Err(corrupt("body checksum mismatch"));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let n_weights = header.context_dim * header.vocab_size;
    let params = PolicyParams::from_parts(
        header.vocab_size,
        header.window,
        values[..n_weights].to_vec(),
        values[n_weights..].to_vec(),
    )?;
    if !params.is_finite() {
        return Err(corrupt("non-finite parameter"));
    }
    Ok(Checkpoint {
        params,
        vocab_hash: header.vocab_hash,
    })
}
