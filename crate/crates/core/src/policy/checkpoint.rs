//! Plain-text policy checkpoints.
//!
//! ```text
//! # misinfo-lab policy checkpoint
//! format = 1
//! seed = 42
//! obs_dim = 10
//! templates = 2
//! bins = 16
//! init_scale = 0.01
//! config_hash = 3f0c1d2e4b5a6978
//! head template 2 10
//! w <10 values>        one line per output row
//! w <10 values>
//! b <2 values>
//! head category 6 10
//! ...
//! ```
//!
//! Values are written in the shortest form that parses back to the same
//! float, so save/load is lossless.

use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Head, HeadKind, Params, Policy, PolicyDims};
use crate::scalar::Scalar;

const MAGIC: &str = "# misinfo-lab policy checkpoint";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config hash mismatch: file says {stored}, header hashes to {computed}")]
    HashMismatch { stored: String, computed: String },
}

fn config_hash(dims: &PolicyDims, seed: u64, init_scale: f64) -> String {
    let key = format!(
        "obs_dim={};templates={};bins={};seed={};init_scale={}",
        dims.obs_dim, dims.templates, dims.bins, seed, init_scale
    );
    let digest = Sha256::digest(key.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn join<T: Scalar>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_checkpoint<T: Scalar>(policy: &Policy<T>) -> String {
    let dims = policy.dims();
    let mut out = format!(
        "{MAGIC}\nformat = {FORMAT_VERSION}\nseed = {}\nobs_dim = {}\ntemplates = {}\nbins = {}\ninit_scale = {}\nconfig_hash = {}\n",
        policy.seed(),
        dims.obs_dim,
        dims.templates,
        dims.bins,
        policy.init_scale(),
        config_hash(dims, policy.seed(), policy.init_scale()),
    );
    for (kind, head) in HeadKind::ALL.iter().zip(&policy.params().heads) {
        out.push_str(&format!("head {} {} {}\n", kind.name(), head.outputs, head.inputs));
        for row in head.weights.chunks_exact(head.inputs) {
            out.push_str(&format!("w {}\n", join(row)));
        }
        out.push_str(&format!("b {}\n", join(&head.bias)));
    }
    out
}

pub fn save_checkpoint<T: Scalar>(policy: &Policy<T>, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, write_checkpoint(policy))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Policy<T>, CheckpointError> {
    read_checkpoint(&fs::read_to_string(path)?)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, msg: impl Into<String>) -> CheckpointError {
        CheckpointError::Parse { line: self.line, msg: msg.into() }
    }

    fn next(&mut self) -> Result<&'a str, CheckpointError> {
        let (i, l) = self.inner.next().ok_or_else(|| self.err("unexpected end of file"))?;
        self.line = i + 1;
        Ok(l)
    }

    fn key<V: std::str::FromStr>(&mut self, key: &str) -> Result<V, CheckpointError> {
        let l = self.next()?;
        let value = l
            .split_once('=')
            .filter(|(k, _)| k.trim() == key)
            .map(|(_, v)| v.trim())
            .ok_or_else(|| self.err(format!("expected `{key} = ...`")))?;
        value.parse().map_err(|_| self.err(format!("bad value for {key}: {value:?}")))
    }

    fn values<T: Scalar>(&mut self, tag: &str, count: usize) -> Result<Vec<T>, CheckpointError> {
        let l = self.next()?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(tag) {
            return Err(self.err(format!("expected `{tag}` row")));
        }
        let values = parts
            .map(|p| p.parse::<T>().map_err(|_| self.err(format!("bad number {p:?}"))))
            .collect::<Result<Vec<T>, _>>()?;
        if values.len() != count || values.iter().any(|v| !v.is_finite()) {
            return Err(self.err(format!("expected {count} finite values, got {}", values.len())));
        }
        Ok(values)
    }
}

pub fn read_checkpoint<T: Scalar>(text: &str) -> Result<Policy<T>, CheckpointError> {
    let mut lines = Lines { inner: text.lines().enumerate(), line: 0 };
    if lines.next()? != MAGIC {
        return Err(lines.err("missing checkpoint header"));
    }
    let version: u32 = lines.key("format")?;
    if version != FORMAT_VERSION {
        return Err(lines.err(format!("unsupported format version {version}")));
    }
    let seed: u64 = lines.key("seed")?;
    let obs_dim: usize = lines.key("obs_dim")?;
    let templates: usize = lines.key("templates")?;
    let bins: usize = lines.key("bins")?;
    let init_scale: f64 = lines.key("init_scale")?;
    let stored: String = lines.key("config_hash")?;
    let dims = PolicyDims::new(obs_dim, templates, bins).map_err(|e| lines.err(e.to_string()))?;
    let computed = config_hash(&dims, seed, init_scale);
    if stored != computed {
        return Err(CheckpointError::HashMismatch { stored, computed });
    }

    let mut heads = Vec::with_capacity(HeadKind::ALL.len());
    for kind in HeadKind::ALL {
        let expected = format!("head {} {} {}", kind.name(), dims.head_size(kind), obs_dim);
        if lines.next()?.trim() != expected {
            return Err(lines.err(format!("expected `{expected}`")));
        }
        let outputs = dims.head_size(kind);
        let mut weights = Vec::with_capacity(outputs * obs_dim);
        for _ in 0..outputs {
            weights.extend(lines.values::<T>("w", obs_dim)?);
        }
        let bias = lines.values::<T>("b", outputs)?;
        heads.push(Head { outputs, inputs: obs_dim, weights, bias });
    }
    if let Some((i, l)) = lines.inner.find(|(_, l)| !l.trim().is_empty()) {
        return Err(CheckpointError::Parse { line: i + 1, msg: format!("trailing content {l:?}") });
    }
    Ok(Policy::from_parts(dims, seed, init_scale, Params { heads }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::init_policy;

    #[test]
    fn round_trip_is_lossless() {
        let p: Policy<f64> = init_policy(42, 5, 3, 4, 0.7).unwrap();
        let text = write_checkpoint(&p);
        let q: Policy<f64> = read_checkpoint(&text).unwrap();
        assert_eq!(p, q);
        assert_eq!(text, write_checkpoint(&q));

        let p32: Policy<f32> = init_policy(42, 5, 3, 4, 0.7).unwrap();
        assert_eq!(p32, read_checkpoint::<f32>(&write_checkpoint(&p32)).unwrap());
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let p: Policy<f64> = init_policy(1, 2, 2, 2, 0.1).unwrap();
        let text = write_checkpoint(&p);
        assert!(matches!(
            read_checkpoint::<f64>(&text.replace("seed = 1", "seed = 2")),
            Err(CheckpointError::HashMismatch { .. })
        ));
        let truncated: String = text.lines().take(12).collect::<Vec<_>>().join("\n");
        assert!(matches!(read_checkpoint::<f64>(&truncated), Err(CheckpointError::Parse { .. })));
        assert!(read_checkpoint::<f64>(&format!("{text}extra\n")).is_err());
        assert!(read_checkpoint::<f64>("hello").is_err());
    }
}
