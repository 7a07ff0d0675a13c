//! Checkpoint files.
//!
//! ```text
//! forceadapt-checkpoint
//! version = 1
//! config_hash = <hex>
//! update = <n>
//! env_steps = <n>
//! alpha = <f64>
//! config_lines = <k>
//! <k lines of rendered config>
//! tensors = <m>
//! <name> <dim> <dim> ...      (m lines)
//! end
//! <f32 little-endian tensor data, in manifest order>
//! <u64 little-endian checksum>
//! ```
//!
//! The checksum is the first eight bytes (little-endian) of the SHA-256 of
//! everything before it.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::TrainerConfig;
use super::policy::NamedTensor;
use crate::error::CheckpointError;

pub const MAGIC: &str = "forceadapt-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainerConfig,
    pub update: usize,
    pub env_steps: u64,
    pub alpha: f64,
    pub tensors: Vec<NamedTensor>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = self.config.render();
        let config_lines: Vec<&str> = config.lines().collect();
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        head.push_str(&format!("version = {FORMAT_VERSION}\n"));
        head.push_str(&format!("config_hash = {}\n", self.config.hash()));
        head.push_str(&format!("update = {}\n", self.update));
        head.push_str(&format!("env_steps = {}\n", self.env_steps));
        head.push_str(&format!("alpha = {:?}\n", self.alpha));
        head.push_str(&format!("config_lines = {}\n", config_lines.len()));
        for l in &config_lines {
            head.push_str(l);
            head.push('\n');
        }
        head.push_str(&format!("tensors = {}\n", self.tensors.len()));
        for t in &self.tensors {
            head.push_str(&t.name);
            for d in &t.shape {
                head.push_str(&format!(" {d}"));
            }
            head.push('\n');
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if !bytes.starts_with(MAGIC.as_bytes()) {
            return Err(CheckpointError::BadMagic);
        }
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str, CheckpointError> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| malformed("truncated header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| malformed("header is not UTF-8"))
        };
        next_line()?;
        let field = |line: &str, key: &str| -> Result<String, CheckpointError> {
            line.strip_prefix(key)
                .and_then(|r| r.trim_start().strip_prefix('='))
                .map(|v| v.trim().to_string())
                .ok_or_else(|| malformed(format!("expected `{key} = ...`, found `{line}`")))
        };
        let num = |s: String, key: &str| -> Result<u64, CheckpointError> {
            s.parse().map_err(|_| malformed(format!("bad `{key}`")))
        };
        let version = num(field(next_line()?, "version")?, "version")?;
        if version != FORMAT_VERSION as u64 {
            return Err(CheckpointError::Version {
                found: version as u32,
                expected: FORMAT_VERSION,
            });
        }
        let hash = field(next_line()?, "config_hash")?;
        let update = num(field(next_line()?, "update")?, "update")? as usize;
        let env_steps = num(field(next_line()?, "env_steps")?, "env_steps")?;
        let alpha: f64 = field(next_line()?, "alpha")?
            .parse()
            .map_err(|_| malformed("bad `alpha`"))?;
        let n_cfg = num(field(next_line()?, "config_lines")?, "config_lines")? as usize;
        let mut config_text = String::new();
        for _ in 0..n_cfg {
            config_text.push_str(next_line()?);
            config_text.push('\n');
        }
        let n_t = num(field(next_line()?, "tensors")?, "tensors")? as usize;
        let mut manifest = Vec::with_capacity(n_t);
        for _ in 0..n_t {
            let line = next_line()?;
            let mut parts = line.split_whitespace();
            let name = parts.next().ok_or_else(|| malformed("empty tensor line"))?.to_string();
            let shape = parts
                .map(|p| p.parse::<usize>().map_err(|_| malformed(format!("bad shape for `{name}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            manifest.push((name, shape));
        }
        if next_line()? != "end" {
            return Err(malformed("missing `end` after manifest"));
        }
        let data_start = pos;
        let floats: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let expected_len = data_start + 4 * floats + 8;
        if bytes.len() != expected_len {
            return Err(malformed(format!(
                "expected {expected_len} bytes, file has {}",
                bytes.len()
            )));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("eight bytes"));
        let computed = checksum(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let config = TrainerConfig::parse(&config_text).map_err(|e| malformed(format!("embedded config: {e}")))?;
        if config.hash() != hash {
            return Err(malformed("config hash does not match embedded config"));
        }
        let mut offset = data_start;
        let tensors = manifest
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = bytes[offset..offset + 4 * n]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                    .collect();
                offset += 4 * n;
                NamedTensor { name, shape, data }
            })
            .collect();
        Ok(Self {
            config,
            update,
            env_steps,
            alpha,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
