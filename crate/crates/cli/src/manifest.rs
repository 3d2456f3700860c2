// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifests and the output directory that produces them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FORMAT: &str = "truthx-manifest/1";
pub const MANIFEST_NAME: &str = "manifest.json";

/// Everything needed to rerun a command: its arguments minus `--out`, the
/// effective seed and config, and content hashes of what went in and out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub config: Option<String>,
    /// Input path as given on the command line, to sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output name relative to the output directory, to sha256.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(truthx::Error::Version {
                expected: MANIFEST_FORMAT.into(),
                found: m.format,
            }
            .into());
        }
        Ok(m)
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

/// Hashes of every file a command read.
#[derive(Debug, Default)]
pub struct Inputs(BTreeMap<String, String>);

impl Inputs {
    pub fn add(&mut self, path: &Path) -> CliResult<()> {
        let h = sha256_file(path)?;
        self.0.insert(path.display().to_string(), h);
        Ok(())
    }
}

/// Output directory that records a hash for every file written into it.
#[derive(Debug)]
pub struct OutDir {
    root: PathBuf,
    outputs: BTreeMap<String, String>,
}

impl OutDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.path(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::write(&p, bytes.as_ref()).map_err(|e| CliError::io(&p, e))?;
        self.record(name)?;
        Ok(p)
    }

    /// Hash a file that something else wrote at `name`.
    pub fn record(&mut self, name: &str) -> CliResult<()> {
        let h = sha256_file(&self.path(name))?;
        self.outputs.insert(name.to_string(), h);
        Ok(())
    }

    pub fn finish(
        self,
        command: &str,
        args: &[String],
        seed: Option<u64>,
        config: Option<String>,
        inputs: Inputs,
    ) -> CliResult<RunManifest> {
        let m = RunManifest {
            format: MANIFEST_FORMAT.into(),
            command: command.into(),
            args: args.to_vec(),
            seed,
            config,
            inputs: inputs.0,
            outputs: self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        let p = self.root.join(MANIFEST_NAME);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        Ok(m)
    }
}

/// Drop `--out VALUE` and `--out=VALUE` from an argument list.
pub fn strip_out(args: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
            continue;
        }
        if a == "--out" {
            skip = true;
            continue;
        }
        if a.starts_with("--out=") {
            continue;
        }
        out.push(a.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strip_out_forms() {
        let a: Vec<String> = ["--seed", "3", "--out", "d", "--k=2", "--out=e"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(strip_out(&a), vec!["--seed", "3", "--k=2"]);
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
