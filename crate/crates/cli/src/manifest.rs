//! Run manifests: the exact arguments, seed and content hashes of every input
//! and output of one command, written beside its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use attnlens_core::util::{json_hash, sha256_hex};
use serde::Serialize;

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    /// Arguments after the binary name, verbatim.
    args: &'a [String],
    seed: Option<u64>,
    /// Hash of the effective configuration, for commands that have one.
    config_hash: Option<String>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

pub struct Run {
    command: &'static str,
    args: Vec<String>,
    seed: Option<u64>,
    config_hash: Option<String>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn new(command: &'static str) -> Self {
        Run {
            command,
            args: std::env::args().skip(1).collect(),
            seed: None,
            config_hash: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    pub fn config<T: Serialize + ?Sized>(&mut self, config: &T) -> &mut Self {
        self.config_hash = Some(json_hash(config));
        self
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.inputs.push(path.into());
        self
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.outputs.push(path.into());
        self
    }

    /// Writes the manifest to `path`. Directories are hashed file by file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let hashes = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            let mut out = BTreeMap::new();
            for p in paths {
                hash_into(p, &mut out)?;
            }
            Ok(out)
        };
        let manifest = Manifest {
            tool: "attnlens",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            args: &self.args,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            inputs: hashes(&self.inputs)?,
            outputs: hashes(&self.outputs)?,
        };
        let body = serde_json::to_vec_pretty(&manifest)?;
        std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
    }
}

fn hash_into(path: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            hash_into(&e, out)?;
        }
    } else if path.is_file() {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        out.insert(path.display().to_string(), sha256_hex(&bytes));
    }
    Ok(())
}

/// `<name>.manifest.json` next to `output`, whether it is a file or a directory.
pub fn beside(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}
