//! Output bookkeeping: provenance sidecars, input checksums and cleanup of
//! partial outputs after a failure.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const DATA_DIR_ENV: &str = "DEBIE_DATA_DIR";

/// Files written by the current command, removed again if it fails.
#[derive(Debug, Default)]
pub struct Outputs {
    written: Vec<PathBuf>,
}

impl Outputs {
    /// Registers `path` before it is written.
    pub fn claim(&mut self, path: &Path) -> PathBuf {
        self.written.push(path.to_path_buf());
        path.to_path_buf()
    }

    pub fn remove_all(&mut self) {
        for p in self.written.drain(..).rev() {
            let _ = std::fs::remove_file(&p);
        }
    }
}

/// Resolves an input path, falling back to the data directory for relative
/// paths that do not exist as given.
pub fn input(path: &Path) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    if path.is_relative() {
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            let alt = Path::new(&dir).join(path);
            if alt.is_file() {
                return Ok(alt);
            }
        }
    }
    bail!(debie::Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
    })
}

/// Fails unless the parent directory of `path` exists.
pub fn output(path: &Path) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        bail!(debie::Error::Io {
            path: parent.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "output directory not found"),
        });
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    /// Input path to sha256.
    pub inputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new(command: &'static str, config: serde_json::Value) -> Self {
        Provenance {
            tool: "debie",
            version: env!("CARGO_PKG_VERSION"),
            command,
            inputs: BTreeMap::new(),
            config,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Writes `<output>.provenance.json`.
    pub fn write_for(&self, output: &Path, outputs: &mut Outputs) -> Result<()> {
        let mut name = output.as_os_str().to_owned();
        name.push(".provenance.json");
        let path = outputs.claim(Path::new(&name));
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// `{"error": {"kind": ..., "message": ...}}` for stderr.
pub fn error_json(e: &anyhow::Error) -> String {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<debie::Error>())
        .map_or("error", debie::Error::kind);
    let message = e
        .chain()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(": ");
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}
