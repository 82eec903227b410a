use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to repeat a `run` or `compare` invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: Vec<String>,
    /// `run` or `compare`.
    pub action: String,
    pub variant: Option<String>,
    /// Resolved configuration in config-file syntax.
    pub config: String,
    pub seed: u64,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let f = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(f);
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl InputFile {
    pub fn hash(role: &str, path: &Path) -> Result<Self, CliError> {
        let abs = std::fs::canonicalize(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(Self {
            role: role.into(),
            sha256: sha256_file(&abs)?,
            path: abs,
        })
    }

    pub fn verify(&self) -> Result<(), CliError> {
        let now = sha256_file(&self.path)?;
        if now != self.sha256 {
            return Err(CliError::Data(format!(
                "{} changed since the manifest was written (sha256 {now}, expected {})",
                self.path.display(),
                self.sha256
            )));
        }
        Ok(())
    }
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}
