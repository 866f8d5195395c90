//! Run manifests and atomic output writing.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-run a command and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    /// Working directory the arguments are relative to.
    pub cwd: PathBuf,
    pub config: RunConfig,
    pub seed: u64,
    pub check_mode: bool,
    pub inputs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub outputs: Vec<OutputFile>,
    pub tool_version: String,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes).map_err(|e| Failure::data(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| Failure::data(format!("cannot move {} into place: {e}", path.display())))
}

/// Runs `write` against a temporary sibling of `path`, then renames it.
pub fn with_atomic<F>(path: &Path, write: F) -> Result<(), Failure>
where
    F: FnOnce(&Path) -> Result<(), Failure>,
{
    let tmp = tmp_path(path);
    write(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Failure::data(format!("cannot move {} into place: {e}", path.display())))
}

/// Tracks the files a command writes into its output directory.
#[derive(Debug)]
pub struct Outputs {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::data(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    /// Path for a new output file named `name`.
    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, Failure> {
        let p = self.path(name);
        write_atomic(&p, bytes)?;
        Ok(p)
    }

    pub fn hashes(&self) -> Result<Vec<OutputFile>, Failure> {
        self.files
            .iter()
            .map(|f| {
                let sha256 = sha256_file(&self.dir.join(f)).map_err(|e| Failure::data(format!("cannot hash {f}: {e}")))?;
                Ok(OutputFile { path: f.clone(), sha256 })
            })
            .collect()
    }
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<(), Failure> {
        let json = serde_json::to_vec_pretty(self).expect("serializable manifest");
        write_atomic(&dir.join(MANIFEST_FILE), &json)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::data(format!("malformed manifest {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Outputs::create(dir.path()).unwrap();
        out.write("a.txt", b"hello").unwrap();
        out.write("a.txt", b"hello").unwrap();
        assert_eq!(out.files, ["a.txt"]);
        assert!(!dir.path().join("a.txt.tmp").exists());
        let h = out.hashes().unwrap();
        assert_eq!(h[0].sha256, "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824");
    }
}
