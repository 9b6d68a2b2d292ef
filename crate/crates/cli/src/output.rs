//! Atomic artifact writes and the metadata sidecar every command emits.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use flipbench_core::fault::RNG_IDENTITY;

use crate::failure::{Context, Failure};

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Writes a file by letting `write` fill a temporary path in the same
/// directory, then renaming it over `path`.
pub fn atomic_file<T>(
    path: &Path,
    write: impl FnOnce(&Path) -> Result<T, Failure>,
) -> Result<T, Failure> {
    let dir = parent(path);
    fs::create_dir_all(dir).context(format!("creating {}", dir.display()))?;
    let tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempfile_in(dir)
        .context(format!("creating temporary file in {}", dir.display()))?;
    let out = write(tmp.path())?;
    tmp.persist(path)
        .map_err(|e| e.error)
        .context(format!("renaming into {}", path.display()))?;
    Ok(out)
}

pub fn atomic_bytes(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    atomic_file(path, |tmp| {
        let mut f = fs::File::create(tmp).context(format!("writing {}", tmp.display()))?;
        f.write_all(bytes).context(format!("writing {}", tmp.display()))?;
        Ok(())
    })
}

pub fn atomic_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure {
        code: crate::failure::EXIT_INTERNAL,
        error: e.into(),
    })?;
    text.push('\n');
    atomic_bytes(path, text.as_bytes())
}

/// Builds a directory artifact in a sibling temporary directory and swaps it
/// into place. An existing directory at `path` is replaced.
pub fn atomic_dir<T>(
    path: &Path,
    write: impl FnOnce(&Path) -> Result<T, Failure>,
) -> Result<T, Failure> {
    let dir = parent(path);
    fs::create_dir_all(dir).context(format!("creating {}", dir.display()))?;
    let tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempdir_in(dir)
        .context(format!("creating temporary directory in {}", dir.display()))?;
    let out = write(tmp.path())?;
    if path.exists() {
        fs::remove_dir_all(path).context(format!("replacing {}", path.display()))?;
    }
    fs::rename(tmp.keep(), path).context(format!("renaming into {}", path.display()))?;
    Ok(out)
}

fn parent(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).context(format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance shared by every command's JSON sidecar.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config_hash: String,
    pub model_hash: String,
    pub seed: u64,
    pub rng: &'static str,
    pub artifacts: Vec<Artifact>,
}

impl RunMetadata {
    pub fn new(command: &'static str, config_hash: String, model_hash: String, seed: u64) -> Self {
        RunMetadata {
            tool: TOOL,
            version: VERSION,
            command,
            config_hash,
            model_hash,
            seed,
            rng: RNG_IDENTITY,
            artifacts: Vec::new(),
        }
    }

    /// Records a file relative to `root` together with its digest.
    pub fn add(&mut self, root: &Path, path: &Path) -> Result<(), Failure> {
        let sha256 = sha256_file(path)?;
        let rel = path.strip_prefix(root).unwrap_or(path).to_path_buf();
        self.artifacts.push(Artifact { path: rel, sha256 });
        Ok(())
    }
}
