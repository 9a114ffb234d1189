//! Per-run manifest: enough to reproduce an invocation and detect changed inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use sketchless::config::RunConfig;

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("SKETCHLESS_GIT_DESCRIBE"));

/// SHA-256 of a file, or of every file under a directory (sorted relative
/// paths and contents).
pub fn hash_path(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        for rel in files {
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
            hasher.update(std::fs::read(path.join(&rel)).with_context(|| format!("reading {}", rel.display()))?);
        }
    } else {
        hasher.update(std::fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if !path.file_name().is_some_and(|n| n.to_string_lossy().ends_with(".manifest.json")) {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

#[derive(Serialize)]
pub struct Manifest {
    command: String,
    argv: Vec<String>,
    version: &'static str,
    config_hash: Option<String>,
    config: Option<RunConfig>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    #[serde(skip)]
    clock: Instant,
}

impl Manifest {
    pub fn start(command: &str, config: Option<&RunConfig>) -> Self {
        Self {
            command: command.into(),
            argv: std::env::args().collect(),
            version: VERSION,
            config_hash: config.map(RunConfig::content_hash),
            config: config.cloned(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            clock: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    /// Write as JSON to `path`. No timestamps, so reruns produce the same bytes.
    pub fn finish(self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(&self)?).with_context(|| format!("writing {}", path.display()))?;
        log::info!("{} finished in {:.1}s, manifest {}", self.command, self.clock.elapsed().as_secs_f64(), path.display());
        Ok(())
    }
}

/// `<path>.manifest.json` next to a file output, or `run.manifest.json`
/// inside a directory output.
pub fn manifest_path(output: &Path, command: &str) -> PathBuf {
    if output.is_dir() {
        output.join(format!("{command}.manifest.json"))
    } else {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        output.with_file_name(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_hash_ignores_manifests_and_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("a")).unwrap();
        std::fs::write(dir.path().join("a/x.txt"), "1").unwrap();
        let h1 = hash_path(dir.path()).unwrap();
        std::fs::write(dir.path().join("make-toy.manifest.json"), "{}").unwrap();
        assert_eq!(hash_path(dir.path()).unwrap(), h1);
        std::fs::write(dir.path().join("a/x.txt"), "2").unwrap();
        assert_ne!(hash_path(dir.path()).unwrap(), h1);
    }

    #[test]
    fn manifest_locations() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(manifest_path(dir.path(), "eval"), dir.path().join("eval.manifest.json"));
        let f = dir.path().join("s1.ckpt");
        assert_eq!(manifest_path(&f, "train-stage1"), dir.path().join("s1.ckpt.manifest.json"));
    }
}
