//! The run manifest, written once when a command finishes or fails.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub started: u64,
    pub finished: Option<u64>,
    /// Emitted files, relative to the output directory.
    pub files: Vec<PathBuf>,
    pub incomplete: bool,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Hex SHA-256 of the canonical configuration text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").expect("string write");
        s
    })
}

impl RunManifest {
    pub fn start(command: &str, canonical_config: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config_hash(canonical_config),
            seed,
            version: format!("limix {}", env!("CARGO_PKG_VERSION")),
            started: now(),
            finished: None,
            files: Vec::new(),
            incomplete: true,
        }
    }

    pub fn record(&mut self, file: impl Into<PathBuf>) {
        let f = file.into();
        if !self.files.contains(&f) {
            self.files.push(f);
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "command = {}", self.command).expect("string write");
        writeln!(s, "config_hash = {}", self.config_hash).expect("string write");
        writeln!(s, "seed = {}", self.seed).expect("string write");
        writeln!(s, "version = {}", self.version).expect("string write");
        writeln!(s, "started = {}", self.started).expect("string write");
        if let Some(f) = self.finished {
            writeln!(s, "finished = {f}").expect("string write");
        }
        writeln!(s, "status = {}", if self.incomplete { "incomplete" } else { "complete" }).expect("string write");
        s.push_str("[files]\n");
        for f in &self.files {
            writeln!(s, "{}", f.display()).expect("string write");
        }
        s
    }

    /// Writes the manifest; a successful run must have produced every listed
    /// file with some content.
    pub fn finish(mut self, dir: &Path, ok: bool) -> Result<(), CliError> {
        self.finished = Some(now());
        self.incomplete = !ok;
        if ok {
            for f in &self.files {
                let len = std::fs::metadata(dir.join(f)).map(|m| m.len()).unwrap_or(0);
                if len == 0 {
                    self.incomplete = true;
                    log::error!("manifest lists {} but it is missing or empty", f.display());
                }
            }
        }
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), self.render())?;
        Ok(())
    }
}

/// Reads back the `[files]` list and status of a manifest.
pub fn read_manifest(path: &Path) -> Result<(bool, Vec<PathBuf>), CliError> {
    let text = std::fs::read_to_string(path).map_err(|_| CliError::MissingArtifact(path.display().to_string()))?;
    let complete = text.lines().any(|l| l == "status = complete");
    let files = text
        .lines()
        .skip_while(|l| *l != "[files]")
        .skip(1)
        .map(PathBuf::from)
        .collect();
    Ok((complete, files))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn empty_file_marks_run_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "x\n").unwrap();
        std::fs::write(dir.path().join("b.csv"), "").unwrap();
        let mut m = RunManifest::start("train", "cfg", 1);
        m.record("a.csv");
        m.finish(dir.path(), true).unwrap();
        assert!(read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap().0);
        let mut m = RunManifest::start("train", "cfg", 1);
        m.record("b.csv");
        m.finish(dir.path(), true).unwrap();
        let (complete, files) = read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(!complete);
        assert_eq!(files, vec![PathBuf::from("b.csv")]);
    }
}
