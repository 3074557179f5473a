use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mvk_core::metrics::EvaluationReport;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const REPORT_NAME: &str = "report.json";

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub version: &'static str,
    /// The only field that differs between identical runs.
    pub generated_at_unix: u64,
    pub evaluation: EvaluationReport,
    pub artifacts: Vec<ArtifactEntry>,
}

/// Files written by one run. On failure everything registered is removed again.
pub struct Artifacts {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
        })
    }

    /// Registers `name` (relative, may contain `/`) and returns its full path.
    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    /// Path of a subdirectory; only files adopted from it become artifacts.
    pub fn subdir(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Registers a file that some other writer already placed inside the directory.
    pub fn adopt(&mut self, path: &Path) -> Result<(), CliError> {
        let rel = path
            .strip_prefix(&self.dir)
            .map_err(|_| CliError::io(format!("{} is outside the output directory", path.display())))?;
        let name = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        self.path(&name);
        Ok(())
    }

    pub fn cleanup(&self) {
        for f in self.files.iter().map(String::as_str).chain([REPORT_NAME]) {
            let _ = fs::remove_file(self.dir.join(f));
        }
        let mut subdirs: Vec<PathBuf> = self
            .files
            .iter()
            .filter_map(|f| Path::new(f).parent().filter(|p| !p.as_os_str().is_empty()).map(|p| self.dir.join(p)))
            .collect();
        subdirs.sort();
        subdirs.dedup();
        for d in subdirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }

    fn entries(&self) -> Result<Vec<ArtifactEntry>, CliError> {
        self.files
            .iter()
            .map(|name| {
                let bytes = fs::read(self.dir.join(name)).map_err(|e| CliError::io(format!("{name}: {e}")))?;
                Ok(ArtifactEntry {
                    path: name.clone(),
                    sha256: hex::encode(Sha256::digest(&bytes)),
                    bytes: bytes.len() as u64,
                })
            })
            .collect()
    }

    /// Hashes every artifact and writes the report next to them.
    pub fn finish(&self, command: &str, evaluation: EvaluationReport) -> Result<PathBuf, CliError> {
        evaluation.validate().map_err(CliError::from)?;
        let report = RunReport {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            generated_at_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            evaluation,
            artifacts: self.entries()?,
        };
        let path = self.dir.join(REPORT_NAME);
        let body = serde_json::to_string_pretty(&report).map_err(|e| CliError::io(e.to_string()))?;
        fs::write(&path, body + "\n").map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
