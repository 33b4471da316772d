use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Files produced by one command, written only once every one of them is ready.
#[derive(Default)]
pub struct Staged {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Staged {
    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.push((path.into(), bytes.into()));
    }

    pub fn add_json<T: serde::Serialize>(&mut self, path: impl Into<PathBuf>, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
        text.push('\n');
        self.add(path, text);
        Ok(())
    }

    /// Writes every file to a sibling temp file, then renames them into place.
    /// On failure the temp files are removed and no target is touched.
    pub fn commit(self) -> Result<Vec<PathBuf>, CliError> {
        let mut temps = Vec::with_capacity(self.files.len());
        let result = self.write_temps(&mut temps);
        if let Err(e) = result {
            for t in &temps {
                let _ = fs::remove_file(t);
            }
            return Err(e);
        }
        for (t, (target, _)) in temps.iter().zip(&self.files) {
            fs::rename(t, target)
                .map_err(|e| CliError::Internal(format!("cannot move output into {}: {e}", target.display())))?;
        }
        Ok(self.files.into_iter().map(|(p, _)| p).collect())
    }

    fn write_temps(&self, temps: &mut Vec<PathBuf>) -> Result<(), CliError> {
        for (target, bytes) in &self.files {
            let dir = target.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            fs::create_dir_all(dir).map_err(|e| CliError::Internal(format!("cannot create {}: {e}", dir.display())))?;
            let name = target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let tmp = dir.join(format!(".{name}.partial-{}", std::process::id()));
            temps.push(tmp.clone());
            fs::write(&tmp, bytes).map_err(|e| CliError::Internal(format!("cannot write {}: {e}", tmp.display())))?;
        }
        Ok(())
    }
}
