//! Per-run output directories with a hash manifest.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::CliError;

pub struct RunDir {
    path: PathBuf,
    files: Vec<(String, String)>,
}

impl RunDir {
    /// Creates `<root>/<command>-<timestamp>`, adding a counter on collision.
    pub fn create(root: &Path, command: &str) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let base = format!("{command}-{stamp}");
        let mut path = root.join(&base);
        let mut n = 1;
        loop {
            match fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    path = root.join(format!("{base}-{n}"));
                    n += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(Self { path, files: Vec::new() })
    }

    #[cfg(test)]
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let bytes = bytes.as_ref();
        let p = self.path.join(name);
        fs::write(&p, bytes)?;
        self.files.retain(|(f, _)| f != name);
        self.files.push((name.to_string(), hex::encode(Sha256::digest(bytes))));
        Ok(p)
    }

    /// Writes `MANIFEST`: one `sha256  name` line per file, sorted by name.
    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.files.sort();
        let text: String = self.files.iter().map(|(f, h)| format!("{h}  {f}\n")).collect();
        fs::write(self.path.join("MANIFEST"), text)?;
        Ok(self.path)
    }
}
