//! One writer per output directory. The lock is a file created with
//! `create_new`, removed on drop; a crash can leave it behind, so the error
//! message says which file to delete.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::CliError;

pub const LOCK_FILE: &str = ".hgconv.lock";

#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| {
            CliError::Runtime(format!("cannot create output dir {}: {e}", dir.display()))
        })?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Runtime(format!(
                    "output dir {} is in use by another run (delete {} if that run is gone)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(CliError::Runtime(format!(
                "cannot lock {}: {e}",
                path.display()
            ))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
