use std::fs::{File, TryLockError};
use std::path::Path;

use pva_core::{Error, Result};

/// Advisory exclusive lock on a checkpoint directory, released on drop.
pub struct DirLock {
    _file: File,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        match file.try_lock() {
            Ok(()) => Ok(DirLock { _file: file }),
            Err(TryLockError::WouldBlock) => {
                Err(Error::Config(format!("{} is locked by another pva process", dir.display())))
            }
            Err(TryLockError::Error(e)) => Err(Error::io(&path, e)),
        }
    }
}
