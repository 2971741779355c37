//! Output directories that appear all at once or not at all.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

/// Files are written into a hidden sibling directory, which is renamed onto
/// the target by [`Staging::commit`]. Dropping without committing removes it.
pub struct Staging {
    target: PathBuf,
    tmp: PathBuf,
    force: bool,
    committed: bool,
}

impl Staging {
    /// Fails up front if `target` exists and `force` is off.
    pub fn new(target: &Path, force: bool) -> Result<Self> {
        if target.exists() && !force {
            return Err(CliError::Failure(format!(
                "{} already exists; pass --force to replace it",
                target.display()
            )));
        }
        let name = target
            .file_name()
            .ok_or_else(|| CliError::Failure(format!("bad output directory {}", target.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(CliError::io(&parent))?;
        let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(CliError::io(&tmp))?;
        }
        fs::create_dir(&tmp).map_err(CliError::io(&tmp))?;
        Ok(Self {
            target: target.to_path_buf(),
            tmp,
            force,
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn file(&self, rel: &str) -> Result<PathBuf> {
        let p = self.tmp.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        }
        Ok(p)
    }

    pub fn write(&self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.file(rel)?;
        fs::write(&p, bytes).map_err(CliError::io(&p))
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            if !self.force {
                return Err(CliError::Failure(format!("{} appeared while running", self.target.display())));
            }
            let res = if self.target.is_dir() {
                fs::remove_dir_all(&self.target)
            } else {
                fs::remove_file(&self.target)
            };
            res.map_err(CliError::io(&self.target))?;
        }
        fs::rename(&self.tmp, &self.target).map_err(CliError::io(&self.target))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_and_refuse() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("out");
        let s = Staging::new(&target, false).unwrap();
        s.write("a/b.txt", "x").unwrap();
        assert!(!target.exists());
        s.commit().unwrap();
        assert_eq!(fs::read_to_string(target.join("a/b.txt")).unwrap(), "x");
        assert!(Staging::new(&target, false).is_err());
        let s = Staging::new(&target, true).unwrap();
        s.write("c.txt", "y").unwrap();
        s.commit().unwrap();
        assert!(!target.join("a").exists());
    }

    #[test]
    fn dropped_staging_leaves_nothing() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("out");
        {
            let s = Staging::new(&target, false).unwrap();
            s.write("x", "1").unwrap();
        }
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 0);
    }
}
