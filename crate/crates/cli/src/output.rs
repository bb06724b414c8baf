//! All-or-nothing output: results are staged next to their destination and
//! renamed into place only once complete.

use std::fs;
use std::path::{Path, PathBuf};

use tempfile::TempDir;

use crate::error::{CliError, CliResult};

fn parent_of(path: &Path) -> CliResult<PathBuf> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", parent.display())))?;
    Ok(parent)
}

/// A staging directory that becomes `out` on [`Staging::commit`]. Dropping it
/// uncommitted removes everything written so far.
pub struct Staging {
    dir: TempDir,
    out: PathBuf,
}

impl Staging {
    pub fn new(out: &Path) -> CliResult<Self> {
        let parent = parent_of(out)?;
        let dir = tempfile::Builder::new()
            .prefix(".olens-stage-")
            .tempdir_in(&parent)
            .map_err(|e| {
                CliError::io(format!("cannot stage output in {}: {e}", parent.display()))
            })?;
        Ok(Self {
            dir,
            out: out.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.path().join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(format!("cannot write {name}: {e}")))
    }

    /// Moves the staged directory to its destination, replacing any previous result.
    pub fn commit(self) -> CliResult<()> {
        let staged = self.dir.keep();
        set_readable(&staged);
        let fail = |e: std::io::Error| {
            CliError::io(format!(
                "cannot move output into {}: {e}",
                self.out.display()
            ))
        };
        if self.out.exists() {
            let parent = parent_of(&self.out)?;
            let old = tempfile::Builder::new()
                .prefix(".olens-old-")
                .tempdir_in(&parent)
                .map_err(fail)?
                .keep();
            fs::remove_dir(&old).map_err(fail)?;
            fs::rename(&self.out, &old).map_err(fail)?;
            fs::rename(&staged, &self.out).map_err(fail)?;
            if old.is_dir() {
                fs::remove_dir_all(&old).map_err(fail)?;
            } else {
                fs::remove_file(&old).map_err(fail)?;
            }
        } else {
            fs::rename(&staged, &self.out).map_err(fail)?;
        }
        Ok(())
    }
}

#[cfg(unix)]
fn set_readable(dir: &Path) {
    use std::os::unix::fs::PermissionsExt;
    let _ = fs::set_permissions(dir, fs::Permissions::from_mode(0o755));
}

#[cfg(not(unix))]
fn set_readable(_: &Path) {}

/// Writes a file via a sibling temporary and an atomic rename.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let parent = parent_of(path)?;
    let fail = |e: std::io::Error| CliError::io(format!("cannot write {}: {e}", path.display()));
    let mut tmp = tempfile::Builder::new()
        .prefix(".olens-")
        .tempfile_in(&parent)
        .map_err(fail)?;
    std::io::Write::write_all(&mut tmp, bytes).map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_stage_leaves_nothing() {
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("result");
        {
            let stage = Staging::new(&out).unwrap();
            stage.write("a.txt", b"x").unwrap();
        }
        assert!(!out.exists());
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 0);
    }

    #[test]
    fn commit_replaces_previous_result() {
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("result");
        for content in [&b"first"[..], b"second"] {
            let stage = Staging::new(&out).unwrap();
            stage.write("a.txt", content).unwrap();
            stage.commit().unwrap();
        }
        assert_eq!(fs::read(out.join("a.txt")).unwrap(), b"second");
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 1);
    }

    #[test]
    fn atomic_file_write() {
        let root = tempfile::tempdir().unwrap();
        let path = root.path().join("sub/x.bin");
        write_file_atomic(&path, b"abc").unwrap();
        write_file_atomic(&path, b"de").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"de");
    }
}
