use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const LOCK_FILE: &str = ".lock";

/// Output directory held by exactly one process. The lock is released on drop.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(HarnessError::Locked { path: path.display().to_string() })
            }
            Err(e) => return Err(HarnessError::io(&lock, e)),
        }
        Ok(RunDir { path: path.to_path_buf(), lock })
    }

    pub fn join(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.path.join(rel)
    }

    /// Creates `rel` under the run directory.
    pub fn subdir(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.path.join(rel);
        fs::create_dir_all(&p).map_err(|e| HarnessError::io(&p, e))?;
        Ok(p)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Writes through a temporary sibling so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

pub fn write_json<V: Serialize + ?Sized>(path: &Path, value: &V) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

/// Compact JSON, for large checkpoints.
pub fn write_json_compact<V: Serialize + ?Sized>(path: &Path, value: &V) -> Result<()> {
    write_atomic(path, &serde_json::to_vec(value)?)
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let f = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

/// One JSON document per line.
pub fn write_jsonl<V: Serialize>(path: &Path, records: &[V]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn read_jsonl<V: DeserializeOwned>(path: &Path) -> Result<Vec<V>> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Content hash of named inputs, in the style of a git tree: one
/// `<sha256>  <name>` line per input, then the hash of those lines.
#[derive(Default)]
pub struct InputHash {
    lines: Vec<String>,
}

impl InputHash {
    pub fn bytes(&mut self, name: &str, bytes: &[u8]) {
        self.lines.push(format!("{}  {name}", sha256_hex(bytes)));
    }

    pub fn file(&mut self, name: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        self.bytes(name, &bytes);
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.lines.join("\n").as_bytes())
    }

    /// Manifest text, ending in the `<digest>  total` line.
    pub fn manifest(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push_str(&format!("\n{}  total\n", self.digest()));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_open_is_refused_until_drop() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunDir::open(dir.path()).unwrap();
        assert!(matches!(RunDir::open(dir.path()), Err(HarnessError::Locked { .. })));
        drop(a);
        RunDir::open(dir.path()).unwrap();
    }

    #[test]
    fn input_hash_depends_on_names_and_contents() {
        let mut a = InputHash::default();
        a.bytes("x", b"1");
        let mut b = InputHash::default();
        b.bytes("y", b"1");
        let mut c = InputHash::default();
        c.bytes("x", b"2");
        assert_ne!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert!(a.manifest().ends_with(&format!("{}  total\n", a.digest())));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_jsonl(&p, &[1u32, 2, 3]).unwrap();
        assert_eq!(read_jsonl::<u32>(&p).unwrap(), vec![1, 2, 3]);
    }
}
