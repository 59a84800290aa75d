//! Artifact files: atomic writes (no partial output survives a failure),
//! content hashing, and the run manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

/// Write a file through a temp path and rename into place on success; the
/// temp file is removed if the writer fails.
pub fn write_atomic<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp: PathBuf = {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".tmp");
        path.with_file_name(name)
    };
    let file = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    let mut writer = BufWriter::new(file);
    match write(&mut writer).and_then(|()| writer.flush().map_err(Into::into)) {
        Ok(()) => {
            drop(writer);
            fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
            Ok(())
        }
        Err(e) => {
            drop(writer);
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let mut file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Hash every regular file under `dir` (except the manifest itself) into
/// `manifest.json`, keyed by path relative to `dir`.
pub fn write_manifest(dir: &Path) -> Result<()> {
    let mut entries: BTreeMap<String, String> = BTreeMap::new();
    collect_hashes(dir, dir, &mut entries)?;
    write_atomic(&dir.join("manifest.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &entries)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn collect_hashes(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| Ok(e?.path())).collect::<Result<_>>()?;
    paths.sort();
    for path in paths {
        if path.is_dir() {
            collect_hashes(root, &path, out)?;
        } else if path.file_name().map(|n| n != "manifest.json").unwrap_or(false) {
            let rel = path.strip_prefix(root)?.to_string_lossy().into_owned();
            out.insert(rel, sha256_hex(&path)?);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_write_leaves_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("x.bin");
        let err = write_atomic(&target, |w| {
            w.write_all(b"partial")?;
            anyhow::bail!("boom");
        });
        assert!(err.is_err());
        assert!(!target.exists());
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none(), "no temp residue");
    }

    #[test]
    fn manifest_covers_all_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), b"alpha").unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/b.txt"), b"beta").unwrap();
        write_manifest(dir.path()).unwrap();
        let manifest: BTreeMap<String, String> =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest.len(), 2);
        assert!(manifest.contains_key("a.txt"));
        assert!(manifest.contains_key("sub/b.txt"));
    }
}
