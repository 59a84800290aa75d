//! Artifact validation: every file in an output directory either starts
//! with a known self-describing header or parses as JSONL/JSON/CSV.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::artifacts::sha256_hex;

#[derive(Debug, PartialEq, Eq)]
pub enum FileKind {
    Jsonl,
    Json,
    Csv,
    Markdown,
    LmParams,
    CompressorParams,
    Tensor,
    AttentionTraces,
}

fn validate_jsonl(path: &Path) -> Result<()> {
    let file = File::open(path)?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        serde_json::from_str::<serde_json::Value>(&line)
            .with_context(|| format!("line {} is not JSON", i + 1))?;
    }
    Ok(())
}

fn validate_csv(path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields = line.split(',').count();
        match width {
            None => width = Some(fields),
            Some(w) if w != fields => {
                bail!("row {} has {} fields, expected {}", i + 1, fields, w)
            }
            _ => {}
        }
    }
    if width.is_none() {
        bail!("empty csv");
    }
    Ok(())
}

fn validate_binary(path: &Path) -> Result<FileKind> {
    let mut file = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).context("file shorter than a magic header")?;
    drop(file);
    let mut reader = BufReader::new(File::open(path)?);
    match &magic {
        b"TLM0" => {
            relprune::toylm::read_lm::<f32, _>(&mut reader).map_err(|e| anyhow::anyhow!("{e}"))?;
            Ok(FileKind::LmParams)
        }
        b"FTH0" => {
            relprune::compressor::read_compressor::<f32, _>(&mut reader)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            Ok(FileKind::CompressorParams)
        }
        b"TNSR" => {
            relprune::numerics::io::read_tensor::<f32, _>(&mut reader)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            Ok(FileKind::Tensor)
        }
        b"ATRC" => {
            relprune::toylm::read_traces::<f32, _>(&mut reader).map_err(|e| anyhow::anyhow!("{e}"))?;
            Ok(FileKind::AttentionTraces)
        }
        other => bail!("unknown magic {:?}", other),
    }
}

fn validate_file(path: &Path) -> Result<FileKind> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "tmp" => bail!("leftover partial output"),
        "jsonl" => {
            validate_jsonl(path)?;
            Ok(FileKind::Jsonl)
        }
        "json" => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<serde_json::Value>(&text)?;
            Ok(FileKind::Json)
        }
        "csv" => {
            validate_csv(path)?;
            Ok(FileKind::Csv)
        }
        "md" => {
            std::fs::read_to_string(path)?;
            Ok(FileKind::Markdown)
        }
        _ => validate_binary(path),
    }
}

/// Validate every artifact under `dir`; when a manifest is present its
/// hashes are re-checked. Returns (path, kind) pairs in path order.
pub fn validate_dir(dir: &Path) -> Result<Vec<(PathBuf, FileKind)>> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    files.sort();

    let mut results = Vec::new();
    let mut problems = Vec::new();
    for path in &files {
        match validate_file(path) {
            Ok(kind) => results.push((path.clone(), kind)),
            Err(e) => problems.push(format!("{}: {e:#}", path.display())),
        }
    }

    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let manifest: BTreeMap<String, String> =
            serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
                .context("manifest.json is not a string map")?;
        for (rel, expected) in &manifest {
            let path = dir.join(rel);
            if !path.exists() {
                problems.push(format!("{rel}: listed in manifest but missing"));
                continue;
            }
            let actual = sha256_hex(&path)?;
            if &actual != expected {
                problems.push(format!("{rel}: hash mismatch (manifest {expected}, actual {actual})"));
            }
        }
    }

    if problems.is_empty() {
        Ok(results)
    } else {
        bail!("validation failed:\n  {}", problems.join("\n  "))
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn accepts_known_formats_and_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("rows.jsonl"), b"{\"a\":1}\n{\"a\":2}\n").unwrap();
        std::fs::write(dir.path().join("table.csv"), b"a,b\n1,2\n").unwrap();
        std::fs::write(dir.path().join("notes.md"), b"# ok\n").unwrap();
        let kinds = validate_dir(dir.path()).unwrap();
        assert_eq!(kinds.len(), 3);

        std::fs::write(dir.path().join("broken.jsonl"), b"not json\n").unwrap();
        assert!(validate_dir(dir.path()).is_err());
    }

    #[test]
    fn rejects_unknown_binary_and_tmp_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("blob.bin"), b"XXXXXXXX").unwrap();
        assert!(validate_dir(dir.path()).is_err());

        let dir2 = tempfile::tempdir().unwrap();
        std::fs::write(dir2.path().join("x.csv.tmp"), b"partial").unwrap();
        assert!(validate_dir(dir2.path()).is_err());
    }

    #[test]
    fn validates_tensor_binaries_via_magic() {
        let dir = tempfile::tempdir().unwrap();
        let t = relprune::Tensor32::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut f = File::create(dir.path().join("t.bin")).unwrap();
        let mut buf = Vec::new();
        relprune::numerics::io::write_tensor(&mut buf, &t).unwrap();
        f.write_all(&buf).unwrap();
        drop(f);
        let kinds = validate_dir(dir.path()).unwrap();
        assert_eq!(kinds[0].1, FileKind::Tensor);
    }

    #[test]
    fn manifest_hash_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), b"x\n1\n").unwrap();
        crate::artifacts::write_manifest(dir.path()).unwrap();
        std::fs::write(dir.path().join("a.csv"), b"x\n2\n").unwrap();
        assert!(validate_dir(dir.path()).is_err());
    }
}
