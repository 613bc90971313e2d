//! Artifact codecs: the versioned checkpoint format, content hashing for
//! manifests, and jsonl helpers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"OLCP1\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    tensors: Vec<TensorMeta>,
    /// Name → tensor index. Aliased tensors appear once in `tensors` and
    /// under every alias here.
    names: BTreeMap<String, usize>,
}

/// Flat parameter dump: magic, version, header length, JSON header, then f64
/// little-endian tensor data in slot order. Aliases share one slot.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        tensors: store
            .tensors()
            .iter()
            .map(|t| TensorMeta {
                rows: t.rows,
                cols: t.cols,
            })
            .collect(),
        names: store.names().map(|(n, id)| (n.to_string(), id.0)).collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::parse("checkpoint header", e))?;
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&header_json).map_err(io_err)?;
    for t in store.tensors() {
        for v in &t.data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::parse(
            path.display().to_string(),
            "bad checkpoint magic",
        ));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io_err)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            path.display().to_string(),
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io_err)?;
    let header_len = u64::from_le_bytes(b8) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(io_err)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_json).map_err(|e| Error::parse("checkpoint header", e))?;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let mut m = Matrix::zeros(meta.rows, meta.cols);
        for v in m.data.iter_mut() {
            r.read_exact(&mut b8).map_err(io_err)?;
            *v = f64::from_le_bytes(b8);
        }
        tensors.push(m);
    }

    // Rebuild slots in order, first name registers, the rest alias.
    let mut names_by_slot: Vec<Vec<&String>> = vec![Vec::new(); tensors.len()];
    for (name, &slot) in &header.names {
        if slot >= tensors.len() {
            return Err(Error::parse(
                path.display().to_string(),
                "name references missing slot",
            ));
        }
        names_by_slot[slot].push(name);
    }
    let mut store = ParamStore::new();
    let mut pending_aliases = Vec::new();
    for (slot, tensor) in tensors.into_iter().enumerate() {
        let names = &names_by_slot[slot];
        let Some(first) = names.first() else {
            return Err(Error::parse(
                path.display().to_string(),
                "unnamed checkpoint slot",
            ));
        };
        let id = store.register(first, tensor);
        for alias in &names[1..] {
            pending_aliases.push(((*alias).clone(), id));
        }
    }
    for (name, id) in pending_aliases {
        store.alias(&name, id);
    }
    Ok(store)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f
            .read(&mut buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

/// Content hash for manifests. Timing fields are not content: for
/// `results.jsonl`, each line is parsed, `stats.micros` is zeroed, and the
/// canonical compact form is hashed; other artifacts hash raw bytes.
pub fn artifact_hash(path: &Path) -> Result<String> {
    if path.file_name().and_then(|n| n.to_str()) == Some("results.jsonl") {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut h = Sha256::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut v: serde_json::Value = serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("results.jsonl line {}", i + 1), e))?;
            if let Some(m) = v.pointer_mut("/stats/micros") {
                *m = serde_json::Value::from(0);
            }
            h.update(v.to_string().as_bytes());
            h.update(b"\n");
        }
        Ok(hex(&h.finalize()))
    } else {
        sha256_file(path)
    }
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line =
            serde_json::to_string(item).map_err(|e| Error::parse(path.display().to_string(), e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("{} line {}", path.display(), i + 1), e))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_preserves_aliasing() {
        let mut store = ParamStore::new();
        let shared = store.register("a.shared", Matrix::row_vector(vec![1.0, 2.0, 3.0]));
        store.alias("b.shared", shared);
        store.register(
            "c.own",
            Matrix {
                rows: 2,
                cols: 2,
                data: vec![4.0, 5.0, 6.0, 7.0],
            },
        );

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        save_checkpoint(&store, &path).unwrap();
        let mut back = load_checkpoint(&path).unwrap();

        let a = back.lookup("a.shared").unwrap();
        let b = back.lookup("b.shared").unwrap();
        assert_eq!(a, b, "aliases must share one slot after reload");
        assert_eq!(back.get(a).data, vec![1.0, 2.0, 3.0]);
        back.get_mut(a).data[0] = 42.0;
        assert_eq!(back.get(b).data[0], 42.0);
        let c = back.lookup("c.own").unwrap();
        assert_eq!(back.get(c).rows, 2);
        assert_ne!(a, c);
    }

    #[test]
    fn results_hash_ignores_micros_only() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("results.jsonl");
        let p2 = dir.path().join("sub").join("results.jsonl");
        std::fs::create_dir_all(p2.parent().unwrap()).unwrap();
        std::fs::write(
            &p1,
            "{\"query_id\":0,\"stats\":{\"full_calls\":3,\"micros\":123}}\n",
        )
        .unwrap();
        std::fs::write(
            &p2,
            "{\"query_id\":0,\"stats\":{\"full_calls\":3,\"micros\":999}}\n",
        )
        .unwrap();
        assert_eq!(artifact_hash(&p1).unwrap(), artifact_hash(&p2).unwrap());
        let p3 = dir.path().join("other").join("results.jsonl");
        std::fs::create_dir_all(p3.parent().unwrap()).unwrap();
        std::fs::write(
            &p3,
            "{\"query_id\":1,\"stats\":{\"full_calls\":3,\"micros\":123}}\n",
        )
        .unwrap();
        assert_ne!(artifact_hash(&p1).unwrap(), artifact_hash(&p3).unwrap());
    }

    #[test]
    fn bad_magic_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTCKPT000000").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Parse { .. })));
    }
}
