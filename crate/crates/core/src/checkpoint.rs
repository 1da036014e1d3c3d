//! On-disk tensor bundles: a text manifest plus a little-endian payload.
//!
//! ```text
//! conmatch-checkpoint v1
//! dtype=f64
//! count=3
//! model.classifier.bias 1 4 0
//! ...
//! ```
//!
//! Each entry line is `name rows cols offset`, with `offset` counted in
//! scalars from the start of the payload. The payload starts with the
//! magic bytes `CMCK` and a little-endian `u32` format version.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const HEADER: &str = "conmatch-checkpoint v1";
const MAGIC: &[u8; 4] = b"CMCK";
const VERSION: u32 = 1;

pub fn manifest_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.manifest"))
}

pub fn payload_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.bin"))
}

pub fn save_tensors<T: Scalar>(store: &ParamStore<T>, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("{HEADER}\ndtype={}\ncount={}\n", T::DTYPE.name(), store.len());
    let mut payload = Vec::with_capacity(8 + store.numel() * T::DTYPE.size());
    payload.extend_from_slice(MAGIC);
    payload.extend_from_slice(&VERSION.to_le_bytes());
    let mut offset = 0usize;
    for (name, t) in store.iter() {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("tensor name `{name}` cannot be stored")));
        }
        manifest.push_str(&format!("{name} {} {} {offset}\n", t.rows(), t.cols()));
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        offset += t.len();
    }
    fs::write(manifest_path(dir, stem), manifest)?;
    fs::write(payload_path(dir, stem), payload)?;
    Ok(())
}

pub fn load_tensors<T: Scalar>(dir: &Path, stem: &str) -> Result<ParamStore<T>> {
    let what = "checkpoint manifest";
    let text = fs::read_to_string(manifest_path(dir, stem))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::format(what, format!("first line must be `{HEADER}`")));
    }
    let dtype = lines
        .next()
        .and_then(|l| l.strip_prefix("dtype="))
        .and_then(DType::parse)
        .ok_or_else(|| Error::format(what, "missing or unknown dtype"))?;
    if dtype != T::DTYPE {
        return Err(Error::format(
            what,
            format!("stored as {}, requested {}", dtype.name(), T::DTYPE.name()),
        ));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("count="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(what, "missing count"))?;

    let payload = fs::read(payload_path(dir, stem))?;
    if payload.len() < 8 || &payload[..4] != MAGIC {
        return Err(Error::format("checkpoint payload", "bad magic"));
    }
    let version = u32::from_le_bytes(payload[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format("checkpoint payload", format!("unsupported version {version}")));
    }
    let body = &payload[8..];
    let size = dtype.size();

    let mut store = ParamStore::new();
    for line in lines.by_ref().take(count) {
        let fields: Vec<&str> = line.split(' ').collect();
        let [name, rows, cols, offset] = fields[..] else {
            return Err(Error::format(what, format!("bad entry `{line}`")));
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(what, format!("bad entry `{line}`")));
        let (rows, cols, offset) = (parse(rows)?, parse(cols)?, parse(offset)?);
        let start = offset * size;
        let end = start + rows * cols * size;
        if end > body.len() {
            return Err(Error::format("checkpoint payload", format!("`{name}` runs past the end")));
        }
        let data = body[start..end].chunks_exact(size).map(T::read_le).collect();
        store.insert(name, Tensor::from_vec(rows, cols, data));
    }
    if store.len() != count {
        return Err(Error::format(what, format!("expected {count} entries, found {}", store.len())));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f64>::new();
        s.insert("a.weight", Tensor::from_rows(&[vec![0.1, -2.5e-300], vec![f64::MIN_POSITIVE, 3.0]]));
        s.insert("b", Tensor::row_vector(vec![1.0 / 3.0]));
        save_tensors(&s, dir.path(), "ck").unwrap();
        let back = load_tensors::<f64>(dir.path(), "ck").unwrap();
        assert_eq!(back, s);
        assert!(load_tensors::<f32>(dir.path(), "ck").is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::row_vector(vec![1.0; 8]));
        save_tensors(&s, dir.path(), "ck").unwrap();
        let p = payload_path(dir.path(), "ck");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_tensors::<f32>(dir.path(), "ck"), Err(Error::Format { .. })));
    }
}
