//! Named-tensor checkpoints: a plain-text manifest plus one little-endian
//! `f64` blob.
//!
//! `manifest.txt` holds a version line followed by one line per tensor:
//! `<name> <d0,d1,...> <byte offset>`. A rank-0 tensor writes `-` as its
//! shape. Names must not contain whitespace.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MANIFEST: &str = "manifest.txt";
const BLOB: &str = "tensors.bin";
const HEADER: &str = "agile-tensors v1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

pub fn save_tensors(dir: &Path, tensors: &[NamedTensor]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("{HEADER}\n");
    let mut blob = Vec::new();
    for nt in tensors {
        if nt.name.is_empty() || nt.name.chars().any(char::is_whitespace) {
            return Err(Error::Usage(format!("invalid tensor name {:?}", nt.name)));
        }
        let shape = if nt.tensor.shape().is_empty() {
            "-".to_string()
        } else {
            nt.tensor
                .shape()
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        manifest.push_str(&format!("{} {} {}\n", nt.name, shape, blob.len()));
        for v in nt.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let blob_path = dir.join(BLOB);
    fs::File::create(&blob_path)
        .and_then(|mut f| f.write_all(&blob))
        .map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST);
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_tensors(dir: &Path) -> Result<Vec<NamedTensor>> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::ingestion(&manifest_path, "missing or unknown header"));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |msg: &str| Error::ingestion(&manifest_path, format!("line {}: {msg}", lineno + 2));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, offset] = fields[..] else {
            return Err(bad("expected `name shape offset`"));
        };
        let shape: Vec<usize> = if shape == "-" {
            Vec::new()
        } else {
            shape
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("malformed shape"))?
        };
        let offset: usize = offset.parse().map_err(|_| bad("malformed offset"))?;
        let count: usize = shape.iter().product();
        let end = offset
            .checked_add(count * 8)
            .filter(|&end| end <= blob.len())
            .ok_or_else(|| Error::ingestion(&blob_path, format!("tensor {name} extends past end of blob")))?;
        let data = blob[offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        out.push(NamedTensor {
            name: name.to_string(),
            tensor: Tensor::from_parts(shape, data),
        });
    }
    Ok(out)
}
