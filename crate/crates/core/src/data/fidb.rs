//! FIDB dataset files.
//!
//! Little-endian layout:
//!
//! ```text
//! "FIDB" | u32 version=1 | u32 N | u32 C | u32 H | u32 W | u32 K
//!        | N x u8 labels | N*C*H*W x f32 pixels (row-major, in [0,1])
//! ```

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FIDB";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.n_classes > 256 {
        return Err(Error::Input(format!(
            "FIDB stores labels as u8; {} classes do not fit",
            ds.n_classes
        )));
    }
    let [n, c, h, w] = ds.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + n + 4 * ds.images.len());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, n as u32, c as u32, h as u32, w as u32, ds.n_classes as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(ds.labels.iter().map(|&y| y as u8));
    for &p in ds.images.data() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let fmt = |offset: usize, msg: String| Error::Format { offset, msg };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fmt(0, "bad magic, expected \"FIDB\"".into()));
    }
    let word = |i: usize| -> Result<u32> {
        let off = 4 + 4 * i;
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| fmt(bytes.len(), format!("truncated header, needed {HEADER_LEN} bytes")))
    };
    let version = word(0)?;
    if version != VERSION {
        return Err(fmt(4, format!("unsupported version {version}")));
    }
    let [n, c, h, w, k] = [1, 2, 3, 4, 5].map(|i| word(i).map(|v| v as usize));
    let (n, c, h, w, k) = (n?, c?, h?, w?, k?);
    for (i, (name, v)) in [("N", n), ("C", c), ("H", h), ("W", w), ("K", k)].iter().enumerate() {
        if *v == 0 {
            return Err(fmt(8 + 4 * i, format!("{name} must be positive")));
        }
    }
    let pixels = n * c * h * w;
    let need = HEADER_LEN + n + 4 * pixels;
    if bytes.len() < need {
        return Err(fmt(
            bytes.len(),
            format!("truncated body, expected {need} bytes, file has {}", bytes.len()),
        ));
    }
    if bytes.len() > need {
        return Err(fmt(need, format!("{} trailing bytes", bytes.len() - need)));
    }
    let labels: Vec<usize> = bytes[HEADER_LEN..HEADER_LEN + n].iter().map(|&b| b as usize).collect();
    let data: Vec<f64> = bytes[HEADER_LEN + n..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let images = Tensor::new(vec![n, c, h, w], data)?;
    Dataset::new(images, labels, k)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
