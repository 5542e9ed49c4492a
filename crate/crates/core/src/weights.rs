//! Flat little-endian weight dumps:
//! `u32 count | count x (u32 rank | rank x u32 dim | prod(dims) x f64)`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model};
use crate::tensor::Tensor;

pub fn encode(params: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for t in params {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| Error::Format {
            offset: bytes.len(),
            msg: format!("truncated weight file, needed {n} bytes at {pos}"),
        })?;
        pos += n;
        Ok(s)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = u32_at(take(4)?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(take(4)?));
        }
        let n: usize = shape.iter().product();
        let data = take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Tensor::new(shape, data)?);
    }
    if pos != bytes.len() {
        return Err(Error::Format {
            offset: pos,
            msg: format!("{} trailing bytes", bytes.len() - pos),
        });
    }
    Ok(out)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model.params())).map_err(|e| Error::io(path, e))
}

/// Load parameters and attach them to `layers`; shapes are checked.
pub fn load_model(layers: Vec<LayerSpec>, path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Model::new(layers, decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = encode(&[t.clone()]);
        assert_eq!(b.len(), 4 + 4 + 8 + 16);
        assert_eq!(&b[..4], &1u32.to_le_bytes());
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[16..24], &1.0f64.to_le_bytes());
        assert_eq!(decode(&b).unwrap(), vec![t]);
        assert!(decode(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = Model::mlp(4, &[3], 2, 5).unwrap();
        save_model(&m, &p).unwrap();
        assert_eq!(load_model(m.layers().to_vec(), &p).unwrap(), m);
        assert!(load_model(crate::nn::mlp_layers(4, &[2], 2), &p).is_err());
    }
}
