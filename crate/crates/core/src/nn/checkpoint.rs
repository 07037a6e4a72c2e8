//! Binary checkpoint format.
//!
//! ```text
//! "AFA1" | version: u16 LE | header_len: u32 LE | header JSON {spec, seed}
//!        | tensor_count: u32 LE | per tensor: len: u32 LE, len x f32 LE
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec, NnError, Result};
use crate::tensor::Tensor;
use crate::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AFA1";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    seed: u64,
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&Header {
        spec: model.spec().clone(),
        seed: model.seed(),
    })?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for p in model.params() {
        w.write_all(&(p.len() as u32).to_le_bytes())?;
        for v in p.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Model<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(NnError::BadMagic(magic));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver)?;
    let ver = u16::from_le_bytes(ver);
    if ver != CHECKPOINT_VERSION {
        return Err(NnError::UnsupportedVersion(ver));
    }
    let hlen = read_u32(&mut r)? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf)?;
    let layout = header.spec.param_layout()?;
    let count = read_u32(&mut r)? as usize;
    if count != layout.len() {
        return Err(NnError::CheckpointShape(format!(
            "spec needs {} tensors, file holds {count}",
            layout.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for (i, (_, shape)) in layout.iter().enumerate() {
        let len = read_u32(&mut r)? as usize;
        let want: usize = shape.iter().product();
        if len != want {
            return Err(NnError::CheckpointShape(format!(
                "tensor {i}: spec shape {shape:?} needs {want} values, file holds {len}"
            )));
        }
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        params.push(Tensor::new(shape.clone(), data)?);
    }
    Model::from_parts(header.spec, params, header.seed)
}

impl<S: Scalar> Model<S> {
    /// Loads parameters from `path` into this model; the stored spec must
    /// match this model's spec exactly.
    pub fn load_into(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let loaded: Model<S> = load_checkpoint(path)?;
        if loaded.spec != self.spec {
            let ours = self.spec.param_layout()?;
            let theirs = loaded.spec.param_layout()?;
            let ours: Vec<_> = ours.into_iter().map(|(_, s)| s).collect();
            let theirs: Vec<_> = theirs.into_iter().map(|(_, s)| s).collect();
            return Err(NnError::CheckpointShape(format!(
                "stored parameter shapes {theirs:?} do not fit {ours:?}"
            )));
        }
        *self = loaded;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.afa");
        let m = Model::<f32>::new(ModelSpec::image_cnn([1, 8, 8], 3), 11).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let back: Model<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        let x = Tensor::from_f64(vec![2, 1, 8, 8], &(0..128).map(|i| (i as f64 * 0.1).cos()).collect::<Vec<_>>()).unwrap();
        let a = m.logits(&x).unwrap();
        let b = back.logits(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.afa");
        let m = Model::<f32>::new(ModelSpec::mlp(4, 2), 0).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(NnError::BadMagic(_))));
    }

    #[test]
    fn version_and_truncation_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.afa");
        let m = Model::<f32>::new(ModelSpec::mlp(4, 2), 0).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut v = bytes.clone();
        v[4] = 9;
        std::fs::write(&path, &v).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(NnError::UnsupportedVersion(9))));

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(NnError::Truncated)));
    }

    #[test]
    fn mismatched_spec_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.afa");
        let m = Model::<f32>::new(ModelSpec::mlp(4, 2), 0).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let mut other = Model::<f32>::new(ModelSpec::mlp(5, 2), 0).unwrap();
        assert!(matches!(other.load_into(&path), Err(NnError::CheckpointShape(_))));
    }
}
