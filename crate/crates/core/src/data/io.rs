//! IDX and CIFAR binary readers, and the manifest + payload dataset format.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result, Split};
use crate::tensor::Tensor;
use crate::Scalar;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_PIXELS: usize = 3 * 32 * 32;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated {
            path: path.display().to_string(),
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX file, returning its dimensions and payload.
fn parse_idx<'a>(bytes: &'a [u8], path: &Path, magic: u32) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            found,
            expected: magic,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let need = start + dims.iter().product::<usize>();
    if bytes.len() < need {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            expected: need,
            found: bytes.len(),
        });
    }
    Ok((dims, &bytes[start..need]))
}

/// Loads an IDX image file (`0x0803`) and label file (`0x0801`). Pixels are
/// scaled into `[0, 1]`; samples have shape `[1, h, w]`.
pub fn load_idx<S: Scalar>(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    num_classes: usize,
    split: Split,
) -> Result<Dataset<S>> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ib = read(ip)?;
    let lb = read(lp)?;
    let (idims, pixels) = parse_idx(&ib, ip, IDX_IMAGES)?;
    let (ldims, raw_labels) = parse_idx(&lb, lp, IDX_LABELS)?;
    if idims[0] != ldims[0] {
        return Err(DataError::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let labels = checked_labels(raw_labels.iter().map(|&b| b as usize), num_classes, lp)?;
    let scale = S::lit(1.0 / 255.0);
    let data = pixels.iter().map(|&p| S::lit(p as f64) * scale).collect();
    let samples = Tensor::new(vec![idims[0], 1, idims[1], idims[2]], data)?;
    Dataset::new(samples, labels, num_classes, split)
}

fn checked_labels(raw: impl Iterator<Item = usize>, num_classes: usize, path: &Path) -> Result<Vec<usize>> {
    raw.enumerate()
        .map(|(index, label)| {
            if label >= num_classes {
                Err(DataError::LabelRange {
                    path: path.display().to_string(),
                    index,
                    label,
                    max: num_classes - 1,
                })
            } else {
                Ok(label)
            }
        })
        .collect()
}

/// Loads `train-*` and `t10k-*` IDX files from an MNIST directory.
pub fn load_mnist_dir<S: Scalar>(dir: impl AsRef<Path>) -> Result<(Dataset<S>, Dataset<S>)> {
    let d = dir.as_ref();
    let train = load_idx(
        d.join("train-images-idx3-ubyte"),
        d.join("train-labels-idx1-ubyte"),
        10,
        Split::Train,
    )?;
    let test = load_idx(
        d.join("t10k-images-idx3-ubyte"),
        d.join("t10k-labels-idx1-ubyte"),
        10,
        Split::Test,
    )?;
    Ok((train, test))
}

/// Loads CIFAR binary batch files. `label_bytes` is 1 for CIFAR-10 and 2 for
/// CIFAR-100, whose rows carry a coarse then a fine label; `label_index`
/// picks which one to use.
pub fn load_cifar_binary<S: Scalar>(
    paths: &[PathBuf],
    label_bytes: usize,
    label_index: usize,
    num_classes: usize,
    split: Split,
) -> Result<Dataset<S>> {
    if label_index >= label_bytes {
        return Err(DataError::Invalid(format!(
            "label index {label_index} with {label_bytes} label bytes"
        )));
    }
    let row = label_bytes + CIFAR_PIXELS;
    let scale = S::lit(1.0 / 255.0);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % row != 0 {
            return Err(DataError::Truncated {
                path: path.display().to_string(),
                expected: bytes.len().div_ceil(row).max(1) * row,
                found: bytes.len(),
            });
        }
        let raw: Vec<usize> = bytes.chunks(row).map(|r| r[label_index] as usize).collect();
        labels.extend(checked_labels(raw.into_iter(), num_classes, path)?);
        for r in bytes.chunks(row) {
            data.extend(r[label_bytes..].iter().map(|&p| S::lit(p as f64) * scale));
        }
    }
    let samples = Tensor::new(vec![labels.len(), 3, 32, 32], data)?;
    Dataset::new(samples, labels, num_classes, split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub shape: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub labels: Vec<usize>,
    /// File name of the little-endian f32 payload, relative to the manifest.
    pub payload: String,
}

const MANIFEST_FORMAT: &str = "afa-dataset-v1";

/// Writes `<stem>.json` and `<stem>.f32` into `dir`; returns the manifest path.
pub fn save_dataset<S: Scalar>(ds: &Dataset<S>, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let p = path.display().to_string();
        move |source| DataError::Io { path: p, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let payload = format!("{stem}.f32");
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        shape: ds.samples().shape().to_vec(),
        num_classes: ds.num_classes(),
        split: ds.split(),
        labels: ds.labels().to_vec(),
        payload: payload.clone(),
    };
    let bytes: Vec<u8> = ds
        .samples()
        .data()
        .iter()
        .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
        .collect();
    let pp = dir.join(&payload);
    fs::write(&pp, bytes).map_err(io(&pp))?;
    let mp = dir.join(format!("{stem}.json"));
    fs::write(&mp, serde_json::to_vec_pretty(&manifest)?).map_err(io(&mp))?;
    Ok(mp)
}

pub fn load_dataset<S: Scalar>(manifest_path: impl AsRef<Path>) -> Result<Dataset<S>> {
    let mp = manifest_path.as_ref();
    let manifest: DatasetManifest = serde_json::from_slice(&read(mp)?)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(DataError::Invalid(format!("unknown manifest format {:?}", manifest.format)));
    }
    let pp = mp.parent().unwrap_or(Path::new(".")).join(&manifest.payload);
    let bytes = read(&pp)?;
    let count: usize = manifest.shape.iter().product();
    if bytes.len() != count * 4 {
        return Err(DataError::Truncated {
            path: pp.display().to_string(),
            expected: count * 4,
            found: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let samples = Tensor::new(manifest.shape, data)?;
    Dataset::new(samples, manifest.labels, manifest.num_classes, manifest.split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut b = IDX_IMAGES.to_be_bytes().to_vec();
        for d in [n, h, w] {
            b.extend(d.to_be_bytes());
        }
        b.extend((0..(n * h * w) as usize).map(fill));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = IDX_LABELS.to_be_bytes().to_vec();
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    #[test]
    fn idx_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, idx_images(4, 28, 28, |i| (i % 256) as u8)).unwrap();
        fs::write(&lp, idx_labels(&[3, 1, 4, 1])).unwrap();
        let ds = load_idx::<f32>(&ip, &lp, 10, Split::Train).unwrap();
        assert_eq!(ds.samples().shape(), &[4, 1, 28, 28]);
        assert_eq!(ds.labels(), &[3, 1, 4, 1]);
        ds.check_unit_range().unwrap();
        assert_eq!(ds.samples().data()[255], 1.0);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let mut imgs = idx_images(2, 2, 2, |_| 9);
        fs::write(&lp, idx_labels(&[0, 1])).unwrap();

        fs::write(&ip, &imgs[..imgs.len() - 1]).unwrap();
        assert!(matches!(load_idx::<f32>(&ip, &lp, 10, Split::Test), Err(DataError::Truncated { .. })));

        imgs[3] = 0x01;
        fs::write(&ip, &imgs).unwrap();
        assert!(matches!(load_idx::<f32>(&ip, &lp, 10, Split::Test), Err(DataError::BadMagic { .. })));

        fs::write(&ip, idx_images(2, 2, 2, |_| 9)).unwrap();
        fs::write(&lp, idx_labels(&[0, 12])).unwrap();
        assert!(matches!(
            load_idx::<f32>(&ip, &lp, 10, Split::Test),
            Err(DataError::LabelRange { index: 1, label: 12, .. })
        ));
    }

    #[test]
    fn cifar_row_of_255_is_all_ones() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let mut row = vec![3u8];
        row.extend(std::iter::repeat(255u8).take(CIFAR_PIXELS));
        fs::write(&p, &row).unwrap();
        let ds = load_cifar_binary::<f32>(&[p.clone()], 1, 0, 10, Split::Train).unwrap();
        assert_eq!(ds.labels(), &[3]);
        assert!(ds.samples().data().iter().all(|&v| v == 1.0));
        fs::write(&p, &row[..100]).unwrap();
        assert!(matches!(
            load_cifar_binary::<f32>(&[p], 1, 0, 10, Split::Train),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = Tensor::from_f64(vec![3, 2], &[0.5, -1.25, 3.0, 0.0, 7.5, 2.0]).unwrap();
        let ds = Dataset::<f32>::new(s, vec![0, 1, 1], 2, Split::Test).unwrap();
        let mp = save_dataset(&ds, dir.path(), "toy").unwrap();
        let back = load_dataset::<f32>(&mp).unwrap();
        assert_eq!(back, ds);
    }
}
