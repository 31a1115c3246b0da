use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{DataSplits, Dataset, Split};
use crate::error::{Error, Result};
use crate::mainnet::Targets;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Reads a whole file, transparently inflating gzip.
pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, 0, format!("bad gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub(crate) fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::format(path, bytes.len() as u64, "truncated header"))
    };
    let magic = word(0)?;
    if magic != IDX_IMAGES_MAGIC && magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x} or {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let dims: Vec<usize> = (0..rank).map(|i| word(4 + 4 * i).map(|d| d as usize)).collect::<Result<_>>()?;
    let start = 4 + 4 * rank;
    let need: usize = dims.iter().product();
    let have = bytes.len() - start;
    if have < need {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated data: header promises {need} bytes, found {have}"),
        ));
    }
    if have > need {
        return Err(Error::format(path, (start + need) as u64, format!("{} trailing bytes", have - need)));
    }
    Ok(IdxArray {
        magic,
        dims,
        data: bytes[start..].to_vec(),
    })
}

/// Parses one IDX file (optionally gzipped).
pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&read_bytes(path)?, path)
}

/// Pairs an image file with a label file. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let im = read_idx(images)?;
    if im.magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(images, 0, "expected an image file"));
    }
    let lb = read_idx(labels)?;
    if lb.magic != IDX_LABELS_MAGIC {
        return Err(Error::format(labels, 0, "expected a label file"));
    }
    if im.dims[0] != lb.dims[0] {
        return Err(Error::format(
            labels,
            4,
            format!("{} labels for {} images", lb.dims[0], im.dims[0]),
        ));
    }
    if let Some(at) = lb.data.iter().position(|&l| l > 9) {
        return Err(Error::format(labels, 8 + at as u64, format!("label {} out of range", lb.data[at])));
    }
    let mut shape = vec![im.dims[0]];
    shape.extend_from_slice(&im.dims[1..]);
    let pixels = im.data.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(
        Tensor::new(shape, pixels)?,
        Targets::Classes(lb.data.iter().map(|&l| l as usize).collect()),
        split,
    )
}

fn find(dir: &Path, stem: &str) -> Result<std::path::PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
    ))
}

/// Loads the standard four MNIST files from `dir`, gzipped or not.
pub fn load_mnist_dir(dir: &Path) -> Result<DataSplits> {
    Ok(DataSplits {
        train: load_idx(
            &find(dir, "train-images-idx3-ubyte")?,
            &find(dir, "train-labels-idx1-ubyte")?,
            Split::Train,
        )?,
        test: load_idx(
            &find(dir, "t10k-images-idx3-ubyte")?,
            &find(dir, "t10k-labels-idx1-ubyte")?,
            Split::Test,
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    pub(crate) fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn two_image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<u8> = (0..8).map(|i| (i * 30) as u8).collect();
        let im = write(dir.path(), "im", &idx_bytes(IDX_IMAGES_MAGIC, &[2, 2, 2], &px));
        let lb = write(dir.path(), "lb", &idx_bytes(IDX_LABELS_MAGIC, &[2], &[7, 3]));
        let ds = load_idx(&im, &lb, Split::Train).unwrap();
        assert_eq!(ds.inputs.shape(), &[2, 2, 2]);
        for (v, b) in ds.inputs.data().iter().zip(&px) {
            assert_eq!(*v, *b as f64 / 255.0);
        }
        assert_eq!(ds.labels, Targets::Classes(vec![7, 3]));
    }

    #[test]
    fn gzip_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let raw = idx_bytes(IDX_LABELS_MAGIC, &[3], &[1, 2, 3]);
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&raw).unwrap();
        let p = write(dir.path(), "lb.gz", &enc.finish().unwrap());
        assert_eq!(read_idx(&p).unwrap().data, vec![1, 2, 3]);
    }

    #[test]
    fn format_errors_carry_offsets() {
        let p = Path::new("fixture");
        let bad = parse_idx(&idx_bytes(0x0000_0804, &[1], &[0]), p).unwrap_err();
        assert!(matches!(bad, Error::Format { offset: 0, .. }), "{bad}");
        let short = parse_idx(&idx_bytes(IDX_IMAGES_MAGIC, &[2, 2, 2], &[0; 5]), p).unwrap_err();
        assert!(matches!(short, Error::Format { offset: 21, .. }), "{short}");
        let header = parse_idx(&IDX_IMAGES_MAGIC.to_be_bytes()[..], p).unwrap_err();
        assert!(matches!(header, Error::Format { .. }));
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let im = write(dir.path(), "im", &idx_bytes(IDX_IMAGES_MAGIC, &[2, 1, 1], &[0, 0]));
        let lb = write(dir.path(), "lb", &idx_bytes(IDX_LABELS_MAGIC, &[3], &[0, 0, 0]));
        assert!(matches!(load_idx(&im, &lb, Split::Train), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io() {
        let e = load_mnist_dir(Path::new("/nonexistent")).unwrap_err();
        assert!(e.is_io());
    }
}
