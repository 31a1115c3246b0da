use std::path::Path;

use super::idx::read_bytes;
use super::{DataSplits, Dataset, Split};
use crate::error::{Error, Result};
use crate::mainnet::Targets;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One label byte plus a 3×32×32 image.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn parse(bytes: &[u8], path: &Path, split: Split) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::format(
            path,
            whole as u64,
            format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format(path, (i * CIFAR_RECORD) as u64, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, Targets::Classes(labels), split)
}

/// Reads one CIFAR-10 binary batch as NCHW images in `[0, 1]`.
pub fn load_cifar10_binary(path: &Path, split: Split) -> Result<Dataset> {
    parse(&read_bytes(path)?, path, split)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`, or from
/// its `cifar-10-batches-bin` subdirectory.
pub fn load_cifar10_dir(dir: &Path) -> Result<DataSplits> {
    let nested = dir.join("cifar-10-batches-bin");
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let mut bytes = Vec::new();
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        bytes.extend(read_bytes(&p)?);
    }
    let train = parse(&bytes, &dir.join("data_batch_*.bin"), Split::Train)?;
    let test = load_cifar10_binary(&dir.join("test_batch.bin"), Split::Test)?;
    Ok(DataSplits { train, test })
}

/// A CIFAR-shaped classification problem for machines without the real
/// files: each class is a smooth colored pattern, samples add a random
/// shift, contrast jitter and pixel noise. Values lie in `[0, 1]`.
pub fn synthetic_cifar(train: usize, test: usize, size: usize, seed: u64) -> Result<DataSplits> {
    if size == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    let mut rng = Rng::with_stream(seed, 0xc1fa);
    let classes = 10;
    // Per class and channel: two spatial frequencies and a phase.
    let protos: Vec<[(f64, f64, f64); 3]> = (0..classes)
        .map(|_| {
            let mut p = [(0.0, 0.0, 0.0); 3];
            for c in &mut p {
                *c = (
                    1.0 + 3.0 * rng.uniform(),
                    1.0 + 3.0 * rng.uniform(),
                    std::f64::consts::TAU * rng.uniform(),
                );
            }
            p
        })
        .collect();
    let make = |n: usize, split: Split, rng: &mut Rng| -> Result<Dataset> {
        let mut px = Vec::with_capacity(n * 3 * size * size);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = rng.below(classes);
            labels.push(k);
            let (dx, dy) = (rng.uniform(), rng.uniform());
            let contrast = 0.2 + 0.15 * rng.uniform();
            for &(fx, fy, ph) in &protos[k] {
                for i in 0..size {
                    for j in 0..size {
                        let u = (i as f64 / size as f64 + dy) * std::f64::consts::TAU;
                        let v = (j as f64 / size as f64 + dx) * std::f64::consts::TAU;
                        let s = (fx * v + ph).sin() * (fy * u).cos();
                        let val = 0.5 + contrast * s + 0.1 * rng.normal();
                        px.push(val.clamp(0.0, 1.0));
                    }
                }
            }
        }
        Dataset::new(Tensor::new(vec![n, 3, size, size], px)?, Targets::Classes(labels), split)
    };
    let train = make(train, Split::Train, &mut rng)?;
    let test = make(test, Split::Test, &mut rng)?;
    Ok(DataSplits { train, test })
}
