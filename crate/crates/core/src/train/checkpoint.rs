//! Binary checkpoints: magic, version, a JSON header describing the model,
//! then every parameter tensor as little-endian `f64`.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::hypergen::{Hypernet, HypernetSpec};
use crate::init::InitScheme;
use crate::mainnet::{MainnetParams, MainnetSpec};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HYPINIT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: usize,
    pub scheme: Option<InitScheme>,
    pub rng: Option<RngState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    mainnet: MainnetSpec,
    hypernet: Option<HypernetSpec>,
    step: usize,
    scheme: Option<InitScheme>,
    rng: Option<RngState>,
    shapes: Vec<Vec<usize>>,
}

fn tensors(model: &Model) -> Vec<&Tensor> {
    match model {
        Model::Classical { params, .. } => params.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect(),
        Model::Hyper(hn) => hn.params_with(true),
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let ts = tensors(&ckpt.model);
    let header = Header {
        version: CHECKPOINT_VERSION,
        mainnet: ckpt.model.mainnet().clone(),
        hypernet: match &ckpt.model {
            Model::Hyper(hn) => Some(hn.spec.clone()),
            Model::Classical { .. } => None,
        },
        step: ckpt.step,
        scheme: ckpt.scheme,
        rng: ckpt.rng,
        shapes: ts.iter().map(|t| t.shape().to_vec()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for t in ts {
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let mut offset = 0u64;
    let mut read = |buf: &mut [u8], what: &str| -> Result<()> {
        r.read_exact(buf)
            .map_err(|_| Error::format(path, offset, format!("truncated {what}")))?;
        offset += buf.len() as u64;
        Ok(())
    };
    let mut magic = [0u8; 8];
    read(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(path, 0, "not a checkpoint"));
    }
    let mut word = [0u8; 4];
    read(&mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, 8, format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    read(&mut len, "header length")?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    read(&mut json, "header")?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::format(path, 20, format!("bad header: {e}")))?;

    let mut model = match &header.hypernet {
        Some(hspec) => Model::Hyper(Hypernet::build(hspec, &header.mainnet)?),
        None => Model::Classical {
            spec: header.mainnet.clone(),
            params: MainnetParams::zeros(&header.mainnet)?,
        },
    };
    let mut slots: Vec<&mut Tensor> = match &mut model {
        Model::Classical { params, .. } => params.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect(),
        Model::Hyper(hn) => hn.params_mut_with(true),
    };
    let shapes_match = slots.len() == header.shapes.len() && slots.iter().zip(&header.shapes).all(|(t, s)| t.shape() == s.as_slice());
    if !shapes_match {
        return Err(Error::format(path, 20, "tensor shapes disagree with the described model"));
    }
    let mut buf = [0u8; 8];
    for t in slots.iter_mut() {
        for v in t.data_mut() {
            read(&mut buf, "tensor data")?;
            *v = f64::from_le_bytes(buf);
        }
    }
    Ok(Checkpoint {
        model,
        step: header.step,
        scheme: header.scheme,
        rng: header.rng,
    })
}
