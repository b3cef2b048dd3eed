//! Model checkpoint file format.
//!
//! Layout: 4-byte magic `MLMC`, u32 LE format version, u32 LE header
//! length, a JSON header (shape, mode, vocabulary symbols, adapter
//! metadata), then every tensor as little-endian float64 in a fixed
//! order: embedding, w1, b1, w2, b2, and for adapted models l1, r1,
//! l2, r2. Loading converts into the working scalar type.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{LanguageModel, LoraDelta, Mode, Weights};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"MLMC";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    context_len: usize,
    embed_dim: usize,
    hidden_dim: usize,
    mode: Mode,
    /// Non-reserved vocabulary symbols in id order.
    symbols: String,
    lora: Option<LoraHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LoraHeader {
    rank: usize,
    scale: f64,
}

pub fn save<S: Scalar>(path: &Path, model: &LanguageModel<S>) -> Result<()> {
    let header = Header {
        context_len: model.context_len,
        embed_dim: model.embed_dim,
        hidden_dim: model.hidden_dim,
        mode: model.mode,
        symbols: model.vocab.stored_symbols().iter().collect(),
        lora: model.delta.as_ref().map(|d| LoraHeader { rank: d.rank, scale: d.scale }),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    out.write_all(&header_bytes)?;

    let mut write_slice = |sl: &[S]| -> Result<()> {
        for &x in sl {
            let v = x.to_f64().ok_or_else(|| {
                Error::Format("weight not representable as f64".into())
            })?;
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    let w = &model.weights;
    write_slice(w.embedding.as_slice())?;
    write_slice(w.w1.as_slice())?;
    write_slice(&w.b1)?;
    write_slice(w.w2.as_slice())?;
    write_slice(&w.b2)?;
    if let Some(d) = &model.delta {
        write_slice(d.l1.as_slice())?;
        write_slice(d.r1.as_slice())?;
        write_slice(d.l2.as_slice())?;
        write_slice(d.r2.as_slice())?;
    }
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<LanguageModel<S>> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{}: missing magic", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: not a model checkpoint", path.display())));
    }
    let version = read_u32(&mut input, path)?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: checkpoint format version {version} unsupported (expected {})",
            path.display(),
            CHECKPOINT_FORMAT_VERSION
        )));
    }
    let header_len = read_u32(&mut input, path)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    input
        .read_exact(&mut header_bytes)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let symbols: Vec<char> = header.symbols.chars().collect();
    let vocab = Vocabulary::from_symbols(&symbols);
    let v = vocab.len();
    let kd = header.context_len * header.embed_dim;
    let h = header.hidden_dim;

    let mut read_mat = |rows: usize, cols: usize| -> Result<Mat<S>> {
        let mut m = Mat::zeros(rows, cols);
        for x in m.as_mut_slice() {
            let mut buf = [0u8; 8];
            input
                .read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("{}: truncated tensor data", path.display())))?;
            let value = f64::from_le_bytes(buf);
            *x = S::from(value)
                .ok_or_else(|| Error::Format("weight not representable in scalar type".into()))?;
        }
        Ok(m)
    };

    let embedding = read_mat(v, header.embed_dim)?;
    let w1 = read_mat(kd, h)?;
    let b1 = read_mat(1, h)?.as_slice().to_vec();
    let w2 = read_mat(h, v)?;
    let b2 = read_mat(1, v)?.as_slice().to_vec();
    let delta = match &header.lora {
        None => None,
        Some(lh) => Some(LoraDelta {
            l1: read_mat(kd, lh.rank)?,
            r1: read_mat(lh.rank, h)?,
            l2: read_mat(h, lh.rank)?,
            r2: read_mat(lh.rank, v)?,
            rank: lh.rank,
            scale: lh.scale,
        }),
    };

    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Format(format!("{}: trailing bytes after tensors", path.display())));
    }

    Ok(LanguageModel {
        vocab,
        context_len: header.context_len,
        embed_dim: header.embed_dim,
        hidden_dim: header.hidden_dim,
        weights: Weights { embedding, w1, b1, w2, b2 },
        delta,
        mode: header.mode,
    })
}

fn read_u32(input: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    input
        .read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("{}: truncated field", path.display())))?;
    Ok(u32::from_le_bytes(buf))
}
