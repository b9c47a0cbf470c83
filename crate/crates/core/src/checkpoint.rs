//! Single-file checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LMG2" | version: u32 | header_len: u64 | header (JSON) | payload | sha256 (32 bytes)
//! ```
//!
//! The header carries the model config, vocabulary layout, codebook patch size and a
//! directory of named tensors with dtype, shape and byte range inside the payload. The
//! trailing digest covers every byte before it. Loading checks, in order: magic, version,
//! header bounds, header syntax, tensor ranges, digest, then tensor shapes.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::imgcodec::Codebook;
use crate::model::{Linear, Matrix, ModelConfig, Parameters, TensorMut, TensorRef};
use crate::quant::{groups_per_row, QuantizedTensor, DTYPE_TAG};
use crate::vocab::Vocabulary;

pub const MAGIC: [u8; 4] = *b"LMG2";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREAMBLE: usize = 4 + 4 + 8;

/// Everything a generation run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub vocab: Vocabulary,
    pub codebook: Codebook,
}

impl Checkpoint {
    pub fn new(params: Parameters, vocab: Vocabulary, codebook: Codebook) -> Result<Self> {
        if vocab.total_size() != params.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} ids but the model expects {}",
                vocab.total_size(),
                params.config.vocab_size
            )));
        }
        if codebook.len() != vocab.codebook_size() {
            return Err(Error::Config(format!(
                "codebook has {} entries but the vocabulary expects {}",
                codebook.len(),
                vocab.codebook_size()
            )));
        }
        Ok(Checkpoint {
            params,
            vocab,
            codebook,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_dtype: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    vocab: Vocabulary,
    codebook_patch_size: usize,
    tensors: Vec<TensorEntry>,
}

fn push_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f32s(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn entry(name: &str, dtype: &str, shape: Vec<usize>, payload: &mut Vec<u8>, bytes: &[u8]) -> TensorEntry {
    let offset = payload.len() as u64;
    payload.extend_from_slice(bytes);
    TensorEntry {
        name: name.into(),
        dtype: dtype.into(),
        shape,
        offset,
        length: bytes.len() as u64,
        source_dtype: None,
    }
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    let mut b = Vec::with_capacity(v.len() * 4);
    push_f32s(&mut b, v);
    b
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in ck.params.tensors() {
        tensors.push(match t {
            TensorRef::Vector(v) => entry(&name, "f32", vec![v.len()], &mut payload, &f32_bytes(v)),
            TensorRef::Matrix(m) | TensorRef::Linear(Linear::Dense(m)) => entry(
                &name,
                "f32",
                vec![m.rows, m.cols],
                &mut payload,
                &f32_bytes(&m.data),
            ),
            TensorRef::Linear(Linear::Q4(q)) => {
                let mut b = q.packed.clone();
                push_f32s(&mut b, &q.scales);
                push_f32s(&mut b, &q.offsets);
                let mut e = entry(&name, DTYPE_TAG, vec![q.rows, q.cols], &mut payload, &b);
                e.source_dtype = Some(q.source_dtype.clone());
                e
            }
        });
    }
    let cb = &ck.codebook;
    tensors.push(entry(
        "codebook",
        "f32",
        vec![cb.len(), cb.dim()],
        &mut payload,
        &f32_bytes(&cb.entries),
    ));
    let header = Header {
        config: ck.params.config.clone(),
        vocab: ck.vocab.clone(),
        codebook_patch_size: cb.patch_size,
        tensors,
    };
    let hjson = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE + hjson.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&hjson);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes atomically: a temporary file in the target directory renamed into place.
pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ck)?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

fn bounds(msg: impl Into<String>) -> Error {
    CheckpointError::Bounds(msg.into()).into()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 {
        return Err(bounds("file shorter than the magic bytes"));
    }
    if bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(CheckpointError::BadMagic { found }.into());
    }
    if bytes.len() < PREAMBLE {
        return Err(bounds("file shorter than its preamble"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body_end = bytes
        .len()
        .checked_sub(DIGEST_LEN)
        .ok_or_else(|| bounds("file shorter than its digest"))?;
    let hend = (PREAMBLE as u64)
        .checked_add(hlen)
        .filter(|&e| e <= body_end as u64)
        .ok_or_else(|| bounds(format!("header of {hlen} bytes runs past the payload")))?
        as usize;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..hend])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[hend..body_end];

    let mut ranges: Vec<(u64, u64, &str)> = Vec::new();
    for t in &header.tensors {
        let end = t
            .offset
            .checked_add(t.length)
            .filter(|&e| e <= payload.len() as u64)
            .ok_or_else(|| bounds(format!("tensor {} lies outside the payload", t.name)))?;
        ranges.push((t.offset, end, &t.name));
    }
    ranges.sort();
    for w in ranges.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(bounds(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
        }
    }
    if Sha256::digest(&bytes[..body_end])[..] != bytes[body_end..] {
        return Err(CheckpointError::Checksum.into());
    }

    let mut by_name: HashMap<&str, &TensorEntry> = HashMap::new();
    for t in &header.tensors {
        if by_name.insert(&t.name, t).is_some() {
            return Err(CheckpointError::Header(format!("tensor {} listed twice", t.name)).into());
        }
    }
    let data = |t: &TensorEntry| &payload[t.offset as usize..(t.offset + t.length) as usize];
    let take = |name: &str| -> Result<&TensorEntry> {
        by_name
            .get(name)
            .copied()
            .ok_or_else(|| CheckpointError::Header(format!("missing tensor {name}")).into())
    };
    let shape_err = |name: &str, expected: Vec<usize>, found: &[usize]| -> Error {
        CheckpointError::Shape {
            name: name.into(),
            expected,
            found: found.to_vec(),
        }
        .into()
    };
    let f32_tensor = |t: &TensorEntry, shape: Vec<usize>| -> Result<Vec<f32>> {
        if t.dtype != "f32" || t.shape != shape {
            return Err(shape_err(&t.name, shape, &t.shape));
        }
        let n: usize = shape.iter().product();
        if t.length as usize != 4 * n {
            return Err(bounds(format!("tensor {} has {} bytes for {n} values", t.name, t.length)));
        }
        Ok(read_f32s(data(t)))
    };

    let mut params = Parameters::zeros(&header.config)?;
    let expected: usize = params.tensors().len() + 1;
    if header.tensors.len() != expected {
        return Err(CheckpointError::Header(format!(
            "{} tensors listed, {expected} expected",
            header.tensors.len()
        ))
        .into());
    }
    for (name, slot) in params.tensors_mut() {
        let t = take(&name)?;
        match slot {
            TensorMut::Vector(v) => *v = f32_tensor(t, vec![v.len()])?,
            TensorMut::Matrix(m) => m.data = f32_tensor(t, vec![m.rows, m.cols])?,
            TensorMut::Linear(l) => {
                let (rows, cols) = (l.rows(), l.cols());
                if t.dtype == DTYPE_TAG {
                    if t.shape != [rows, cols] {
                        return Err(shape_err(&name, vec![rows, cols], &t.shape));
                    }
                    let packed = (rows * cols).div_ceil(2);
                    let groups = rows * groups_per_row(cols);
                    if t.length as usize != packed + 8 * groups {
                        return Err(bounds(format!("tensor {name} has a bad quantized length")));
                    }
                    let b = data(t);
                    *l = Linear::Q4(QuantizedTensor {
                        rows,
                        cols,
                        packed: b[..packed].to_vec(),
                        scales: read_f32s(&b[packed..packed + 4 * groups]),
                        offsets: read_f32s(&b[packed + 4 * groups..]),
                        source_dtype: t.source_dtype.clone().unwrap_or_else(|| "f32".into()),
                    });
                } else {
                    *l = Linear::Dense(Matrix::from_vec(rows, cols, f32_tensor(t, vec![rows, cols])?));
                }
            }
        }
    }
    let cbt = take("codebook")?;
    let dim = header.codebook_patch_size * header.codebook_patch_size * 3;
    let entries = f32_tensor(cbt, vec![header.vocab.codebook_size(), dim])?;
    let codebook = Codebook::new(header.codebook_patch_size, entries)?;
    Checkpoint::new(params, header.vocab, codebook)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::quant::{quantize_params, QuantPolicy};

    fn tiny_ck() -> Checkpoint {
        let cfg = ModelConfig::preset("tiny").unwrap();
        Checkpoint::new(
            init_params(&cfg, 1).unwrap(),
            Vocabulary::new(1024).unwrap(),
            Codebook::random(1024, 2, 1),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_bitwise() {
        let ck = tiny_ck();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&p, &ck).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), ck);
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(names.len(), 1, "no temporary files left behind");
    }

    #[test]
    fn quantized_round_trip() {
        let mut ck = tiny_ck();
        ck.params = quantize_params(&ck.params, QuantPolicy::default()).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn distinct_failures() {
        let bytes = encode_checkpoint(&tiny_ck()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(CheckpointError::BadMagic { .. }))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(CheckpointError::Version { found: 9, .. }))));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 100] ^= 1;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(CheckpointError::Checksum))));
        assert!(matches!(decode_checkpoint(&bytes[..200]), Err(Error::Checkpoint(CheckpointError::Bounds(_)))));
    }
}
