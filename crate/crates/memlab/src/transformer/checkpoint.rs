//! Binary model checkpoints: magic + version, a JSON header carrying the
//! config and the vocabulary the model was trained against, a JSON manifest
//! of tensor names/shapes/byte offsets, then little-endian f64 blobs in
//! declared parameter order.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tokenizer::Vocab;
use crate::transformer::{TransformerConfig, TransformerModel};

const MAGIC: &[u8; 8] = b"MEMLABCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum CheckpointError {
    Io { path: String, msg: String },
    Format { msg: String },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io { path, msg } => write!(f, "{path}: {msg}"),
            CheckpointError::Format { msg } => write!(f, "bad checkpoint: {msg}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TransformerConfig,
    vocab_chars: Vec<char>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of this tensor's blob, relative to the blob section.
    offset: u64,
}

/// Serializes the model and its vocabulary to `path`. Byte output is a pure
/// function of the model parameters, config, and vocab.
pub fn save_checkpoint(
    model: &TransformerModel,
    vocab: &Vocab,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(model, vocab)?;
    fs::write(path, bytes).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn checkpoint_bytes(
    model: &TransformerModel,
    vocab: &Vocab,
) -> Result<Vec<u8>, CheckpointError> {
    let header = Header {
        config: model.config.clone(),
        vocab_chars: vocab.chars().to_vec(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::Format { msg: e.to_string() })?;

    let mut manifest = Vec::new();
    let mut offset = 0u64;
    for (name, tensor) in model.named_params() {
        manifest.push(ManifestEntry {
            name,
            shape: tensor.shape.clone(),
            offset,
        });
        offset += (tensor.numel() * 8) as u64;
    }
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| CheckpointError::Format { msg: e.to_string() })?;

    let mut out = Vec::with_capacity(
        MAGIC.len() + 4 + 16 + header_json.len() + manifest_json.len() + offset as usize,
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    for (_, tensor) in model.named_params() {
        for v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TransformerModel, Vocab), CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(TransformerModel, Vocab), CheckpointError> {
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *cursor + n > bytes.len() {
            return Err(CheckpointError::Format { msg: "truncated file".to_string() });
        }
        let slice = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(slice)
    };

    if take(&mut cursor, 8)? != MAGIC {
        return Err(CheckpointError::Format { msg: "bad magic".to_string() });
    }
    let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Format {
            msg: format!("unsupported version {version}"),
        });
    }
    let header_len = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(&mut cursor, header_len)?)
        .map_err(|e| CheckpointError::Format { msg: e.to_string() })?;
    let manifest_len =
        u64::from_le_bytes(take(&mut cursor, 8)?.try_into().expect("8 bytes")) as usize;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(take(&mut cursor, manifest_len)?)
        .map_err(|e| CheckpointError::Format { msg: e.to_string() })?;

    let vocab = Vocab::from_sorted_chars(header.vocab_chars)
        .map_err(|e| CheckpointError::Format { msg: e.to_string() })?;
    let mut model = TransformerModel::init(header.config)
        .map_err(|e| CheckpointError::Format { msg: e.to_string() })?;

    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape.clone()))
        .collect();
    if manifest.len() != expected.len() {
        return Err(CheckpointError::Format {
            msg: format!(
                "manifest lists {} tensors, config implies {}",
                manifest.len(),
                expected.len()
            ),
        });
    }
    let blob_start = cursor;
    for (entry, (name, shape)) in manifest.iter().zip(expected.iter()) {
        if &entry.name != name || &entry.shape != shape {
            return Err(CheckpointError::Format {
                msg: format!(
                    "manifest entry {:?} {:?} does not match expected {:?} {:?}",
                    entry.name, entry.shape, name, shape
                ),
            });
        }
    }
    for (entry, param) in manifest.iter().zip(model.params_mut()) {
        let count = param.numel();
        let start = blob_start + entry.offset as usize;
        let end = start + count * 8;
        if end > bytes.len() {
            return Err(CheckpointError::Format {
                msg: format!("blob for {:?} extends past end of file", entry.name),
            });
        }
        for (dst, chunk) in param.data.iter_mut().zip(bytes[start..end].chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        if !param.data.iter().all(|v| v.is_finite()) {
            return Err(CheckpointError::Format {
                msg: format!("non-finite value in tensor {:?}", entry.name),
            });
        }
    }
    Ok((model, vocab))
}
