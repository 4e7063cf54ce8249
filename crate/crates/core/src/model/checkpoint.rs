//! Binary checkpoint container.
//!
//! Layout: `IKTN` magic, `u32` format version, `u64` header length, the
//! JSON header, then every tensor as little-endian `f32`, at the byte
//! offsets listed in the header manifest (relative to the payload start).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::data::{DoubleEmbeddings, EmbeddingTable, TagSchemes};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IKTN";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub schemes: TagSchemes,
    pub general_vocab: Vec<String>,
    pub domain_vocab: Vec<String>,
    /// Trainable tensors.
    pub tensors: Vec<ManifestEntry>,
    /// Frozen embedding matrices (`general`, `domain`), unk and pad rows included.
    pub embeddings: Vec<ManifestEntry>,
}

const EMBEDDING_GENERAL: &str = "embedding.general";
const EMBEDDING_DOMAIN: &str = "embedding.domain";

fn push_tensor(payload: &mut Vec<u8>, entries: &mut Vec<ManifestEntry>, name: &str, shape: &[usize], data: &[f32]) {
    entries.push(ManifestEntry {
        name: name.to_string(),
        shape: shape.to_vec(),
        offset: payload.len() as u64,
    });
    for x in data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_tensor(payload: &[u8], entry: &ManifestEntry) -> Result<Vec<f32>> {
    let numel: usize = entry.shape.iter().product();
    let start = usize::try_from(entry.offset).map_err(|_| Error::Checkpoint("offset overflow".into()))?;
    let end = start
        .checked_add(numel * 4)
        .filter(|&e| e <= payload.len())
        .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the end of the payload", entry.name)))?;
    Ok(payload[start..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

impl Model {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.params.iter() {
            push_tensor(&mut payload, &mut tensors, name, t.shape(), t.data());
        }
        let mut embeddings = Vec::new();
        for (name, table) in [(EMBEDDING_GENERAL, &self.embeddings.general), (EMBEDDING_DOMAIN, &self.embeddings.domain)] {
            push_tensor(&mut payload, &mut embeddings, name, &[table.rows(), table.dim()], table.matrix());
        }
        let header = CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            schemes: self.schemes.clone(),
            general_vocab: self.embeddings.general.words().to_vec(),
            domain_vocab: self.embeddings.domain.words().to_vec(),
            tensors,
            embeddings,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let (header, payload) = split(bytes)?;
        let mut params = ParamStore::new();
        for e in &header.tensors {
            params.insert(e.name.clone(), Tensor::new(&e.shape, read_tensor(payload, e)?)?);
        }
        let table = |name: &str, words: &[String]| -> Result<EmbeddingTable> {
            let e = header
                .embeddings
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))?;
            let data = read_tensor(payload, e)?;
            if e.shape.len() != 2 || e.shape[0] != words.len() + 2 {
                return Err(Error::Checkpoint(format!("`{name}` does not match its vocabulary")));
            }
            let dim = e.shape[1];
            let n = words.len() * dim;
            EmbeddingTable::from_rows(words.to_vec(), dim, data[..n].to_vec(), data[n..n + dim].to_vec())?
                .with_matrix(data)
        };
        let embeddings = DoubleEmbeddings {
            general: table(EMBEDDING_GENERAL, &header.general_vocab)?,
            domain: table(EMBEDDING_DOMAIN, &header.domain_vocab)?,
        };
        Model::from_parts(header.config, header.schemes, embeddings, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes)
    }
}

fn split(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version}, this build reads {CHECKPOINT_FORMAT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if len > body.len() {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != version {
        return Err(Error::Checkpoint("header and container versions disagree".into()));
    }
    Ok((header, &body[len..]))
}

/// Reads only the header, for manifest inspection.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split(&bytes)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_model;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = tiny_model();
        let bytes = m.to_bytes().unwrap();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.embeddings, m.embeddings);
        assert_eq!(back.config, m.config);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = tiny_model().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::from_bytes(&bad), Err(Error::Checkpoint(_))));
        bytes[4] = 99;
        let err = Model::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }

    #[test]
    fn rejects_truncated_payload() {
        let bytes = tiny_model().to_bytes().unwrap();
        assert!(matches!(Model::from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Checkpoint(_))));
    }
}
