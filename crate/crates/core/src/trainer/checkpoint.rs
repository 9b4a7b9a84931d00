//! Checkpoint persistence.
//!
//! Layout: magic `BEFC`, u8 version, u32 LE header length, UTF-8 JSON header
//! (config echo, epoch, rng cursor, tensor directory with name/shape/offset),
//! then raw little-endian f64 payloads. Offsets are byte positions relative
//! to the payload start. Round trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterKind, BefaParams, LoraParams, PromptParams};
use crate::numkit::{DenseMatrix, DenseVector};
use crate::recmodel::{EmbeddingTable, ModalityBranch, ModelState};
use crate::{Error, Result};

use super::TrainConfig;

const MAGIC: &[u8; 4] = b"BEFC";
const VERSION: u8 = 1;

/// Positions of the training rng streams, enough to resume a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngCursor {
    pub seed: u64,
    pub shuffle_pos: u128,
    pub negatives_pos: u128,
    pub dropout_pos: u128,
}

/// One named tensor: shape is `[rows, cols]` for matrices, `[len]` for
/// vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    fn matrix(name: String, m: &DenseMatrix) -> Self {
        Self {
            name,
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    fn vector(name: String, v: &DenseVector) -> Self {
        Self {
            name,
            shape: vec![v.len()],
            data: v.as_slice().to_vec(),
        }
    }

    fn to_matrix(&self) -> Result<DenseMatrix> {
        if self.shape.len() != 2 {
            return Err(Error::CheckpointMismatch(format!(
                "tensor `{}` is not a matrix",
                self.name
            )));
        }
        DenseMatrix::from_data(self.shape[0], self.shape[1], self.data.clone())
    }

    fn to_vector(&self) -> Result<DenseVector> {
        if self.shape.len() != 1 {
            return Err(Error::CheckpointMismatch(format!(
                "tensor `{}` is not a vector",
                self.name
            )));
        }
        Ok(DenseVector::from_vec(self.data.clone()))
    }
}

/// A trained model frozen to named tensors plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub rng: RngCursor,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(
        state: &ModelState,
        config: &TrainConfig,
        epoch: usize,
        rng: RngCursor,
    ) -> Self {
        let mut tensors = vec![
            NamedTensor::matrix("user_emb".into(), &state.embeddings.user),
            NamedTensor::matrix("item_emb".into(), &state.embeddings.item),
        ];
        for branch in &state.branches {
            let m = &branch.modality;
            tensors.push(NamedTensor::matrix(format!("fusion.{m}"), &branch.fusion));
            match &branch.adapter {
                Adapter::None => {}
                Adapter::Befa(p) => {
                    tensors.push(NamedTensor::matrix(format!("befa.{m}.w1"), &p.w1));
                    tensors.push(NamedTensor::vector(format!("befa.{m}.b1"), &p.b1));
                    tensors.push(NamedTensor::matrix(format!("befa.{m}.w2"), &p.w2));
                    tensors.push(NamedTensor::vector(format!("befa.{m}.b2"), &p.b2));
                    tensors.push(NamedTensor::matrix(format!("befa.{m}.w3"), &p.w3));
                    tensors.push(NamedTensor::vector(format!("befa.{m}.b3"), &p.b3));
                    tensors.push(NamedTensor::matrix(format!("befa.{m}.p_gate"), &p.p_gate));
                    tensors.push(NamedTensor::matrix(format!("befa.{m}.p_merge"), &p.p_merge));
                }
                Adapter::Lora(p) => {
                    tensors.push(NamedTensor::matrix(format!("lora.{m}.a"), &p.a));
                    tensors.push(NamedTensor::matrix(format!("lora.{m}.b"), &p.b));
                }
                Adapter::Prompt(p) => {
                    tensors.push(NamedTensor::vector(format!("prompt.{m}.prompt"), &p.prompt));
                }
            }
        }
        Self {
            config: config.clone(),
            epoch,
            rng,
            tensors,
        }
    }

    fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor `{name}`")))
    }

    /// Modalities in branch order, recovered from the fusion tensor names.
    pub fn modalities(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter_map(|t| t.name.strip_prefix("fusion."))
            .map(str::to_string)
            .collect()
    }

    /// Refuse checkpoints trained with a different adapter than expected.
    pub fn ensure_adapter(&self, expected: AdapterKind) -> Result<()> {
        if self.config.adapter != expected {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint was trained with adapter `{}`, expected `{}`",
                self.config.adapter, expected
            )));
        }
        Ok(())
    }

    /// Rebuild the model this checkpoint froze.
    pub fn to_model(&self) -> Result<ModelState> {
        let embeddings = EmbeddingTable {
            user: self.tensor("user_emb")?.to_matrix()?,
            item: self.tensor("item_emb")?.to_matrix()?,
        };
        let mut branches = Vec::new();
        for m in self.modalities() {
            let fusion = self.tensor(&format!("fusion.{m}"))?.to_matrix()?;
            let adapter = match self.config.adapter {
                AdapterKind::None => Adapter::None,
                AdapterKind::Befa => Adapter::Befa(BefaParams {
                    w1: self.tensor(&format!("befa.{m}.w1"))?.to_matrix()?,
                    b1: self.tensor(&format!("befa.{m}.b1"))?.to_vector()?,
                    w2: self.tensor(&format!("befa.{m}.w2"))?.to_matrix()?,
                    b2: self.tensor(&format!("befa.{m}.b2"))?.to_vector()?,
                    w3: self.tensor(&format!("befa.{m}.w3"))?.to_matrix()?,
                    b3: self.tensor(&format!("befa.{m}.b3"))?.to_vector()?,
                    p_gate: self.tensor(&format!("befa.{m}.p_gate"))?.to_matrix()?,
                    p_merge: self.tensor(&format!("befa.{m}.p_merge"))?.to_matrix()?,
                    dropout: self.config.dropout,
                    identity_proj: self.config.identity_proj,
                }),
                AdapterKind::Lora => {
                    let a = self.tensor(&format!("lora.{m}.a"))?.to_matrix()?;
                    let b = self.tensor(&format!("lora.{m}.b"))?.to_matrix()?;
                    let rank = a.rows();
                    Adapter::Lora(LoraParams {
                        a,
                        b,
                        rank,
                        alpha: self.config.lora_alpha,
                    })
                }
                AdapterKind::Prompt => Adapter::Prompt(PromptParams {
                    prompt: self.tensor(&format!("prompt.{m}.prompt"))?.to_vector()?,
                }),
            };
            branches.push(ModalityBranch {
                modality: m,
                fusion,
                adapter,
            });
        }
        Ok(ModelState {
            embeddings,
            branches,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderRng {
    seed: u64,
    shuffle_pos: String,
    negatives_pos: String,
    dropout_pos: String,
}

#[derive(Serialize, Deserialize)]
struct HeaderTensor {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    rng: HeaderRng,
    tensors: Vec<HeaderTensor>,
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut offset = 0usize;
    let tensors: Vec<HeaderTensor> = checkpoint
        .tensors
        .iter()
        .map(|t| {
            let h = HeaderTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
            };
            offset += t.data.len() * 8;
            h
        })
        .collect();
    let header = Header {
        config: checkpoint.config.clone(),
        epoch: checkpoint.epoch,
        rng: HeaderRng {
            seed: checkpoint.rng.seed,
            shuffle_pos: checkpoint.rng.shuffle_pos.to_string(),
            negatives_pos: checkpoint.rng.negatives_pos.to_string(),
            dropout_pos: checkpoint.rng.dropout_pos.to_string(),
        },
        tensors,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;

    let mut bytes = Vec::with_capacity(9 + header_json.len() + offset);
    bytes.extend_from_slice(MAGIC);
    bytes.push(VERSION);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for t in &checkpoint.tensors {
        for &v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(p.clone(), e))?;
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(Error::format(p, "not a checkpoint file (bad magic)"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(
            p,
            format!("unsupported checkpoint version {}", bytes[4]),
        ));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if bytes.len() < 9 + header_len {
        return Err(Error::format(p, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[9..9 + header_len])
        .map_err(|e| Error::format(p.clone(), format!("bad header: {e}")))?;
    let payload = &bytes[9 + header_len..];

    let parse_pos = |s: &str, what: &str| -> Result<u128> {
        s.parse()
            .map_err(|_| Error::format(p.clone(), format!("bad rng position `{what}`")))
    };
    let rng = RngCursor {
        seed: header.rng.seed,
        shuffle_pos: parse_pos(&header.rng.shuffle_pos, "shuffle")?,
        negatives_pos: parse_pos(&header.rng.negatives_pos, "negatives")?,
        dropout_pos: parse_pos(&header.rng.dropout_pos, "dropout")?,
    };

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for ht in header.tensors {
        let n: usize = ht.shape.iter().product();
        let end = ht.offset + n * 8;
        if end > payload.len() {
            return Err(Error::format(
                p,
                format!("truncated payload for tensor `{}`", ht.name),
            ));
        }
        let data: Vec<f64> = payload[ht.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor {
            name: ht.name,
            shape: ht.shape,
            data,
        });
    }
    Ok(Checkpoint {
        config: header.config,
        epoch: header.epoch,
        rng,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterKind;
    use crate::numkit::SeededRng;

    fn fixture(adapter: AdapterKind) -> (Checkpoint, ModelState) {
        let cfg = TrainConfig {
            dim: 4,
            d_a_mult: 2.0,
            adapter,
            lora_rank: 2,
            ..TrainConfig::default()
        };
        let fm = crate::dataio::FeatureMatrix::new(
            "visual",
            DenseMatrix::from_rows(&[
                vec![0.1, 0.2, 0.3],
                vec![0.4, 0.5, 0.6],
                vec![-0.7, 0.8, 0.9],
            ])
            .unwrap(),
        )
        .unwrap();
        let mut rng = SeededRng::new(42);
        let state = ModelState::init(
            5,
            3,
            cfg.dim,
            adapter,
            &cfg.adapter_init(),
            &[&fm],
            &mut rng,
        )
        .unwrap();
        let rng_cursor = RngCursor {
            seed: 42,
            shuffle_pos: 10,
            negatives_pos: 20,
            dropout_pos: 30,
        };
        (Checkpoint::from_model(&state, &cfg, 3, rng_cursor), state)
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        for kind in [
            AdapterKind::None,
            AdapterKind::Befa,
            AdapterKind::Lora,
            AdapterKind::Prompt,
        ] {
            let (ckpt, _) = fixture(kind);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.befc");
            save_checkpoint(&ckpt, &path).unwrap();
            let loaded = load_checkpoint(&path).unwrap();
            assert_eq!(loaded, ckpt);

            let path2 = dir.path().join("m2.befc");
            save_checkpoint(&loaded, &path2).unwrap();
            assert_eq!(
                std::fs::read(&path).unwrap(),
                std::fs::read(&path2).unwrap()
            );
        }
    }

    #[test]
    fn model_survives_the_round_trip() {
        let (ckpt, state) = fixture(AdapterKind::Befa);
        let rebuilt = ckpt.to_model().unwrap();
        assert_eq!(rebuilt.embeddings.user, state.embeddings.user);
        assert_eq!(rebuilt.embeddings.item, state.embeddings.item);
        assert_eq!(rebuilt.branches[0].fusion, state.branches[0].fusion);
        match (&rebuilt.branches[0].adapter, &state.branches[0].adapter) {
            (Adapter::Befa(a), Adapter::Befa(b)) => {
                assert_eq!(a.w1, b.w1);
                assert_eq!(a.p_merge, b.p_merge);
            }
            _ => panic!("adapter kind lost"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (ckpt, _) = fixture(AdapterKind::Befa);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.befc");
        save_checkpoint(&ckpt, &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 16]).unwrap();
        assert!(load_checkpoint(&path).is_err());

        std::fs::write(&path, b"nope").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn adapter_mismatch_is_refused() {
        let (ckpt, _) = fixture(AdapterKind::Befa);
        assert!(ckpt.ensure_adapter(AdapterKind::Befa).is_ok());
        match ckpt.ensure_adapter(AdapterKind::None) {
            Err(Error::CheckpointMismatch(msg)) => assert!(msg.contains("befa")),
            other => panic!("expected mismatch, got {other:?}"),
        }
    }
}
