//! Binary checkpoint container.
//!
//! Layout: magic "UPIL", version byte 0x01, u32-LE length-prefixed JSON
//! header (config, model, shapes, seed, param order, payload sha256),
//! the concatenated little-endian f64 parameter arrays in header order,
//! then the registry as a JSON array in the partition dump format.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::models::{init_bundle, ModelBundle, ModelConfig};
use crate::numerics::Tensor2;
use crate::partitioner::{PartitionMatrix, PartitionRegistry, REGISTRY_CAPACITY};

const MAGIC: &[u8; 4] = b"UPIL";
const VERSION: u8 = 0x01;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    model: ModelConfig,
    shapes: Vec<(usize, usize)>,
    seed: u64,
    param_order: Vec<String>,
    payload_sha256: String,
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub bundle: ModelBundle,
    pub registry: PartitionRegistry,
    pub config: TrainConfig,
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(
    bundle: &ModelBundle,
    registry: &PartitionRegistry,
    cfg: &TrainConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut param_order = Vec::new();
    let mut shapes = Vec::new();
    let mut payload = Vec::new();
    for group in bundle.groups() {
        for (ti, t) in group.tensors.iter().enumerate() {
            param_order.push(format!("{}.{}", group.name, ti));
            shapes.push(t.shape());
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = CheckpointHeader {
        config: cfg.clone(),
        model: bundle.config.clone(),
        shapes,
        seed: cfg.seed,
        param_order,
        payload_sha256: hex_string(&Sha256::digest(&payload)),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Data(format!("serialize header: {e}")))?;
    let registry_json = serde_json::to_vec(registry.entries())
        .map_err(|e| Error::Data(format!("serialize registry: {e}")))?;

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&[VERSION])?;
    out.write_all(&(header_json.len() as u32).to_le_bytes())?;
    out.write_all(&header_json)?;
    out.write_all(&payload)?;
    out.write_all(&registry_json)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let path = path.as_ref();
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open checkpoint '{}': {e}", path.display())))?;

    let mut magic = [0u8; 4];
    read_exact(&mut file, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Corruption("bad checkpoint magic".into()));
    }
    let mut version = [0u8; 1];
    read_exact(&mut file, &mut version)?;
    if version[0] != VERSION {
        return Err(Error::Version(format!(
            "unsupported checkpoint version {}",
            version[0]
        )));
    }
    let mut len_bytes = [0u8; 4];
    read_exact(&mut file, &mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    read_exact(&mut file, &mut header_json)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Corruption(format!("bad checkpoint header: {e}")))?;

    if header.shapes.len() != header.param_order.len() {
        return Err(Error::Corruption(
            "checkpoint header shapes/param_order mismatch".into(),
        ));
    }
    let payload_len: usize = header.shapes.iter().map(|(r, c)| r * c * 8).sum();
    let mut payload = vec![0u8; payload_len];
    read_exact(&mut file, &mut payload)?;
    if hex_string(&Sha256::digest(&payload)) != header.payload_sha256 {
        return Err(Error::Corruption("checkpoint payload hash mismatch".into()));
    }
    let mut registry_json = Vec::new();
    file.read_to_end(&mut registry_json)?;
    let entries: Vec<PartitionMatrix> = serde_json::from_slice(&registry_json)
        .map_err(|e| Error::Corruption(format!("bad checkpoint registry: {e}")))?;

    // rebuild the bundle: init for structure, then overwrite parameters
    let mut bundle = init_bundle(&header.model, header.seed)?;
    let mut offset = 0usize;
    {
        let mut groups = [
            &mut bundle.phi,
            &mut bundle.classifier,
            &mut bundle.partition_head,
        ];
        let mut cursor = 0usize;
        for group in groups.iter_mut() {
            for (ti, t) in group.tensors.iter_mut().enumerate() {
                let name = format!("{}.{}", group.name, ti);
                if header.param_order.get(cursor) != Some(&name) {
                    return Err(Error::Corruption(format!(
                        "checkpoint parameter order mismatch at '{name}'"
                    )));
                }
                if header.shapes[cursor] != t.shape() {
                    return Err(Error::Corruption(format!(
                        "checkpoint shape mismatch for '{name}': header {:?}, model {:?}",
                        header.shapes[cursor],
                        t.shape()
                    )));
                }
                let mut data = Vec::with_capacity(t.data().len());
                for _ in 0..t.data().len() {
                    let mut b = [0u8; 8];
                    b.copy_from_slice(&payload[offset..offset + 8]);
                    data.push(f64::from_le_bytes(b));
                    offset += 8;
                }
                *t = Tensor2::from_vec(t.rows(), t.cols(), data)?;
                cursor += 1;
            }
        }
        if cursor != header.param_order.len() {
            return Err(Error::Corruption(
                "checkpoint has extra parameter tensors".into(),
            ));
        }
    }

    let capacity = if header.config.ablation == super::Ablation::NoRecord {
        1
    } else {
        REGISTRY_CAPACITY
    };
    let mut registry = PartitionRegistry::new(capacity);
    for e in entries {
        registry
            .record(e)
            .map_err(|err| Error::Corruption(format!("bad registry entry: {err}")))?;
    }

    Ok(LoadedCheckpoint {
        bundle,
        registry,
        config: header.config,
    })
}

fn read_exact(file: &mut std::fs::File, buf: &mut [u8]) -> Result<()> {
    file.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Corruption("checkpoint file truncated".into())
        } else {
            Error::Io(e)
        }
    })
}

/// Reject a checkpoint whose architecture-relevant settings disagree
/// with the run that wants to consume it.
pub fn check_compatible(loaded: &TrainConfig, expected: &TrainConfig) -> Result<()> {
    if loaded.k != expected.k {
        return Err(Error::Version(format!(
            "checkpoint k={} incompatible with configured k={}",
            loaded.k, expected.k
        )));
    }
    if loaded.hidden_widths != expected.hidden_widths || loaded.rep_dim != expected.rep_dim {
        return Err(Error::Version(
            "checkpoint architecture incompatible with configured model".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Ablation;

    fn sample() -> (ModelBundle, PartitionRegistry, TrainConfig) {
        let cfg = TrainConfig {
            hidden_widths: vec![6],
            rep_dim: 4,
            ..Default::default()
        };
        let bundle = init_bundle(&cfg.model_config(5), 3).unwrap();
        let mut registry = PartitionRegistry::with_default_capacity();
        registry
            .record(PartitionMatrix {
                epoch: 7,
                k: 2,
                score: 1.25,
                assignment: vec![0, 1, 1, 0],
            })
            .unwrap();
        (bundle, registry, cfg)
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let (bundle, registry, cfg) = sample();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(&bundle, &registry, &cfg, f.path()).unwrap();
        let loaded = load_checkpoint(f.path()).unwrap();
        assert_eq!(loaded.bundle, bundle);
        assert_eq!(loaded.registry, registry);
        assert_eq!(loaded.config, cfg);
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let (bundle, registry, cfg) = sample();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(&bundle, &registry, &cfg, f.path()).unwrap();
        let bytes = std::fs::read(f.path()).unwrap();
        std::fs::write(f.path(), &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(f.path()),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn flipped_payload_bit_is_corrupt() {
        let (bundle, registry, cfg) = sample();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(&bundle, &registry, &cfg, f.path()).unwrap();
        let mut bytes = std::fs::read(f.path()).unwrap();
        let idx = bytes.len() - 200; // somewhere in the payload
        bytes[idx] ^= 0x01;
        std::fs::write(f.path(), &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(f.path()),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let (bundle, registry, cfg) = sample();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(&bundle, &registry, &cfg, f.path()).unwrap();
        let mut bytes = std::fs::read(f.path()).unwrap();
        let orig = bytes.clone();
        bytes[0] = b'X';
        std::fs::write(f.path(), &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(f.path()),
            Err(Error::Corruption(_))
        ));
        let mut bytes = orig;
        bytes[4] = 0x02;
        std::fs::write(f.path(), &bytes).unwrap();
        assert!(matches!(load_checkpoint(f.path()), Err(Error::Version(_))));
    }

    #[test]
    fn mismatched_k_is_a_version_error() {
        let (_, _, cfg) = sample();
        let mut other = cfg.clone();
        other.k = 3;
        assert!(matches!(
            check_compatible(&cfg, &other),
            Err(Error::Version(_))
        ));
        let mut same = cfg.clone();
        same.ablation = Ablation::NoRecord; // unrelated field may differ
        assert!(check_compatible(&cfg, &same).is_ok());
    }
}
