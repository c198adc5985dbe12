//! Named-tensor checkpoint archive.
//!
//! Layout, all integers little-endian regardless of host:
//!
//! ```text
//! magic "SVLMCKPT" | version u32 | header json (len u32 + bytes)
//! param count u32
//! per param: name (len u32 + bytes) | rank u32 | dims u32* | f32 payload
//! ```
//!
//! Payloads are always 32-bit floats; a save/load round trip is bit-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineModel;
use crate::error::{Error, Result};
use crate::nn::{BlockConfig, ParamStore, BLOCK_ORDERING};
use crate::numerics::Tensor;
use crate::sllm::SllmModel;
use crate::svae::{SvaeConfig, SvaeModel};

const MAGIC: &[u8; 8] = b"SVLMCKPT";
const VERSION: u32 = 1;

/// Model architecture stored in the header so checkpoints are
/// self-describing.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArchDescriptor {
    Svae {
        config: SvaeConfig,
    },
    Sllm {
        backbone: BlockConfig,
        svae: SvaeConfig,
        freeze_svae: bool,
    },
    Baseline {
        config: BlockConfig,
        vocab_size: usize,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub block_ordering: String,
    pub step: u64,
    pub ema: bool,
    pub arch: ArchDescriptor,
}

impl CheckpointHeader {
    pub fn new(config_hash: &str, step: u64, ema: bool, arch: ArchDescriptor) -> Self {
        CheckpointHeader {
            config_hash: config_hash.to_string(),
            block_ordering: BLOCK_ORDERING.to_string(),
            step,
            ema,
            arch,
        }
    }
}

pub fn save<'a, P: AsRef<Path>>(
    path: P,
    header: &CheckpointHeader,
    entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut out = BufWriter::new(file);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let header_json = serde_json::to_vec(header)
        .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;
    write_bytes(&mut out, &header_json)?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        write_bytes(&mut out, name.as_bytes())?;
        out.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load<P: AsRef<Path>>(path: P) -> Result<(CheckpointHeader, Vec<(String, Tensor<f32>)>)> {
    let file = File::open(path.as_ref())?;
    let mut input = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact(&mut input, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let header_json = read_bytes(&mut input)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("header parse: {e}")))?;
    if header.block_ordering != BLOCK_ORDERING {
        return Err(Error::Checkpoint(format!(
            "block ordering {:?} does not match this build ({BLOCK_ORDERING:?})",
            header.block_ordering
        )));
    }
    let count = read_u32(&mut input)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(&mut input)?)
            .map_err(|e| Error::Checkpoint(format!("bad parameter name: {e}")))?;
        let rank = read_u32(&mut input)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut input)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            read_exact(&mut input, &mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        entries.push((name, Tensor::new(shape, data)));
    }
    // anything left over means a corrupt or mismatched payload
    let mut probe = [0u8; 1];
    if input.read(&mut probe)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok((header, entries))
}

fn write_bytes<W: Write>(out: &mut W, bytes: &[u8]) -> Result<()> {
    out.write_all(&(bytes.len() as u32).to_le_bytes())?;
    out.write_all(bytes)?;
    Ok(())
}

fn read_bytes<R: Read>(input: &mut R) -> Result<Vec<u8>> {
    let len = read_u32(input)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(input, &mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(input, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

/// Overwrite a store from loaded entries; every parameter must be present
/// exactly once with a matching shape.
pub fn restore_store(store: &mut ParamStore<f32>, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: checkpoint has {}, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, tensor) in entries {
        let idx = store.index_of(name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint parameter {name:?} not in model"))
        })?;
        if store.value_at(idx).shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name:?}: checkpoint {:?}, model {:?}",
                tensor.shape(),
                store.value_at(idx).shape()
            )));
        }
        *store.value_at_mut(idx) = tensor.clone();
    }
    Ok(())
}

pub fn save_svae<P: AsRef<Path>>(
    path: P,
    model: &SvaeModel<f32>,
    config_hash: &str,
    step: u64,
) -> Result<()> {
    let header = CheckpointHeader::new(
        config_hash,
        step,
        false,
        ArchDescriptor::Svae {
            config: model.config,
        },
    );
    save(path, &header, model.store.entries())
}

/// Save EMA weights in place of the raw ones; shapes mirror the store.
pub fn save_svae_ema<P: AsRef<Path>>(
    path: P,
    model: &SvaeModel<f32>,
    ema: &[Tensor<f32>],
    config_hash: &str,
    step: u64,
) -> Result<()> {
    let header = CheckpointHeader::new(
        config_hash,
        step,
        true,
        ArchDescriptor::Svae {
            config: model.config,
        },
    );
    let named: Vec<(&str, &Tensor<f32>)> = model
        .store
        .entries()
        .map(|(n, _)| n)
        .zip(ema.iter())
        .collect();
    save(path, &header, named.into_iter())
}

pub fn load_svae<P: AsRef<Path>>(path: P) -> Result<(SvaeModel<f32>, CheckpointHeader)> {
    let (header, entries) = load(path)?;
    let ArchDescriptor::Svae { config } = header.arch else {
        return Err(Error::Checkpoint("not a sentence-autoencoder checkpoint".into()));
    };
    let mut model = SvaeModel::new(config, 0)?;
    restore_store(&mut model.store, &entries)?;
    Ok((model, header))
}

pub fn save_sllm<P: AsRef<Path>>(
    path: P,
    model: &SllmModel<f32>,
    config_hash: &str,
    step: u64,
    ema: Option<&[Tensor<f32>]>,
) -> Result<()> {
    let header = CheckpointHeader::new(
        config_hash,
        step,
        ema.is_some(),
        ArchDescriptor::Sllm {
            backbone: model.backbone,
            svae: model.svae_config,
            freeze_svae: model.freeze_svae,
        },
    );
    match ema {
        Some(shadow) => {
            let named: Vec<(&str, &Tensor<f32>)> = model
                .store
                .entries()
                .map(|(n, _)| n)
                .zip(shadow.iter())
                .collect();
            save(path, &header, named.into_iter())
        }
        None => save(path, &header, model.store.entries()),
    }
}

pub fn load_sllm<P: AsRef<Path>>(path: P) -> Result<(SllmModel<f32>, CheckpointHeader)> {
    let (header, entries) = load(path)?;
    let ArchDescriptor::Sllm {
        backbone,
        svae,
        freeze_svae,
    } = header.arch
    else {
        return Err(Error::Checkpoint("not a sentence-level-model checkpoint".into()));
    };
    let donor = SvaeModel::new(svae, 0)?;
    let mut model = SllmModel::graft(&donor, backbone, freeze_svae, 0)?;
    restore_store(&mut model.store, &entries)?;
    Ok((model, header))
}

pub fn save_baseline<P: AsRef<Path>>(
    path: P,
    model: &BaselineModel<f32>,
    config_hash: &str,
    step: u64,
    ema: Option<&[Tensor<f32>]>,
) -> Result<()> {
    let header = CheckpointHeader::new(
        config_hash,
        step,
        ema.is_some(),
        ArchDescriptor::Baseline {
            config: model.config,
            vocab_size: model.vocab_size,
        },
    );
    match ema {
        Some(shadow) => {
            let named: Vec<(&str, &Tensor<f32>)> = model
                .store
                .entries()
                .map(|(n, _)| n)
                .zip(shadow.iter())
                .collect();
            save(path, &header, named.into_iter())
        }
        None => save(path, &header, model.store.entries()),
    }
}

pub fn load_baseline<P: AsRef<Path>>(path: P) -> Result<(BaselineModel<f32>, CheckpointHeader)> {
    let (header, entries) = load(path)?;
    let ArchDescriptor::Baseline { config, vocab_size } = header.arch else {
        return Err(Error::Checkpoint("not a baseline checkpoint".into()));
    };
    let mut model = BaselineModel::new(config, vocab_size, 0)?;
    restore_store(&mut model.store, &entries)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_svae() -> SvaeModel<f32> {
        SvaeModel::new(
            SvaeConfig {
                hidden_size: 8,
                num_heads: 2,
                ffn_mult: 2,
                num_layers: 1,
                vocab_size: 10,
                max_sentence_tokens: 8,
            },
            99,
        )
        .unwrap()
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = tiny_svae();
        save_svae(&path, &model, "hash123", 42).unwrap();
        let (loaded, header) = load_svae(&path).unwrap();
        assert_eq!(header.step, 42);
        assert_eq!(header.config_hash, "hash123");
        assert!(!header.ema);
        for ((an, av), (bn, bv)) in model.store.entries().zip(loaded.store.entries()) {
            assert_eq!(an, bn);
            assert_eq!(av.data(), bv.data(), "parameter {an} differs");
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = tiny_svae();
        save_svae(&path, &model, "h", 1).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_svae(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_svae(&path), Err(Error::Checkpoint(_))));

        let model = tiny_svae();
        save_svae(&path, &model, "h", 1).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99; // version field
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_svae(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn ema_flag_round_trips_with_shadow_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = tiny_svae();
        let shadow: Vec<Tensor<f32>> = model
            .store
            .values()
            .iter()
            .map(|t| Tensor::full(t.shape(), 0.5f32))
            .collect();
        save_svae_ema(&path, &model, &shadow, "h", 7).unwrap();
        let (loaded, header) = load_svae(&path).unwrap();
        assert!(header.ema);
        assert!(loaded.store.values()[0].data().iter().all(|v| *v == 0.5));
    }
}
