//! Versioned binary snapshot of a training run.
//!
//! Layout, all integers little-endian:
//!
//! | field | encoding |
//! |---|---|
//! | magic | `AGCK` |
//! | format version | u32 |
//! | run configuration | u32 length + JSON bytes |
//! | classes, point input width, voxel input width | 3 x u32 |
//! | completed epochs | u64 |
//! | tensors | u32 count, then per tensor: u32 name length, name, u32 rank, rank x u64 dims, f64 values |
//! | optimizer step | u64 |
//! | shuffle RNG | 32-byte seed, u64 stream, u128 word position |
//! | pipeline hash | 32 bytes |
//! | checksum | SHA-256 of everything before it |
//!
//! Tensors are the trainable parameters, then the normalization buffers,
//! then the optimizer moments `adam.m` and `adam.v`.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::classifier::{init_model, Adam, ModelParams, TrainState};
use crate::config::RunConfig;
use crate::tensor::Parameters;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub num_classes: usize,
    pub point_in: usize,
    pub voxel_in: usize,
    pub state: TrainState,
    pub pipeline_hash: [u8; 32],
}

impl Checkpoint {
    pub fn new(config: RunConfig, point_in: usize, voxel_in: usize, state: TrainState) -> Self {
        Checkpoint {
            num_classes: state.model.num_classes(),
            pipeline_hash: config.pipeline_hash(),
            config,
            point_in,
            voxel_in,
            state,
        }
    }

    pub fn model(&self) -> &ModelParams {
        &self.state.model
    }

    /// Fails unless `config` would preprocess and build the model exactly
    /// as the run that produced this checkpoint.
    pub fn check_compatible(&self, config: &RunConfig) -> Result<()> {
        if config.pipeline_hash() != self.pipeline_hash {
            return Err(Error::Incompatible(
                "the checkpoint was trained with different sampling, voxel, graph or model settings".into(),
            ));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for n in [self.num_classes, self.point_in, self.voxel_in] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.state.epoch as u64).to_le_bytes());

        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        let mut push = |name: &str, shape: &[usize], v: &[f64]| tensors.push((name.into(), shape.into(), v.into()));
        self.state.model.visit(&mut push);
        self.state.model.visit_buffers(&mut push);
        let adam = &self.state.adam;
        push("adam.m", &[adam.m.len()], &adam.m);
        push("adam.v", &[adam.v.len()], &adam.v);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, values) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&adam.step.to_le_bytes());
        let rng = &self.state.rng;
        out.extend_from_slice(&rng.get_seed());
        out.extend_from_slice(&rng.get_stream().to_le_bytes());
        out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
        out.extend_from_slice(&self.pipeline_hash);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 40 {
            return Err(Error::parse("offset 0", "file too short for a checkpoint"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::parse(
                format!("offset {}", body.len()),
                "checksum mismatch; the file is truncated or corrupt",
            ));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::parse("offset 0", "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let json_len = r.u32()? as usize;
        let json_at = r.pos;
        let config: RunConfig = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| Error::parse(format!("offset {json_at}"), format!("embedded config: {e}")))?;
        let num_classes = r.u32()? as usize;
        let point_in = r.u32()? as usize;
        let voxel_in = r.u32()? as usize;
        let epoch = r.u64()? as usize;

        let mut model = init_model(
            &config.model,
            config.train.branch_mode,
            point_in,
            voxel_in,
            num_classes,
            config.train.dropout,
            0,
        )?;
        let n_params = model.num_params();
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::parse(format!("offset {at}"), "tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let values = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push((at, name, shape, values));
        }
        let mut next = tensors.into_iter();
        let mut fill = |expected: &str, shape: &[usize], dst: &mut [f64]| -> Result<()> {
            let (at, name, got_shape, values) = next
                .next()
                .ok_or_else(|| Error::parse("end of tensors", format!("missing tensor {expected}")))?;
            if name != expected || got_shape != shape {
                return Err(Error::Incompatible(format!(
                    "tensor at offset {at} is {name} {got_shape:?}, expected {expected} {shape:?}"
                )));
            }
            dst.copy_from_slice(&values);
            Ok(())
        };
        let mut expected = Vec::new();
        model.visit(&mut |name, shape, _| expected.push((name.to_string(), shape.to_vec())));
        model.visit_buffers(&mut |name, shape, _| expected.push((name.to_string(), shape.to_vec())));
        let mut flat = Vec::with_capacity(n_params + 2 * num_classes);
        for (name, shape) in &expected {
            let mut buf = vec![0.0; shape.iter().product()];
            fill(name, shape, &mut buf)?;
            flat.push(buf);
        }
        let mut it = flat.into_iter();
        model.visit_mut(&mut |_, dst| dst.copy_from_slice(&it.next().unwrap()));
        model.visit_buffers_mut(&mut |_, dst| dst.copy_from_slice(&it.next().unwrap()));
        let mut adam = Adam::new(n_params);
        fill("adam.m", &[n_params], &mut adam.m)?;
        fill("adam.v", &[n_params], &mut adam.v)?;
        if let Some((at, name, _, _)) = next.next() {
            return Err(Error::Incompatible(format!("unexpected tensor {name} at offset {at}")));
        }
        adam.step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let pipeline_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        if r.pos != body.len() {
            return Err(Error::parse(format!("offset {}", r.pos), "trailing bytes"));
        }
        model.validate()?;
        Ok(Checkpoint {
            config,
            num_classes,
            point_in,
            voxel_in,
            state: TrainState {
                model,
                adam,
                rng,
                epoch,
            },
            pipeline_hash,
        })
    }

    /// Writes through a temporary file so readers never see a partial
    /// checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("agck.tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Parse { location, message } => Error::Parse {
                location: format!("{}: {location}", path.display()),
                message,
            },
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::parse(format!("offset {}", self.pos), format!("need {n} more bytes"))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use rand::RngCore;

    use super::*;
    use crate::classifier::{BranchMode, ModelConfig};

    fn sample_checkpoint(mode: BranchMode) -> Checkpoint {
        let mut config = RunConfig::default();
        config.model = ModelConfig {
            hidden_dim: 5,
            num_kernels: 3,
            blocks: 2,
            head_hidden: 7,
            ..ModelConfig::default()
        };
        config.train.branch_mode = mode;
        let model = init_model(&config.model, mode, 4, 5, 3, config.train.dropout, 9).unwrap();
        let mut state = TrainState::new(model, 4);
        state.rng.next_u64();
        state.epoch = 7;
        state.adam.step = 42;
        for (i, m) in state.adam.m.iter_mut().enumerate() {
            *m = i as f64 * 0.1 - 3.0;
        }
        state.adam.v.iter_mut().for_each(|v| *v = 1.0 / 3.0);
        state.model.head.running_mean.fill(0.25);
        Checkpoint::new(config, 4, 5, state)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for mode in [BranchMode::Dual, BranchMode::PointOnly, BranchMode::VoxelOnly] {
            let ck = sample_checkpoint(mode);
            let bytes = ck.encode();
            let back = Checkpoint::decode(&bytes).unwrap();
            assert_eq!(back.state.model, ck.state.model);
            assert_eq!(back.state.adam, ck.state.adam);
            assert_eq!(back.state.epoch, 7);
            assert_eq!(back.config, ck.config);
            assert_eq!(back.pipeline_hash, ck.pipeline_hash);
            let mut a = ck.state.rng.clone();
            let mut b = back.state.rng.clone();
            assert_eq!(a.next_u64(), b.next_u64());
            assert_eq!(back.encode(), bytes);
        }
    }

    #[test]
    fn starts_with_magic_and_version() {
        let bytes = sample_checkpoint(BranchMode::Dual).encode();
        assert_eq!(&bytes[..4], b"AGCK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample_checkpoint(BranchMode::Dual).encode();
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(Checkpoint::decode(&flipped), Err(Error::Parse { .. })));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::decode(b"AGCK").is_err());
    }

    #[test]
    fn compatibility_follows_the_pipeline_hash() {
        let ck = sample_checkpoint(BranchMode::Dual);
        let mut cfg = ck.config.clone();
        cfg.train.epochs = 999;
        assert!(ck.check_compatible(&cfg).is_ok());
        cfg.graph.point_radius = 3.0;
        assert!(matches!(ck.check_compatible(&cfg), Err(Error::Incompatible(_))));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.agck");
        let ck = sample_checkpoint(BranchMode::VoxelOnly);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().state.model, ck.state.model);
    }
}
