//! Training checkpoints.
//!
//! Layout: `"ATWC"`, u32 version, u32 metadata length, JSON metadata
//! (architecture, config echo, step, RNG position), u64 parameter count,
//! then parameters, Adam first moments and second moments as little-endian
//! f64, and finally a CRC-32 of every preceding byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{put_f64s, ByteReader};
use crate::error::{Error, Result};
use crate::net::{Architecture, DenoiserNet};
use crate::trainer::{OptimizerState, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ATWC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where the training streams stand: every step's randomness is derived
/// from `(seed, step)`, so these two numbers pin the stream positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPosition {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub architecture: Architecture,
    pub params: Vec<f64>,
    pub optimizer: OptimizerState,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    architecture: Architecture,
    config: TrainConfig,
    step: u64,
    optimizer_step: u64,
    rng: RngPosition,
}

impl Checkpoint {
    /// Step 0 of a run: initial parameters and empty optimizer moments.
    pub fn fresh(config: TrainConfig, net: DenoiserNet) -> Self {
        let n = net.param_count();
        Self {
            architecture: net.architecture().clone(),
            params: net.params().to_vec(),
            optimizer: OptimizerState::new(n),
            step: 0,
            config,
        }
    }

    pub fn rng_position(&self) -> RngPosition {
        RngPosition {
            seed: self.config.seed,
            step: self.step,
        }
    }

    pub fn net(&self) -> Result<DenoiserNet> {
        DenoiserNet::from_params(self.architecture.clone(), self.params.clone())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let n = self.params.len();
        if self.optimizer.m.len() != n || self.optimizer.v.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: self.optimizer.m.len(),
            });
        }
        let meta = Meta {
            architecture: self.architecture.clone(),
            config: self.config.clone(),
            step: self.step,
            optimizer_step: self.optimizer.step,
            rng: self.rng_position(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Malformed(format!("checkpoint metadata: {e}")))?;
        let mut out = Vec::with_capacity(24 + json.len() + 24 * n);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        put_f64s(&mut out, &self.params);
        put_f64s(&mut out, &self.optimizer.m);
        put_f64s(&mut out, &self.optimizer.v);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        let mut head = ByteReader::new(&bytes[4..]);
        let version = head.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                expected: 16,
                found: bytes.len() as u64,
            });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Corrupt { stored, computed });
        }

        let mut r = ByteReader::new(&body[8..]);
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Malformed(format!("checkpoint metadata: {e}")))?;
        let n = r.u64()? as usize;
        if n != meta.architecture.param_count() {
            return Err(Error::Malformed(format!(
                "{n} parameters stored, architecture needs {}",
                meta.architecture.param_count()
            )));
        }
        if meta.rng.step != meta.step || meta.rng.seed != meta.config.seed {
            return Err(Error::Malformed("RNG position disagrees with step or seed".into()));
        }
        if meta.config.architecture != meta.architecture {
            return Err(Error::Malformed("architecture disagrees with config echo".into()));
        }
        let params = r.f64s(n)?;
        let m = r.f64s(n)?;
        let v = r.f64s(n)?;
        if r.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            config: meta.config,
            architecture: meta.architecture,
            params,
            optimizer: OptimizerState {
                m,
                v,
                step: meta.optimizer_step,
            },
            step: meta.step,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.encode()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    Checkpoint::decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::GaussianMixture;
    use crate::schedule::NoiseSchedule;

    fn sample() -> Checkpoint {
        let s = NoiseSchedule::ve_identity(3.0, 0.5).unwrap();
        let mut cfg = TrainConfig::desk_defaults(s, Some(GaussianMixture::two_point()));
        cfg.architecture = Architecture::new(1, vec![8], 4, crate::net::Activation::Silu).unwrap();
        let net = DenoiserNet::init(cfg.architecture.clone(), 5);
        let mut ck = Checkpoint::fresh(cfg, net);
        ck.step = 17;
        ck.optimizer.step = 17;
        ck.optimizer.m.iter_mut().enumerate().for_each(|(i, m)| *m = i as f64 * 1e-3);
        ck.optimizer.v.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sqrt() * 1e-7);
        ck
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.atwc");
        let ck = sample();
        save_checkpoint(&p, &ck).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.rng_position(), RngPosition { seed: ck.config.seed, step: 17 });
        assert_eq!(back.encode().unwrap(), ck.encode().unwrap());
    }

    #[test]
    fn any_flipped_byte_is_rejected() {
        let bytes = sample().encode().unwrap();
        let p = Path::new("c");
        for i in (8..bytes.len()).step_by(37) {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            assert!(matches!(Checkpoint::decode(&bad, p), Err(Error::Corrupt { .. })), "byte {i}");
        }
        let mut bad = bytes.clone();
        bad[1] = b'?';
        assert!(matches!(Checkpoint::decode(&bad, p), Err(Error::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::decode(&bad, p), Err(Error::VersionMismatch { found: 2, .. })));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3], p).is_err());
    }
}
