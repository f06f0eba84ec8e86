//! Single-file checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "TWAVECKP" | version u32 | meta_len u64 | meta (JSON)
//! | n_tensors u64 | per tensor: name_len u32, name, ndim u32, dims u64.., data f64..
//! | SHA-256 of everything before it (32 bytes)
//! ```
//!
//! Tensors are written in name order, so identical contents give identical
//! bytes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{DiscriminatorConfig, EstimatorConfig, HostArray};
use crate::signal::{MelConfig, StftConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TWAVECKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed, hex.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// Completed optimizer steps.
    pub step: u64,
    pub sample_rate: u32,
    /// Analysis settings of the conditioning Mel spectrogram.
    pub stft: StftConfig,
    pub mel: MelConfig,
    pub estimator: EstimatorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<DiscriminatorConfig>,
    pub config: TrainConfig,
    pub rng: RngState,
    pub g_opt_step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_opt_step: Option<u64>,
    /// Exponential running averages of each logged loss component.
    pub running: BTreeMap<String, f64>,
}

/// Metadata plus named arrays: `g/*`, `g_opt/{m,v}/*`, and in the turbo stage
/// `d/*`, `d_opt/{m,v}/*`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, HostArray>,
}

impl Checkpoint {
    /// Arrays under `prefix/`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, HostArray> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, arr) in &self.tensors {
            let expected: usize = arr.shape.iter().product();
            if expected != arr.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} holds {expected} values, data has {}",
                    arr.shape,
                    arr.data.len()
                )));
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(arr.shape.len() as u32).to_le_bytes());
            for &d in &arr.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &arr.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + DIGEST_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint archive".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("digest mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "archive version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Integrity(format!("metadata: {e}")))?;
        let n = r.u64()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Integrity(format!("tensor {name} is too large")))?;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Integrity("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(name, HostArray { shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after tensors".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity("archive truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelScale;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(1);
        rng.next_u64();
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "g/w".to_string(),
            HostArray {
                shape: vec![2, 3],
                data: vec![0.1, -2.5, 1e-300, f64::MAX, 0.0, 1.0 / 3.0],
            },
        );
        tensors.insert(
            "g_opt/m/w".to_string(),
            HostArray {
                shape: vec![1],
                data: vec![7.0],
            },
        );
        let mut running = BTreeMap::new();
        running.insert("cfm".to_string(), 0.1 + 0.2);
        Checkpoint {
            meta: CheckpointMeta {
                stage: Stage::Fm,
                step: 12,
                sample_rate: 22050,
                stft: StftConfig::default(),
                mel: MelConfig::default(),
                estimator: EstimatorConfig::new(ModelScale::tiny(), 80, 256),
                discriminator: None,
                config: TrainConfig::for_stage(Stage::Fm),
                rng: RngState::capture(&rng),
                g_opt_step: 12,
                d_opt_step: None,
                running,
            },
            tensors,
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn flipped_byte_is_an_integrity_error() {
        let mut bytes = sample().to_bytes().unwrap();
        for pos in [20, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[pos] ^= 0x10;
            assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Integrity(_))), "byte {pos}");
        }
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Integrity(_))));
    }

    #[test]
    fn other_versions_and_foreign_files_are_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        let body_len = bytes.len() - DIGEST_LEN;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("version 9")), "{err}");
        assert!(matches!(Checkpoint::from_bytes(b"RIFF...."), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        a.set_stream(1);
        for _ in 0..7 {
            a.next_u32();
        }
        let mut b = RngState::capture(&a).restore().unwrap();
        let xs: Vec<u64> = (0..5).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..5).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn group_strips_prefix() {
        let g = sample().group("g");
        assert_eq!(g.keys().collect::<Vec<_>>(), vec!["w"]);
    }
}
