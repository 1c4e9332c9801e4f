//! The SKD1 checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SKD1"
//! header length  u64
//! header         JSON (version, dtype, epoch, arch, configs, RNG state)
//! tensor count   u64
//! per tensor:
//!   name length  u32
//!   name         UTF-8 bytes
//!   dtype tag    u8
//!   rank         u32
//!   dims         rank × u64
//!   data         elements, little-endian
//! ```
//!
//! Saving a loaded checkpoint reproduces the original file byte for byte,
//! and every decode failure reports the byte offset it happened at.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::models::ArchSpec;
use crate::scalar::{Dtype, Scalar};

use super::{OptimConfig, TrainError};

const MAGIC: &[u8; 4] = b"SKD1";
const VERSION: u32 = 1;

/// Serializable snapshot of a ChaCha20 generator: seed, stream, and how
/// many 32-bit words have been consumed. Restoring resumes the exact
/// random sequence mid-stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha20Rng) -> Self {
        let word_pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            word_pos_hi: (word_pos >> 64) as u64,
            word_pos_lo: word_pos as u64,
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

/// Checkpoint metadata, readable without decoding any tensor data via
/// [`checkpoint_peek`]. Callers that need to pick a scalar type before
/// calling [`checkpoint_load`] look at `dtype` here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub dtype: Dtype,
    pub epoch: usize,
    pub arch: ArchSpec,
    pub distill: Option<DistillConfig>,
    pub optim: OptimConfig,
    pub optim_t: u64,
    pub rng: RngState,
}

/// Everything needed to resume a run or run inference: metadata plus a
/// flat, ordered list of named tensors (network weights, projection
/// weights, optimizer state).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F: Scalar> {
    pub epoch: usize,
    pub arch: ArchSpec,
    pub distill: Option<DistillConfig>,
    pub optim: OptimConfig,
    pub optim_t: u64,
    pub rng: RngState,
    pub tensors: Vec<(String, Vec<F>, Vec<usize>)>,
}

impl<F: Scalar> Checkpoint<F> {
    /// Tensors as a name-keyed map, the shape `import_tensors` consumes.
    pub fn tensor_map(&self) -> FxHashMap<String, (Vec<F>, Vec<usize>)> {
        self.tensors
            .iter()
            .map(|(name, values, shape)| (name.clone(), (values.clone(), shape.clone())))
            .collect()
    }

    /// Tensors whose name starts with `prefix`.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Vec<(String, Vec<F>, Vec<usize>)> {
        self.tensors
            .iter()
            .filter(|(name, _, _)| name.starts_with(prefix))
            .cloned()
            .collect()
    }

    /// Rebuilds the stored network: constructs the architecture and fills
    /// in its weights. Projection and optimizer tensors, if present, are
    /// ignored, so this accepts both full training checkpoints and
    /// weight-only exports.
    pub fn build_network(&self) -> Result<crate::models::Res16UNet<F>, TrainError> {
        // Construction seed is irrelevant: every weight is overwritten.
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut net = crate::models::Res16UNet::new(&self.arch, &mut rng)?;
        net.import_tensors(&self.tensor_map())?;
        Ok(net)
    }
}

fn encode<F: Scalar>(ckpt: &Checkpoint<F>) -> Vec<u8> {
    let header = Header {
        version: VERSION,
        dtype: F::DTYPE,
        epoch: ckpt.epoch,
        arch: ckpt.arch.clone(),
        distill: ckpt.distill,
        optim: ckpt.optim,
        optim_t: ckpt.optim_t,
        rng: ckpt.rng,
    };
    let header_json = serde_json::to_vec(&header).expect("header has no non-serializable values");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&(ckpt.tensors.len() as u64).to_le_bytes());
    for (name, values, shape) in &ckpt.tensors {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, values.len(), "tensor {name}: shape does not match value count");
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE.tag());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in values {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, msg: impl Into<String>) -> TrainError {
        TrainError::CorruptCheckpoint {
            path: self.path.to_string(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TrainError> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(self.corrupt(format!("{what} needs {n} bytes but only {remaining} remain")));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8, TrainError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, TrainError> {
        let bytes = self.take(4, what)?;
        Ok(u32::from_le_bytes(bytes.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, TrainError> {
        let bytes = self.take(8, what)?;
        Ok(u64::from_le_bytes(bytes.try_into().expect("8 bytes")))
    }
}

fn decode<F: Scalar>(buf: &[u8], path: &str) -> Result<Checkpoint<F>, TrainError> {
    let mut r = Reader { buf, pos: 0, path };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        r.pos = 0;
        return Err(r.corrupt(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }

    let header_len = r.u64("header length")? as usize;
    let header_start = r.pos;
    let header_bytes = r.take(header_len, "header")?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| {
        TrainError::CorruptCheckpoint {
            path: path.to_string(),
            offset: header_start,
            msg: format!("header is not valid JSON metadata: {e}"),
        }
    })?;
    if header.version != VERSION {
        return Err(TrainError::CheckpointVersion {
            path: path.to_string(),
            expected: VERSION,
            got: header.version,
        });
    }
    if header.dtype != F::DTYPE {
        return Err(TrainError::DtypeMismatch {
            ckpt: header.dtype,
            requested: F::DTYPE,
        });
    }

    let tensor_count = r.u64("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(tensor_count.min(1 << 20));
    for _ in 0..tensor_count {
        let name_len = r.u32("tensor name length")? as usize;
        let name_bytes = r.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|e| {
                let mut at = Reader { buf, pos: r.pos - name_len, path };
                at.pos += e.valid_up_to();
                at.corrupt("tensor name is not UTF-8")
            })?
            .to_string();
        let tag = r.u8("dtype tag")?;
        let dtype = Dtype::from_tag(tag)
            .ok_or_else(|| r.corrupt(format!("unknown dtype tag {tag} in tensor {name:?}")))?;
        if dtype != F::DTYPE {
            return Err(r.corrupt(format!(
                "tensor {name:?} has dtype {dtype:?}, header says {:?}",
                F::DTYPE
            )));
        }
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.corrupt(format!("tensor {name:?} dimensions overflow")))?;
        let byte_len = numel
            .checked_mul(F::DTYPE.size_bytes())
            .ok_or_else(|| r.corrupt(format!("tensor {name:?} data length overflows")))?;
        let data = r.take(byte_len, "tensor data")?;
        let values: Vec<F> = data
            .chunks_exact(F::DTYPE.size_bytes())
            .map(F::read_le)
            .collect();
        tensors.push((name, values, shape));
    }
    if r.pos != buf.len() {
        return Err(r.corrupt(format!("{} trailing bytes after the last tensor", buf.len() - r.pos)));
    }

    Ok(Checkpoint {
        epoch: header.epoch,
        arch: header.arch,
        distill: header.distill,
        optim: header.optim,
        optim_t: header.optim_t,
        rng: header.rng,
        tensors,
    })
}

pub fn checkpoint_save<F: Scalar>(
    path: impl AsRef<Path>,
    ckpt: &Checkpoint<F>,
) -> Result<(), TrainError> {
    std::fs::write(path, encode(ckpt))?;
    Ok(())
}

pub fn checkpoint_load<F: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<F>, TrainError> {
    let display = path.as_ref().display().to_string();
    let buf = std::fs::read(path.as_ref())?;
    decode::<F>(&buf, &display)
}

/// Reads only the metadata header of a checkpoint, leaving the tensor
/// payload untouched on disk.
pub fn checkpoint_peek(path: impl AsRef<Path>) -> Result<Header, TrainError> {
    use std::io::Read;

    let display = path.as_ref().display().to_string();
    let mut file = std::fs::File::open(path.as_ref())?;
    let corrupt = |offset: usize, msg: String| TrainError::CorruptCheckpoint {
        path: display.clone(),
        offset,
        msg,
    };

    let mut fixed = [0u8; 12];
    file.read_exact(&mut fixed)
        .map_err(|_| corrupt(0, "file is shorter than the fixed preamble".into()))?;
    if &fixed[..4] != MAGIC {
        return Err(corrupt(0, format!("bad magic {:?}, expected {MAGIC:?}", &fixed[..4])));
    }
    let header_len = u64::from_le_bytes(fixed[4..12].try_into().expect("8 bytes"));
    let remaining = file.metadata()?.len().saturating_sub(12);
    if header_len > remaining {
        return Err(corrupt(
            12,
            format!("header needs {header_len} bytes but only {remaining} remain"),
        ));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    file.read_exact(&mut header_bytes)
        .map_err(|_| corrupt(12, format!("header needs {header_len} bytes")))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| corrupt(12, format!("header is not valid JSON metadata: {e}")))?;
    if header.version != VERSION {
        return Err(TrainError::CheckpointVersion {
            path: display,
            expected: VERSION,
            got: header.version,
        });
    }
    Ok(header)
}
