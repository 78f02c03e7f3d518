//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "TCFCKPT\0"
//! version      u32
//! precision    u8       32 or 64
//! config       11 × u32 embed_dim, hidden_dim, layers, heads, ff_dim, visual_dims,
//!                       answer_count, vocab_size, max_question, max_tags, max_regions
//! seed         u64
//! step         u64
//! tensor count u32
//! per tensor:  name length u16, name bytes, rank u8, rank × u32 dims,
//!              raw little-endian values
//! ```

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::params::{param_specs, ModelParams};
use crate::diffcore::{Precision, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TCFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Parameters plus the run metadata stored alongside them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub params: ModelParams<S>,
    pub seed: u64,
    pub step: u64,
}

/// A checkpoint of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn precision(&self) -> Precision {
        match self {
            AnyCheckpoint::F32(_) => Precision::F32,
            AnyCheckpoint::F64(_) => Precision::F64,
        }
    }

    pub fn step(&self) -> u64 {
        match self {
            AnyCheckpoint::F32(c) => c.step,
            AnyCheckpoint::F64(c) => c.step,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyCheckpoint::F32(c) => c.params.config(),
            AnyCheckpoint::F64(c) => c.params.config(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            AnyCheckpoint::F32(c) => c.to_bytes(),
            AnyCheckpoint::F64(c) => c.to_bytes(),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        read_preamble(&mut r)?;
        let tag = r.u8()?;
        match Precision::from_tag(tag) {
            Some(Precision::F32) => Ok(AnyCheckpoint::F32(Checkpoint::from_bytes(bytes)?)),
            Some(Precision::F64) => Ok(AnyCheckpoint::F64(Checkpoint::from_bytes(bytes)?)),
            None => Err(Error::format("checkpoint", format!("unknown precision tag {tag}"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }
}

impl<S: Real> Checkpoint<S> {
    pub fn new(params: ModelParams<S>, seed: u64, step: u64) -> Self {
        Self { params, seed, step }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.params.config();
        let mut out = Vec::with_capacity(64 + self.params.param_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(S::PRECISION.tag());
        for v in config_fields(cfg) {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let specs = param_specs(cfg);
        out.extend_from_slice(&(specs.len() as u32).to_le_bytes());
        for (spec, t) in specs.iter().zip(self.params.tensors()) {
            out.extend_from_slice(&(spec.name.len() as u16).to_le_bytes());
            out.extend_from_slice(spec.name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        read_preamble(&mut r)?;
        let tag = r.u8()?;
        if Precision::from_tag(tag) != Some(S::PRECISION) {
            return Err(Error::format(
                "checkpoint",
                format!("precision tag {tag} does not match {}", S::PRECISION),
            ));
        }
        let mut f = [0usize; 11];
        for v in f.iter_mut() {
            *v = r.u32()? as usize;
        }
        let config = ModelConfig {
            embed_dim: f[0],
            hidden_dim: f[1],
            layers: f[2],
            heads: f[3],
            ff_dim: f[4],
            visual_dims: f[5],
            answer_count: f[6],
            vocab_size: f[7],
            max_question: f[8],
            max_tags: f[9],
            max_regions: f[10],
        };
        config
            .validate()
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let seed = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let specs = param_specs(&config);
        if count != specs.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{count} tensors, config declares {}", specs.len()),
            ));
        }
        let width = S::PRECISION.byte_width();
        let mut tensors = Vec::with_capacity(count);
        for spec in &specs {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
            if name != spec.name {
                return Err(Error::format(
                    "checkpoint",
                    format!("expected tensor `{}`, found `{name}`", spec.name),
                ));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            if shape != spec.shape {
                return Err(Error::format(
                    "checkpoint",
                    format!("{name}: shape {shape:?}, expected {:?}", spec.shape),
                ));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * width)?;
            let data = raw.chunks_exact(width).map(S::read_le).collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        if !r.is_empty() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self {
            params: ModelParams::from_tensors(config, tensors)?,
            seed,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Reads only the step counter, without decoding tensors.
pub fn peek_step(path: &Path) -> Result<u64> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes);
    read_preamble(&mut r)?;
    r.u8()?;
    for _ in 0..11 {
        r.u32()?;
    }
    r.u64()?;
    r.u64()
}

fn config_fields(cfg: &ModelConfig) -> [usize; 11] {
    [
        cfg.embed_dim,
        cfg.hidden_dim,
        cfg.layers,
        cfg.heads,
        cfg.ff_dim,
        cfg.visual_dims,
        cfg.answer_count,
        cfg.vocab_size,
        cfg.max_question,
        cfg.max_tags,
        cfg.max_regions,
    ]
}

fn read_preamble(r: &mut Reader<'_>) -> Result<()> {
    if r.take(8)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic bytes"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported format version {version}"),
        ));
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // Write-then-rename so a crash never leaves a truncated checkpoint.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("checkpoint", "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact_in_both_precisions() {
        let cfg = ModelConfig::tiny();
        let c32 = Checkpoint::new(ModelParams::<f32>::init(cfg, 5).unwrap(), 5, 17);
        let back = Checkpoint::<f32>::from_bytes(&c32.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), c32.to_bytes());
        assert_eq!(back, c32);

        let c64 = Checkpoint::new(ModelParams::<f64>::init(cfg, 6).unwrap(), 6, 3);
        match AnyCheckpoint::from_bytes(&c64.to_bytes()).unwrap() {
            AnyCheckpoint::F64(c) => assert_eq!(c, c64),
            other => panic!("wrong precision {:?}", other.precision()),
        }
    }

    #[test]
    fn header_fields_are_where_documented() {
        let cfg = ModelConfig::tiny();
        let bytes = Checkpoint::new(ModelParams::<f32>::init(cfg, 1).unwrap(), 99, 1234).to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(bytes[12], 32);
        assert_eq!(
            u32::from_le_bytes(bytes[13..17].try_into().unwrap()),
            cfg.embed_dim as u32
        );
        let seed_at = 13 + 11 * 4;
        assert_eq!(u64::from_le_bytes(bytes[seed_at..seed_at + 8].try_into().unwrap()), 99);
        assert_eq!(
            u64::from_le_bytes(bytes[seed_at + 8..seed_at + 16].try_into().unwrap()),
            1234
        );
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let cfg = ModelConfig::tiny();
        let mut bytes = Checkpoint::new(ModelParams::<f32>::init(cfg, 1).unwrap(), 1, 1).to_bytes();
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        bytes.truncate(bytes.len() - 1);
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
        bytes[0] = b'X';
        assert!(AnyCheckpoint::from_bytes(&bytes).is_err());
    }
}
