//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `CAPK`, version u16, parameter count u32,
//! then per parameter: name (u8 length + UTF-8), shape rank u8 + dims u32
//! each, f32 payload. Optional state blocks (optimizer moments, step and RNG
//! bookkeeping) follow in the same name/shape/payload layout until EOF.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::adam::Adam;
use super::params::ParamStore;
use super::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CAPK";
pub const VERSION: u16 = 1;

/// Name prefixes for the optional state blocks.
pub mod blocks {
    pub const ADAM_M: &str = "adam.m.";
    pub const ADAM_V: &str = "adam.v.";
    pub const ADAM_STEP: &str = "adam.step";
    pub const RNG_SEED: &str = "rng.seed";
    pub const ITERATION: &str = "meta.iter";
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format error in {field}: {detail}")]
    Format { field: &'static str, detail: String },
    #[error("checkpoint io error: {0}")]
    Io(#[from] io::Error),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Parsed checkpoint contents: named parameter tensors plus state blocks.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor<f32>)>,
    pub state: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn state_block(&self, name: &str) -> Option<&Tensor<f32>> {
        self.state.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Adam moment tensors in `names` order, or None if absent.
    pub fn adam_moments(&self, names: &[&str]) -> Option<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
        let m: Option<Vec<_>> = names
            .iter()
            .map(|n| self.state_block(&format!("{}{}", blocks::ADAM_M, n)).cloned())
            .collect();
        let v: Option<Vec<_>> = names
            .iter()
            .map(|n| self.state_block(&format!("{}{}", blocks::ADAM_V, n)).cloned())
            .collect();
        Some((m?, v?))
    }

    pub fn adam_step(&self) -> Option<u64> {
        self.state_block(blocks::ADAM_STEP)
            .map(|t| t.data()[0] as u64)
    }

    pub fn rng_seed(&self) -> Option<u64> {
        self.state_block(blocks::RNG_SEED).map(|t| {
            let lo = t.data()[0].to_bits() as u64;
            let hi = t.data()[1].to_bits() as u64;
            (hi << 32) | lo
        })
    }

    pub fn iteration(&self) -> Option<u64> {
        self.state_block(blocks::ITERATION)
            .map(|t| t.data()[0] as u64)
    }
}

/// A u64 packed bit-exactly into two f32 payload slots.
pub fn pack_u64(v: u64) -> Tensor<f32> {
    Tensor::from_vec(
        &[2],
        vec![
            f32::from_bits((v & 0xffff_ffff) as u32),
            f32::from_bits((v >> 32) as u32),
        ],
    )
    .expect("fixed shape")
}

fn write_block<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> Result<()> {
    let name_bytes = name.as_bytes();
    if name_bytes.len() > u8::MAX as usize {
        return Err(CheckpointError::Format {
            field: "name",
            detail: format!("name {name:?} exceeds 255 bytes"),
        });
    }
    w.write_all(&[name_bytes.len() as u8])?;
    w.write_all(name_bytes)?;
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(CheckpointError::Format {
            field: "rank",
            detail: format!("rank {} exceeds 255", shape.len()),
        });
    }
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or(
    r: &mut impl Read,
    buf: &mut [u8],
    field: &'static str,
) -> Result<()> {
    r.read_exact(buf).map_err(|e| CheckpointError::Format {
        field,
        detail: format!("truncated: {e}"),
    })
}

fn read_block(r: &mut impl Read) -> Result<(String, Tensor<f32>)> {
    let mut len = [0u8; 1];
    read_exact_or(r, &mut len, "name length")?;
    let mut name = vec![0u8; len[0] as usize];
    read_exact_or(r, &mut name, "name")?;
    let name = String::from_utf8(name).map_err(|e| CheckpointError::Format {
        field: "name",
        detail: e.to_string(),
    })?;
    let mut rank = [0u8; 1];
    read_exact_or(r, &mut rank, "rank")?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut d = [0u8; 4];
        read_exact_or(r, &mut d, "dims")?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let count: usize = shape.iter().product();
    let mut payload = vec![0u8; count * 4];
    read_exact_or(r, &mut payload, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let t = Tensor::from_vec(&shape, data).map_err(|e| CheckpointError::Format {
        field: "payload",
        detail: e.to_string(),
    })?;
    Ok((name, t))
}

/// Saves parameters plus optional optimizer state and bookkeeping blocks.
pub fn save(
    path: &Path,
    store: &ParamStore<f32>,
    optimizer: Option<&Adam<f32>>,
    seed: u64,
    iteration: u64,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        write_block(&mut w, &p.name, &p.value)?;
    }
    if let Some(opt) = optimizer {
        let (m, v) = opt.moments();
        for ((_, p), t) in store.iter().zip(m) {
            write_block(&mut w, &format!("{}{}", blocks::ADAM_M, p.name), t)?;
        }
        for ((_, p), t) in store.iter().zip(v) {
            write_block(&mut w, &format!("{}{}", blocks::ADAM_V, p.name), t)?;
        }
        write_block(
            &mut w,
            blocks::ADAM_STEP,
            &Tensor::scalar(opt.step_count() as f32),
        )?;
    }
    write_block(&mut w, blocks::RNG_SEED, &pack_u64(seed))?;
    write_block(&mut w, blocks::ITERATION, &Tensor::scalar(iteration as f32))?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format {
            field: "magic",
            detail: format!("expected {MAGIC:?}, found {magic:?}"),
        });
    }
    let mut version = [0u8; 2];
    read_exact_or(&mut r, &mut version, "version")?;
    let version = u16::from_le_bytes(version);
    if version != VERSION {
        return Err(CheckpointError::Format {
            field: "version",
            detail: format!("unsupported version {version}"),
        });
    }
    let mut count = [0u8; 4];
    read_exact_or(&mut r, &mut count, "parameter count")?;
    let count = u32::from_le_bytes(count);
    let mut ckpt = Checkpoint::default();
    for _ in 0..count {
        ckpt.params.push(read_block(&mut r)?);
    }
    // trailing state blocks until EOF
    loop {
        let mut probe = [0u8; 1];
        match r.read(&mut probe)? {
            0 => break,
            _ => {
                let mut name = vec![0u8; probe[0] as usize];
                read_exact_or(&mut r, &mut name, "name")?;
                let name = String::from_utf8(name).map_err(|e| CheckpointError::Format {
                    field: "name",
                    detail: e.to_string(),
                })?;
                let mut rank = [0u8; 1];
                read_exact_or(&mut r, &mut rank, "rank")?;
                let mut shape = Vec::with_capacity(rank[0] as usize);
                for _ in 0..rank[0] {
                    let mut d = [0u8; 4];
                    read_exact_or(&mut r, &mut d, "dims")?;
                    shape.push(u32::from_le_bytes(d) as usize);
                }
                let n: usize = shape.iter().product();
                let mut payload = vec![0u8; n * 4];
                read_exact_or(&mut r, &mut payload, "payload")?;
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                let t = Tensor::from_vec(&shape, data).map_err(|e| CheckpointError::Format {
                    field: "payload",
                    detail: e.to_string(),
                })?;
                ckpt.state.push((name, t));
            }
        }
    }
    Ok(ckpt)
}
