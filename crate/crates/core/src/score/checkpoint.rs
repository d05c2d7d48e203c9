//! Network and adapter files.
//!
//! ```text
//! DRNN | u32 version | u32 n_convs | (u32 in, u32 out) * n_convs
//!      | u32 embed_dim | u32 n_params | f32 * n_params
//! DRLA | u32 version | [u8; 32] sha256 of the base DRNN bytes | u32 rank
//!      | u32 n_adapters | (u32 d, u32 k, u32 r) * n | f32 * n_entries
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::lora::LoraSet;
use super::net::{ConvScoreNet, CONV_DIMS, EMBED_DIM, LAYOUT};
use crate::error::{Error, Result};
use crate::io::read_u32;
use crate::rng::rng_from_seed;

pub const NET_MAGIC: &[u8; 4] = b"DRNN";
pub const LORA_MAGIC: &[u8; 4] = b"DRLA";
pub const CHECKPOINT_VERSION: u32 = 1;

fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "expected {:?} checkpoint",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    Ok(())
}

fn expect_u32(r: &mut impl Read, want: usize, what: &str) -> Result<()> {
    let got = read_u32(r)? as usize;
    if got != want {
        return Err(Error::Format(format!(
            "{what}: expected {want}, found {got}"
        )));
    }
    Ok(())
}

fn read_f32_vec(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn ensure_eof(r: &mut impl Read) -> Result<()> {
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(())
}

pub fn encode_net(net: &ConvScoreNet<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + LAYOUT.total * 4);
    out.extend_from_slice(NET_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(CONV_DIMS.len() as u32).to_le_bytes());
    for (cin, cout) in CONV_DIMS {
        out.extend_from_slice(&(cin as u32).to_le_bytes());
        out.extend_from_slice(&(cout as u32).to_le_bytes());
    }
    out.extend_from_slice(&(EMBED_DIM as u32).to_le_bytes());
    out.extend_from_slice(&(LAYOUT.total as u32).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_net(r: &mut impl Read) -> Result<ConvScoreNet<f32>> {
    expect_magic(r, NET_MAGIC)?;
    expect_u32(r, CONV_DIMS.len(), "convolution count")?;
    for (cin, cout) in CONV_DIMS {
        expect_u32(r, cin, "input channels")?;
        expect_u32(r, cout, "output channels")?;
    }
    expect_u32(r, EMBED_DIM, "embedding width")?;
    expect_u32(r, LAYOUT.total, "parameter count")?;
    let params = read_f32_vec(r, LAYOUT.total)?;
    ensure_eof(r)?;
    ConvScoreNet::from_params(params)
}

/// Content hash of the encoded network, used to tie adapters to a base.
pub fn net_digest(net: &ConvScoreNet<f32>) -> [u8; 32] {
    Sha256::digest(encode_net(net)).into()
}

pub fn save_net(path: impl AsRef<Path>, net: &ConvScoreNet<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_net(net))?;
    w.flush()?;
    Ok(())
}

pub fn load_net(path: impl AsRef<Path>) -> Result<ConvScoreNet<f32>> {
    decode_net(&mut BufReader::new(File::open(path)?))
}

pub fn encode_lora(lora: &LoraSet<f32>, base: &ConvScoreNet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(LORA_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&net_digest(base));
    out.extend_from_slice(&(lora.rank() as u32).to_le_bytes());
    out.extend_from_slice(&(lora.shapes().len() as u32).to_le_bytes());
    for s in lora.shapes() {
        for v in [s.d, s.k, s.r] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    for p in lora.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

/// Decodes adapters and checks that they were saved against `base`.
pub fn decode_lora(r: &mut impl Read, base: &ConvScoreNet<f32>) -> Result<LoraSet<f32>> {
    expect_magic(r, LORA_MAGIC)?;
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)?;
    if digest != net_digest(base) {
        return Err(Error::Format(
            "adapters were saved against a different base network".into(),
        ));
    }
    let rank = read_u32(r)? as usize;
    let mut lora = LoraSet::<f32>::new(rank, &mut rng_from_seed(0))?;
    expect_u32(r, lora.shapes().len(), "adapter count")?;
    for s in lora.shapes().to_vec() {
        expect_u32(r, s.d, "adapter rows")?;
        expect_u32(r, s.k, "adapter columns")?;
        expect_u32(r, s.r, "adapter rank")?;
    }
    let params = read_f32_vec(r, lora.len())?;
    ensure_eof(r)?;
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Format("non-finite adapter entry".into()));
    }
    lora.set_params(params)?;
    Ok(lora)
}

pub fn save_lora(
    path: impl AsRef<Path>,
    lora: &LoraSet<f32>,
    base: &ConvScoreNet<f32>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_lora(lora, base))?;
    w.flush()?;
    Ok(())
}

pub fn load_lora(path: impl AsRef<Path>, base: &ConvScoreNet<f32>) -> Result<LoraSet<f32>> {
    decode_lora(&mut BufReader::new(File::open(path)?), base)
}
