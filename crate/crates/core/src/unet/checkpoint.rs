//! Checkpoint files: `b"LFCK"`, the architecture fingerprint (u64), the
//! parameter count (u32), then per parameter a u32 name length, the UTF-8
//! name and a tensor record. Little-endian throughout; values stored as f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelState, UNetConfig};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LFCK";

const MAX_NAME_LEN: usize = 1 << 12;

pub fn write_checkpoint<T: Real, W: Write>(model: &ModelState<T>, mut out: W) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&model.fingerprint().to_le_bytes())?;
    out.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for (name, t) in model.names().iter().zip(model.params()) {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        t.cast::<f32>().write_to(&mut out)?;
    }
    Ok(())
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|e| Error::Format(format!("checkpoint truncated reading {what}: {e}")))
}

fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a checkpoint written for `cfg`; a fingerprint mismatch is a
/// format error.
pub fn read_checkpoint<T: Real, R: Read>(cfg: &UNetConfig, mut input: R) -> Result<ModelState<T>> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut fp = [0u8; 8];
    read_exact(&mut input, &mut fp, "fingerprint")?;
    let fingerprint = u64::from_le_bytes(fp);
    if fingerprint != cfg.fingerprint() {
        return Err(Error::Format(format!(
            "checkpoint fingerprint {fingerprint:016x} does not match config {:016x}",
            cfg.fingerprint()
        )));
    }
    let count = read_u32(&mut input, "parameter count")? as usize;
    let mut named = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u32(&mut input, "name length")? as usize;
        if len > MAX_NAME_LEN {
            return Err(Error::Format(format!("implausible parameter name length {len}")));
        }
        let mut name = vec![0u8; len];
        read_exact(&mut input, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let t = Tensor::<f32>::read_from(&mut input)?;
        named.push((name, t.cast::<T>()));
    }
    ModelState::from_params(cfg, named)
}

pub fn save_checkpoint<T: Real>(model: &ModelState<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_checkpoint(model, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(cfg: &UNetConfig, path: &Path) -> Result<ModelState<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(cfg, BufReader::new(file))
}
