//! Generator parameter checkpoints: flat binary with version, kind tag,
//! config digest, and ordered f32 parameter blocks. The input code is not
//! stored; it regenerates identically from the config seed.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::generators::{Generator, GeneratorConfig, GeneratorKind};
use crate::scalar::Real;

const MAGIC: &[u8; 8] = b"CPGENCK\0";
const VERSION: u32 = 1;

pub fn save_checkpoint<T: Real>(gen: &Generator<T>, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&[kind_tag(gen.cfg.kind)])?;
    f.write_all(&gen.cfg.digest())?;
    f.write_all(&(gen.params().len() as u32).to_le_bytes())?;
    for p in gen.params() {
        f.write_all(&(p.numel() as u32).to_le_bytes())?;
        for v in &p.data {
            f.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Load parameters into a freshly built generator for `cfg`. The stored
/// digest and block shapes must match the config exactly.
pub fn load_checkpoint<T: Real>(cfg: &GeneratorConfig, h: usize, w: usize, path: &Path) -> Result<Generator<T>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a generator checkpoint (bad magic)".into()));
    }
    let mut v4 = [0u8; 4];
    f.read_exact(&mut v4)?;
    if u32::from_le_bytes(v4) != VERSION {
        return Err(Error::Format("unsupported checkpoint version".into()));
    }
    let mut tag = [0u8; 1];
    f.read_exact(&mut tag)?;
    if tag[0] != kind_tag(cfg.kind) {
        return Err(Error::Format("checkpoint generator kind mismatch".into()));
    }
    let mut digest = [0u8; 32];
    f.read_exact(&mut digest)?;
    if digest != cfg.digest() {
        return Err(Error::Format("checkpoint config digest mismatch".into()));
    }
    let mut gen = crate::generators::build_generator::<T>(cfg, h, w)?;
    f.read_exact(&mut v4)?;
    let n_blocks = u32::from_le_bytes(v4) as usize;
    if n_blocks != gen.params().len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameter blocks, config builds {}",
            n_blocks,
            gen.params().len()
        )));
    }
    for p in gen.params_mut() {
        f.read_exact(&mut v4)?;
        let n = u32::from_le_bytes(v4) as usize;
        if n != p.data.len() {
            return Err(Error::Format(format!(
                "parameter block {} has {} values, expected {}",
                p.name,
                n,
                p.data.len()
            )));
        }
        for v in &mut p.data {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)?;
            *v = T::of_f64(f32::from_le_bytes(b) as f64);
        }
    }
    Ok(gen)
}

fn kind_tag(kind: GeneratorKind) -> u8 {
    match kind {
        GeneratorKind::Dip => 0,
        GeneratorKind::Siren => 1,
        GeneratorKind::Pip => 2,
    }
}
