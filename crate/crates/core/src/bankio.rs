//! PSF bank container: flat binary (magic, version, K, S, psi grid as f64,
//! kernels as f32, trailing config digest) plus a human-readable TOML sidecar
//! of the generating optics config at `<path>.toml`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::{config_digest, OpticsConfig, PsfBank, CHANNELS};

const MAGIC: &[u8; 8] = b"CPPSFBK\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: OpticsConfig,
    energy_retained: Vec<f64>,
}

pub fn export_bank(bank: &PsfBank, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(bank.planes() as u32).to_le_bytes())?;
    f.write_all(&(bank.psf_size as u32).to_le_bytes())?;
    f.write_all(&(CHANNELS as u32).to_le_bytes())?;
    for &p in &bank.psi_grid {
        f.write_all(&p.to_le_bytes())?;
    }
    for &v in &bank.kernels {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    f.write_all(&bank.digest())?;
    f.flush()?;

    let sidecar = Sidecar {
        config: bank.config.clone(),
        energy_retained: bank.energy_retained.clone(),
    };
    let toml = toml::to_string_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(sidecar_path(path), toml)?;
    Ok(())
}

pub fn import_bank(path: &Path) -> Result<PsfBank> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a PSF bank file (bad magic)".into()));
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported bank version {}", version)));
    }
    let k = read_u32(&mut f)? as usize;
    let s = read_u32(&mut f)? as usize;
    let channels = read_u32(&mut f)? as usize;
    if channels != CHANNELS {
        return Err(Error::Format(format!("expected {} channels, got {}", CHANNELS, channels)));
    }
    if k < 2 || s % 2 == 0 {
        return Err(Error::Format(format!("implausible bank header: K={}, S={}", k, s)));
    }
    let mut psi_grid = vec![0.0f64; k];
    for p in &mut psi_grid {
        let mut b = [0u8; 8];
        f.read_exact(&mut b)?;
        *p = f64::from_le_bytes(b);
    }
    let mut kernels = vec![0.0f64; k * CHANNELS * s * s];
    for v in &mut kernels {
        let mut b = [0u8; 4];
        f.read_exact(&mut b)?;
        *v = f32::from_le_bytes(b) as f64;
    }
    let mut digest = [0u8; 32];
    f.read_exact(&mut digest)?;

    let sidecar_file = sidecar_path(path);
    let text = std::fs::read_to_string(&sidecar_file)
        .map_err(|e| Error::Format(format!("missing bank sidecar {}: {}", sidecar_file.display(), e)))?;
    let sidecar: Sidecar = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if config_digest(&sidecar.config) != digest {
        return Err(Error::Format("bank digest does not match sidecar config".into()));
    }
    Ok(PsfBank {
        psi_grid,
        kernels,
        psf_size: s,
        energy_retained: sidecar.energy_retained,
        config: sidecar.config,
    })
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    std::path::PathBuf::from(s)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
