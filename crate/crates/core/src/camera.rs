//! Camera models: the differentiable renderer the solver optimizes through,
//! and the non-differentiable reference acquisition simulator that produces
//! the coded captures acting as supervision.
//!
//! Both share the same layered forward model: blur the all-in-focus image
//! with every bank kernel, then per pixel linearly interpolate between the
//! two planes bracketing that pixel's defocus value (clipped to the bank
//! range). The acquisition simulator runs it at f64 on a denser plane grid
//! and adds seeded Gaussian noise.

use std::sync::Arc;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::optics::{build_psf_bank, OpticsConfig, PsfBank, CHANNELS};
use crate::scalar::Real;
use crate::tape::{BlurContext, Tape, Var};

/// Ground-truth pair: radiance image in [0,1] and a per-pixel defocus map.
/// The defocus map is stored unclipped; rendering clips to the bank range.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Vec<f64>,
    pub psi_map: Vec<f64>,
    pub h: usize,
    pub w: usize,
}

impl Scene {
    pub fn new(image: Vec<f64>, psi_map: Vec<f64>, h: usize, w: usize) -> Result<Scene> {
        if image.len() != CHANNELS * h * w || psi_map.len() != h * w {
            return Err(Error::Config(format!(
                "scene arrays do not match {}x{} (image {}, psi {})",
                h,
                w,
                image.len(),
                psi_map.len()
            )));
        }
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("scene image values must lie in [0, 1]".into()));
        }
        if psi_map.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("scene psi map must be finite".into()));
        }
        Ok(Scene { image, psi_map, h, w })
    }
}

/// How a coded image came to be; travels with the pixel data.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub renderer: String,
    pub bank_digest_hex: String,
    pub planes: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// A simulated (or captured) phase-coded image in [0,1].
#[derive(Debug, Clone)]
pub struct CodedImage {
    pub data: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub provenance: Provenance,
}

/// Per-pixel clamp of a defocus map to the configured range; in the
/// differentiable path the clamp has zero gradient outside and identity
/// inside.
pub fn clip_psi<T: Real>(tape: &mut Tape<T>, psi: Var, cfg: &OpticsConfig) -> Result<Var> {
    tape.clamp(psi, T::of_f64(cfg.psi_min), T::of_f64(cfg.psi_max))
}

/// Plain-array variant of [`clip_psi`].
pub fn clip_psi_map(psi: &[f64], cfg: &OpticsConfig) -> Vec<f64> {
    psi.iter().map(|&p| p.clamp(cfg.psi_min, cfg.psi_max)).collect()
}

/// The differentiable camera model for one image geometry: bank kernels are
/// pre-transformed once, then every render reuses them. Cheap to clone
/// (shared context) and safe to share across solves.
#[derive(Clone)]
pub struct CameraModel<T: Real> {
    ctx: Arc<BlurContext<T>>,
    bank_digest: [u8; 32],
}

impl<T: Real> CameraModel<T> {
    pub fn new(bank: &PsfBank, h: usize, w: usize) -> Result<Self> {
        if bank.planes() < 2 {
            return Err(Error::Config("camera model needs a bank with K >= 2".into()));
        }
        let ctx = BlurContext::new(&bank.psi_grid, &bank.kernels, CHANNELS, bank.psf_size, h, w)?;
        Ok(CameraModel {
            ctx: Arc::new(ctx),
            bank_digest: bank.digest(),
        })
    }

    pub fn h(&self) -> usize {
        self.ctx.h
    }

    pub fn w(&self) -> usize {
        self.ctx.w
    }

    pub fn psi_grid(&self) -> &[f64] {
        &self.ctx.psi_grid
    }

    pub fn bank_digest(&self) -> [u8; 32] {
        self.bank_digest
    }

    /// Differentiable render: image (3 x H x W) and psi map (H x W) on the
    /// tape -> coded image (3 x H x W). Differentiable wrt both inputs.
    pub fn render_differentiable(&self, tape: &mut Tape<T>, image: Var, psi: Var) -> Result<Var> {
        tape.layered_blur(image, psi, &self.ctx)
    }

    /// Same forward model without a tape (no gradients recorded).
    pub fn render_plain(&self, image: &[T], psi: &[T]) -> Vec<T> {
        self.ctx.render(image, psi)
    }
}

/// Reference acquisition simulation: layered render on a dense K-plane bank
/// built on the fly, additive Gaussian noise of std `noise_sigma` (seeded),
/// then clamp to [0,1]. No gradient graph is recorded. A denser grid than
/// the solver's bank (K >= 2x) is recommended.
pub fn render_acquisition(
    scene: &Scene,
    cfg: &OpticsConfig,
    k_acq: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<CodedImage> {
    let bank = build_psf_bank(cfg, k_acq)?;
    render_acquisition_with_bank(scene, &bank, noise_sigma, seed)
}

/// [`render_acquisition`] against a pre-built bank (banks are immutable and
/// reusable across scenes).
pub fn render_acquisition_with_bank(scene: &Scene, bank: &PsfBank, noise_sigma: f64, seed: u64) -> Result<CodedImage> {
    if noise_sigma < 0.0 {
        return Err(Error::Config("noise sigma must be >= 0".into()));
    }
    let model = CameraModel::<f64>::new(bank, scene.h, scene.w)?;
    let mut data = model.render_plain(&scene.image, &scene.psi_map);
    if noise_sigma > 0.0 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(CodedImage {
        data,
        h: scene.h,
        w: scene.w,
        provenance: Provenance {
            renderer: "layered-acquisition-v1".into(),
            bank_digest_hex: hex32(&bank.digest()),
            planes: bank.planes(),
            noise_sigma,
            seed,
        },
    })
}

/// Pixels at least `margin` from the image border and, when `strict`, also at
/// least `margin` from any defocus discontinuity of the ground-truth map
/// (the layered forward model bleeds blur across occlusion edges; those bands
/// are excluded from depth evaluation under the strict flag).
pub fn interior_mask(psi_gt: &[f64], h: usize, w: usize, margin: usize, strict: bool) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    for y in margin..h.saturating_sub(margin) {
        for x in margin..w.saturating_sub(margin) {
            mask[y * w + x] = true;
        }
    }
    if !strict {
        return mask;
    }
    const EDGE_STEP: f64 = 0.25;
    let mut edge = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = psi_gt[y * w + x];
            if x + 1 < w && (psi_gt[y * w + x + 1] - p).abs() > EDGE_STEP {
                edge[y * w + x] = true;
                edge[y * w + x + 1] = true;
            }
            if y + 1 < h && (psi_gt[(y + 1) * w + x] - p).abs() > EDGE_STEP {
                edge[y * w + x] = true;
                edge[(y + 1) * w + x] = true;
            }
        }
    }
    let m = margin as isize;
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !edge[y as usize * w + x as usize] {
                continue;
            }
            for dy in -m..=m {
                for dx in -m..=m {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        mask[yy as usize * w + xx as usize] = false;
                    }
                }
            }
        }
    }
    mask
}

pub fn hex32(digest: &[u8; 32]) -> String {
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}
