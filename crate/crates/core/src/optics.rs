//! Two-ring phase-coded aperture model: pupil-plane PSF synthesis via scalar
//! Fourier optics, the defocus/depth mapping, and the frozen PSF bank.
//!
//! Defocus is expressed by the dimensionless parameter psi:
//!
//! ```text
//! psi = (pi R^2 / lambda) * (1/z0 - 1/z_n)
//! ```
//!
//! zero at the in-focus distance z_n, positive for closer objects. The pupil
//! field for a channel is
//!
//! ```text
//! P(rho) = circ(rho) * exp(i * phi_mask(rho)) * exp(i * psi_c * rho^2)
//! ```
//!
//! with psi_c = psi_ref * lambda_ref / lambda_c (the reference channel is
//! green) and ring phases scaled by lambda_design / lambda_c. The PSF is
//! |DFT(P)|^2, resampled to the sensor grid as described at [`SamplingPlan`].

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::par;

pub const CHANNELS: usize = 3;

/// One annular phase ring: radii normalized to the unit pupil, phase in
/// radians at the design wavelength.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Ring {
    pub r_inner: f64,
    pub r_outer: f64,
    pub phase_rad: f64,
}

/// Everything the optical forward model needs. Distances in meters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OpticsConfig {
    /// Exit-pupil radius R.
    pub aperture_radius_m: f64,
    /// Focal length f.
    pub focal_length_m: f64,
    /// Nominal in-focus object distance z_n.
    pub focus_distance_m: f64,
    /// Per-channel illumination wavelengths (R, G, B).
    pub wavelengths_m: [f64; 3],
    /// Wavelength the mask phases are specified at.
    pub design_wavelength_m: f64,
    /// Annular phase rings (disjoint, ordered, radii in [0, 1]).
    pub rings: Vec<Ring>,
    /// Pupil/DFT grid size M.
    pub pupil_samples: usize,
    /// Spatial kernel extent S (odd), in sensor pixels.
    pub psf_size: usize,
    /// Sensor pixel pitch.
    pub pixel_pitch_m: f64,
    pub psi_min: f64,
    pub psi_max: f64,
    /// Odd fine-to-sensor binning factor; None picks the smallest odd factor
    /// that keeps the pupil within 80% of the grid.
    pub bin: Option<usize>,
}

impl Default for OpticsConfig {
    /// Convenience defaults in the f/2, 4.5 um-pixel regime with 71x71
    /// kernels. The published system's exact mask is not public; these values
    /// are placeholders, not claims about any hardware.
    fn default() -> Self {
        OpticsConfig {
            aperture_radius_m: 4.0e-3,
            focal_length_m: 16.0e-3,
            focus_distance_m: 1.1,
            wavelengths_m: [610e-9, 530e-9, 470e-9],
            design_wavelength_m: 530e-9,
            rings: default_rings(),
            pupil_samples: 768,
            psf_size: 71,
            pixel_pitch_m: 4.5e-6,
            psi_min: -4.0,
            psi_max: 10.0,
            bin: None,
        }
    }
}

/// Default two-ring mask: whole-wave phase steps at the design wavelength
/// (invisible to green, opposite effective phases for red and blue), which
/// pushes the three channels' sharpest focus to defocus values about two
/// units apart — the depth cue. A stand-in for the unpublished fabricated
/// mask.
pub fn default_rings() -> Vec<Ring> {
    vec![
        Ring {
            r_inner: 0.60,
            r_outer: 0.85,
            phase_rad: std::f64::consts::TAU,
        },
        Ring {
            r_inner: 0.85,
            r_outer: 1.00,
            phase_rad: 3.0 * std::f64::consts::TAU,
        },
    ]
}

impl OpticsConfig {
    /// Desk-scale profile used by the synthetic suite: f/5 at 3 um pixels
    /// gives ~0.58 px of blur-radius growth per unit of defocus (resolvable
    /// at 256x128), with 31x31 kernels retaining essentially all energy.
    pub fn desk() -> Self {
        OpticsConfig {
            aperture_radius_m: 2.5e-3,
            focal_length_m: 25.0e-3,
            focus_distance_m: 1.0,
            wavelengths_m: [610e-9, 530e-9, 470e-9],
            design_wavelength_m: 530e-9,
            rings: default_rings(),
            pupil_samples: 768,
            psf_size: 31,
            pixel_pitch_m: 3.0e-6,
            psi_min: -4.0,
            psi_max: 10.0,
            bin: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.to_string())) };
        c(self.aperture_radius_m > 0.0, "aperture radius must be positive")?;
        c(self.focal_length_m > 0.0, "focal length must be positive")?;
        c(
            self.focus_distance_m > self.focal_length_m,
            "focus distance must exceed the focal length",
        )?;
        c(
            self.wavelengths_m.iter().all(|&l| l > 0.0) && self.design_wavelength_m > 0.0,
            "wavelengths must be positive",
        )?;
        c(self.psf_size % 2 == 1, "psf_size must be odd")?;
        c(
            self.pupil_samples >= 4 * self.psf_size,
            "pupil_samples must be at least 4 * psf_size",
        )?;
        c(self.pixel_pitch_m > 0.0, "pixel pitch must be positive")?;
        c(
            self.psi_min < 0.0 && self.psi_max > 0.0,
            "defocus range must contain a focus point (psi_min < 0 < psi_max)",
        )?;
        if let Some(b) = self.bin {
            c(b % 2 == 1, "bin factor must be odd")?;
        }
        let mut prev = 0.0f64;
        for r in &self.rings {
            c(
                r.r_inner >= 0.0 && r.r_outer <= 1.0 && r.r_inner < r.r_outer,
                "ring radii must satisfy 0 <= r_inner < r_outer <= 1",
            )?;
            c(r.r_inner >= prev, "rings must be disjoint and ordered")?;
            prev = r.r_outer;
        }
        Ok(())
    }

    /// Image-plane distance for an object at the focus distance.
    pub fn image_distance_m(&self) -> f64 {
        1.0 / (1.0 / self.focal_length_m - 1.0 / self.focus_distance_m)
    }

    /// Reference wavelength (green channel) used for the psi grid.
    pub fn lambda_ref(&self) -> f64 {
        self.wavelengths_m[1]
    }

    /// Object distance for a reference-channel defocus value.
    /// Errors when psi is so negative the object would sit behind the camera.
    pub fn psi_to_depth(&self, psi: f64) -> Result<f64> {
        let r = self.aperture_radius_m;
        let inv = psi * self.lambda_ref() / (std::f64::consts::PI * r * r) + 1.0 / self.focus_distance_m;
        if inv <= 0.0 {
            return Err(Error::Config(format!(
                "psi = {} maps outside the imaging model (1/z0 = {} <= 0)",
                psi, inv
            )));
        }
        Ok(1.0 / inv)
    }

    /// Reference-channel defocus for an object distance. Not clipped to
    /// [psi_min, psi_max]; clipping is the camera model's job.
    pub fn depth_to_psi(&self, z0_m: f64) -> Result<f64> {
        if z0_m <= 0.0 {
            return Err(Error::Config(format!("object distance must be positive, got {}", z0_m)));
        }
        let r = self.aperture_radius_m;
        Ok(std::f64::consts::PI * r * r / self.lambda_ref() * (1.0 / z0_m - 1.0 / self.focus_distance_m))
    }

    /// Far-field asymptote of depth_to_psi as z0 -> infinity.
    pub fn psi_at_infinity(&self) -> f64 {
        let r = self.aperture_radius_m;
        -std::f64::consts::PI * r * r / (self.lambda_ref() * self.focus_distance_m)
    }

    /// Config with every ring phase multiplied by (1 + factor); all else equal.
    pub fn perturb_mask(&self, factor: f64) -> OpticsConfig {
        let mut cfg = self.clone();
        for r in &mut cfg.rings {
            r.phase_rad *= 1.0 + factor;
        }
        cfg
    }

    /// Mask phase [rad] for the given channel at normalized radius rho:
    /// ring phase scaled by lambda_design / lambda_channel inside a ring,
    /// zero elsewhere and outside the unit pupil.
    pub fn mask_phase_at(&self, channel: usize, rho: f64) -> f64 {
        if rho > 1.0 {
            return 0.0;
        }
        let scale = self.design_wavelength_m / self.wavelengths_m[channel];
        for ring in &self.rings {
            if rho >= ring.r_inner && rho <= ring.r_outer {
                return ring.phase_rad * scale;
            }
        }
        0.0
    }

    /// Full pupil-grid phase map for a channel (pupil_samples x pupil_samples).
    pub fn mask_phase(&self, channel: usize) -> Vec<f64> {
        let m = self.pupil_samples;
        let plan = self.sampling_plan(channel);
        let mut out = vec![0.0; m * m];
        let half = m as f64 / 2.0;
        for iy in 0..m {
            for ix in 0..m {
                let y = (iy as f64 - half) / plan.pupil_radius_samples;
                let x = (ix as f64 - half) / plan.pupil_radius_samples;
                let rho = (x * x + y * y).sqrt();
                if rho <= 1.0 {
                    out[iy * m + ix] = self.mask_phase_at(channel, rho);
                }
            }
        }
        out
    }

    /// Sampling geometry tying the DFT grid to the sensor grid for a channel.
    pub fn sampling_plan(&self, channel: usize) -> SamplingPlan {
        let m = self.pupil_samples;
        let lambda = self.wavelengths_m[channel];
        let z_img = self.image_distance_m();
        let bin = self.bin.unwrap_or_else(|| {
            // Smallest odd bin with the pupil inside 80% of the grid.
            let mut b = 1usize;
            loop {
                let fill = 2.0 * self.aperture_radius_m * self.pixel_pitch_m / (lambda * z_img * b as f64);
                if fill <= 0.8 {
                    return b;
                }
                b += 2;
            }
        });
        // Fraunhofer scaling: a pupil sampled at pitch dp maps to an image
        // plane sampled at lambda*z_img/(M*dp). Choosing
        //   dp = lambda * z_img * bin / (M * pixel_pitch)
        // makes the fine image pitch exactly pixel_pitch / bin, so summing
        // bin x bin blocks lands the PSF on the sensor grid with no
        // interpolation.
        let pupil_pitch = lambda * z_img * bin as f64 / (m as f64 * self.pixel_pitch_m);
        SamplingPlan {
            bin,
            pupil_pitch_m: pupil_pitch,
            fine_pitch_m: self.pixel_pitch_m / bin as f64,
            pupil_radius_samples: self.aperture_radius_m / pupil_pitch,
        }
    }
}

/// Derived sampling quantities for one channel (see [`OpticsConfig::sampling_plan`]).
#[derive(Debug, Clone, Copy)]
pub struct SamplingPlan {
    /// Odd fine-to-sensor binning factor.
    pub bin: usize,
    /// Pupil-plane sample pitch.
    pub pupil_pitch_m: f64,
    /// Image-plane pitch of the unbinned PSF (= pixel_pitch / bin).
    pub fine_pitch_m: f64,
    /// Pupil radius in grid samples.
    pub pupil_radius_samples: f64,
}

/// Fine-grid PSF intensity (fftshifted, optical axis at (M/2, M/2)),
/// unnormalized. Exposed for diagnostics and the diffraction-pattern tests.
pub fn psf_intensity_fine(cfg: &OpticsConfig, psi_ref: f64, channel: usize) -> (Vec<f64>, usize, SamplingPlan) {
    let m = cfg.pupil_samples;
    let plan = cfg.sampling_plan(channel);
    let psi_c = psi_ref * cfg.lambda_ref() / cfg.wavelengths_m[channel];
    let half = m as f64 / 2.0;
    let mut pupil = vec![Complex::<f64>::default(); m * m];
    for iy in 0..m {
        let y = (iy as f64 - half) / plan.pupil_radius_samples;
        for ix in 0..m {
            let x = (ix as f64 - half) / plan.pupil_radius_samples;
            let r2 = x * x + y * y;
            if r2 <= 1.0 {
                let phase = cfg.mask_phase_at(channel, r2.sqrt()) + psi_c * r2;
                pupil[iy * m + ix] = Complex::from_polar(1.0, phase);
            }
        }
    }
    let fft = Fft2::<f64>::new(m, m);
    fft.forward(&mut pupil);
    let mut intensity = vec![0.0; m * m];
    let h = m / 2;
    for iy in 0..m {
        for ix in 0..m {
            let sy = (iy + h) % m;
            let sx = (ix + h) % m;
            intensity[iy * m + ix] = pupil[sy * m + sx].norm_sqr();
        }
    }
    (intensity, m, plan)
}

/// One S x S sensor-grid kernel: fine intensity, cropped to S*bin fine
/// samples about the axis, box-binned to the pixel pitch, normalized to
/// sum 1. Returns the kernel and the pre-normalization energy fraction
/// retained by the crop window.
pub fn psf(cfg: &OpticsConfig, psi_ref: f64, channel: usize) -> Result<(Vec<f64>, f64)> {
    let s = cfg.psf_size;
    let m = cfg.pupil_samples;
    let plan = cfg.sampling_plan(channel);
    let b = plan.bin;
    if s * b > m {
        return Err(Error::Config(format!(
            "pupil grid {} too small for psf_size {} at bin {} (needs >= {})",
            m,
            s,
            b,
            s * b
        )));
    }
    let (fine, _, _) = psf_intensity_fine(cfg, psi_ref, channel);
    let total: f64 = fine.iter().sum();
    let center = m / 2;
    let half_span = (s * b) / 2; // s*b odd
    let mut kernel = vec![0.0; s * s];
    let mut window = 0.0;
    for oy in 0..s {
        for ox in 0..s {
            let mut acc = 0.0;
            // Sensor pixel (oy, ox) integrates a bin x bin block centered at
            // the fine sample center + (oy - s/2)*b.
            let fy = center + oy * b - half_span;
            let fx = center + ox * b - half_span;
            for by in 0..b {
                for bx in 0..b {
                    acc += fine[(fy + by) * m + (fx + bx)];
                }
            }
            kernel[oy * s + ox] = acc;
            window += acc;
        }
    }
    if window <= 0.0 || total <= 0.0 {
        return Err(Error::Numerics("psf: degenerate intensity".into()));
    }
    for v in &mut kernel {
        *v /= window;
    }
    Ok((kernel, window / total))
}

/// Frozen bank of defocus- and channel-dependent blur kernels on an ascending
/// psi grid. Immutable after construction; safely shared across solves.
#[derive(Debug, Clone)]
pub struct PsfBank {
    pub psi_grid: Vec<f64>,
    /// K x 3 x S x S, row-major.
    pub kernels: Vec<f64>,
    pub psf_size: usize,
    /// Pre-crop energy fraction retained, per (plane, channel).
    pub energy_retained: Vec<f64>,
    /// Generating config (with any phase perturbation already applied).
    pub config: OpticsConfig,
}

impl PsfBank {
    pub fn planes(&self) -> usize {
        self.psi_grid.len()
    }

    pub fn kernel(&self, plane: usize, channel: usize) -> &[f64] {
        let ss = self.psf_size * self.psf_size;
        let i = (plane * CHANNELS + channel) * ss;
        &self.kernels[i..i + ss]
    }

    /// SHA-256 over the canonical byte encoding of the generating config.
    pub fn digest(&self) -> [u8; 32] {
        config_digest(&self.config)
    }

    /// Lowest pre-crop energy fraction across all kernels.
    pub fn min_energy_retained(&self) -> f64 {
        self.energy_retained.iter().copied().fold(1.0, f64::min)
    }
}

/// Build a bank on a uniform K-point grid spanning [psi_min, psi_max].
pub fn build_psf_bank(cfg: &OpticsConfig, k: usize) -> Result<PsfBank> {
    if k < 2 {
        return Err(Error::Config(format!("bank needs K >= 2 planes, got {}", k)));
    }
    let grid: Vec<f64> = (0..k)
        .map(|i| cfg.psi_min + (cfg.psi_max - cfg.psi_min) * i as f64 / (k - 1) as f64)
        .collect();
    build_psf_bank_on_grid(cfg, &grid)
}

/// Build a bank on an explicit ascending psi grid.
pub fn build_psf_bank_on_grid(cfg: &OpticsConfig, grid: &[f64]) -> Result<PsfBank> {
    cfg.validate()?;
    if grid.len() < 2 {
        return Err(Error::Config("bank needs at least 2 planes".into()));
    }
    if grid.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::Config("psi grid must be strictly increasing".into()));
    }
    let k = grid.len();
    let s = cfg.psf_size;
    let results: Vec<Result<(Vec<f64>, f64)>> = par::map_indexed(k * CHANNELS, |i| {
        let (plane, channel) = (i / CHANNELS, i % CHANNELS);
        psf(cfg, grid[plane], channel)
    });
    let mut kernels = Vec::with_capacity(k * CHANNELS * s * s);
    let mut energy = Vec::with_capacity(k * CHANNELS);
    for r in results {
        let (ker, e) = r?;
        kernels.extend_from_slice(&ker);
        energy.push(e);
    }
    Ok(PsfBank {
        psi_grid: grid.to_vec(),
        kernels,
        psf_size: s,
        energy_retained: energy,
        config: cfg.clone(),
    })
}

/// Defocus value at which each channel's kernel is sharpest (minimum second
/// moment about its centroid), scanned at `step` over the configured range.
/// The spread of these values across channels is the depth-cue mechanism.
pub fn sharpest_psi_per_channel(cfg: &OpticsConfig, step: f64) -> Result<[f64; 3]> {
    let n = ((cfg.psi_max - cfg.psi_min) / step).round() as usize + 1;
    let mut best = [(f64::INFINITY, 0.0); 3];
    let moments: Vec<Result<(usize, f64, f64)>> = par::map_indexed(n * CHANNELS, |i| {
        let (gi, channel) = (i / CHANNELS, i % CHANNELS);
        let psi = cfg.psi_min + gi as f64 * step;
        let (ker, _) = psf(cfg, psi, channel)?;
        Ok((channel, psi, kernel_second_moment(&ker, cfg.psf_size)))
    });
    for r in moments {
        let (channel, psi, m2) = r?;
        if m2 < best[channel].0 {
            best[channel] = (m2, psi);
        }
    }
    Ok([best[0].1, best[1].1, best[2].1])
}

/// Second moment of a normalized kernel about its centroid, in pixel^2.
pub fn kernel_second_moment(kernel: &[f64], s: usize) -> f64 {
    let (mut cx, mut cy) = (0.0, 0.0);
    for y in 0..s {
        for x in 0..s {
            let v = kernel[y * s + x];
            cy += v * y as f64;
            cx += v * x as f64;
        }
    }
    let mut m2 = 0.0;
    for y in 0..s {
        for x in 0..s {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            m2 += kernel[y * s + x] * (dy * dy + dx * dx);
        }
    }
    m2
}

/// Canonical config digest: SHA-256 over the little-endian bit patterns of
/// every field in declaration order.
pub fn config_digest(cfg: &OpticsConfig) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    let mut f = |v: f64| h.update(v.to_bits().to_le_bytes());
    f(cfg.aperture_radius_m);
    f(cfg.focal_length_m);
    f(cfg.focus_distance_m);
    for &l in &cfg.wavelengths_m {
        f(l);
    }
    f(cfg.design_wavelength_m);
    for r in &cfg.rings {
        f(r.r_inner);
        f(r.r_outer);
        f(r.phase_rad);
    }
    f(cfg.psi_min);
    f(cfg.psi_max);
    f(cfg.pixel_pitch_m);
    h.update((cfg.pupil_samples as u64).to_le_bytes());
    h.update((cfg.psf_size as u64).to_le_bytes());
    h.update((cfg.bin.unwrap_or(0) as u64).to_le_bytes());
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psi_depth_round_trip() {
        let cfg = OpticsConfig::desk();
        for &psi in &[-4.0, -1.3, 0.0, 2.7, 10.0] {
            let z = cfg.psi_to_depth(psi).unwrap();
            let back = cfg.depth_to_psi(z).unwrap();
            assert!((back - psi).abs() < 1e-12 * psi.abs().max(1.0));
        }
        assert!((cfg.psi_to_depth(0.0).unwrap() - cfg.focus_distance_m).abs() < 1e-15);
        assert!((cfg.depth_to_psi(cfg.focus_distance_m).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn psi_monotone_in_inverse_depth() {
        let cfg = OpticsConfig::desk();
        let mut last = f64::NEG_INFINITY;
        for z in [10.0, 3.0, 1.5, 1.0, 0.8, 0.6] {
            let psi = cfg.depth_to_psi(z).unwrap();
            assert!(psi > last);
            last = psi;
        }
    }

    #[test]
    fn far_field_asymptote() {
        let cfg = OpticsConfig::desk();
        let psi_far = cfg.depth_to_psi(1e9).unwrap();
        assert!((psi_far - cfg.psi_at_infinity()).abs() < 1e-6);
    }

    #[test]
    fn out_of_model_depth_errors() {
        let cfg = OpticsConfig::desk();
        // More negative than the far-field asymptote: no physical object.
        let bad = cfg.psi_at_infinity() * 1.5;
        assert!(cfg.psi_to_depth(bad).is_err());
        assert!(cfg.depth_to_psi(0.0).is_err());
    }

    #[test]
    fn mask_phase_scaling() {
        let cfg = OpticsConfig::desk();
        // At the design wavelength (green), the ring phase is exact.
        let rho_in_second_ring = 0.9;
        let got = cfg.mask_phase_at(1, rho_in_second_ring);
        assert!((got - 3.0 * std::f64::consts::TAU).abs() < 1e-12);
        // Empty ring list: clear aperture everywhere.
        let mut clear = cfg.clone();
        clear.rings.clear();
        for rho in [0.0, 0.5, 0.99] {
            assert_eq!(clear.mask_phase_at(0, rho), 0.0);
        }
        // Halved wavelength doubles the phase; equality is checked through
        // the complex exponential to make wrapping explicit.
        let mut half = cfg.clone();
        half.wavelengths_m[2] = cfg.design_wavelength_m / 2.0;
        half.rings = vec![Ring { r_inner: 0.5, r_outer: 0.9, phase_rad: std::f64::consts::PI }];
        let p = half.mask_phase_at(2, 0.7);
        let direct = Complex::from_polar(1.0, 2.0 * std::f64::consts::PI);
        let via_phase = Complex::from_polar(1.0, p);
        assert!((direct - via_phase).norm() < 1e-12);
    }

    #[test]
    fn perturb_mask_scales_phases_only() {
        let cfg = OpticsConfig::desk();
        let same = cfg.perturb_mask(0.0);
        assert_eq!(cfg, same);
        let p = cfg.perturb_mask(0.10);
        assert!((p.rings[0].phase_rad - 1.1 * std::f64::consts::TAU).abs() < 1e-12);
        assert!((p.rings[1].phase_rad - 3.3 * std::f64::consts::TAU).abs() < 1e-12);
        assert_eq!(p.aperture_radius_m, cfg.aperture_radius_m);
    }

    #[test]
    fn config_validation_catches_bad_rings() {
        let mut cfg = OpticsConfig::desk();
        cfg.rings = vec![
            Ring { r_inner: 0.2, r_outer: 0.6, phase_rad: 1.0 },
            Ring { r_inner: 0.5, r_outer: 0.9, phase_rad: 1.0 },
        ];
        assert!(cfg.validate().is_err());
        let mut cfg2 = OpticsConfig::desk();
        cfg2.psf_size = 30;
        assert!(cfg2.validate().is_err());
    }

    #[test]
    fn digest_changes_with_config() {
        let cfg = OpticsConfig::desk();
        let d1 = config_digest(&cfg);
        assert_eq!(d1, config_digest(&cfg.clone()));
        let d2 = config_digest(&cfg.perturb_mask(0.01));
        assert_ne!(d1, d2);
    }
}
