//! Differentiable losses (L2, SSIM, TV) and evaluation metrics (PSNR, SSIM,
//! depth RMSE in meters).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::OpticsConfig;
use crate::scalar::Real;
use crate::tape::{ConvCfg, PadMode, Tape, Var};
use crate::tensor::TensorData;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Reconstruction-loss schedule: L2 for iterations [0, t_switch), then
/// (1 - SSIM); TV on the defocus map applies throughout with weight
/// `tv_weight`. With `ssim_additive` the second phase keeps the L2 term
/// alongside SSIM instead of replacing it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossSchedule {
    pub t_switch: usize,
    pub tv_weight: f64,
    pub ssim_additive: bool,
}

impl Default for LossSchedule {
    fn default() -> Self {
        LossSchedule {
            t_switch: 500,
            tv_weight: 0.0,
            ssim_additive: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    L2,
    Ssim,
}

impl LossSchedule {
    pub fn phase(&self, iter: usize) -> Phase {
        if iter < self.t_switch {
            Phase::L2
        } else {
            Phase::Ssim
        }
    }
}

/// Mean squared difference.
pub fn mse_loss<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?}", tape.value(a).shape()),
            format!("{:?}", tape.value(b).shape()),
        ));
    }
    let d = tape.sub(a, b)?;
    let d2 = tape.mul(d, d)?;
    tape.mean(d2)
}

/// Mean local SSIM over valid window positions and channels, for images
/// nominally in [0,1]: 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2,
/// C2 = 0.03^2. Differentiable end to end.
pub fn ssim<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let shape = tape.value(a).shape().to_vec();
    if shape != tape.value(b).shape() {
        return Err(Error::shape(
            "ssim",
            format!("{:?}", &shape),
            format!("{:?}", tape.value(b).shape()),
        ));
    }
    let (c, h, w) = match shape[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("ssim", "C x H x W", format!("{:?}", &shape))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "ssim: image {}x{} smaller than the {}x{} window",
            h, w, SSIM_WINDOW, SSIM_WINDOW
        )));
    }
    let window = tape.constant(gaussian_window::<T>());
    let cfg = ConvCfg {
        stride: 1,
        pad: PadMode::Valid,
    };
    let c1 = T::of_f64(SSIM_C1);
    let c2 = T::of_f64(SSIM_C2);
    let mut acc: Option<Var> = None;
    for ci in 0..c {
        let xa = tape.slice0(a, ci, 1)?;
        let xb = tape.slice0(b, ci, 1)?;
        let mu1 = tape.conv2d(xa, window, cfg)?;
        let mu2 = tape.conv2d(xb, window, cfg)?;
        let a2 = tape.mul(xa, xa)?;
        let b2 = tape.mul(xb, xb)?;
        let ab = tape.mul(xa, xb)?;
        let e_a2 = tape.conv2d(a2, window, cfg)?;
        let e_b2 = tape.conv2d(b2, window, cfg)?;
        let e_ab = tape.conv2d(ab, window, cfg)?;
        let mu1sq = tape.mul(mu1, mu1)?;
        let mu2sq = tape.mul(mu2, mu2)?;
        let mu12 = tape.mul(mu1, mu2)?;
        let var1 = tape.sub(e_a2, mu1sq)?;
        let var2 = tape.sub(e_b2, mu2sq)?;
        let cov = tape.sub(e_ab, mu12)?;

        let two_mu12 = tape.affine(mu12, T::of_f64(2.0), c1)?;
        let two_cov = tape.affine(cov, T::of_f64(2.0), c2)?;
        let num = tape.mul(two_mu12, two_cov)?;
        let musum = tape.add(mu1sq, mu2sq)?;
        let musum = tape.add_scalar(musum, c1)?;
        let varsum = tape.add(var1, var2)?;
        let varsum = tape.add_scalar(varsum, c2)?;
        let den = tape.mul(musum, varsum)?;
        let map = tape.div(num, den)?;
        let m = tape.mean(map)?;
        acc = Some(match acc {
            None => m,
            Some(prev) => tape.add(prev, m)?,
        });
    }
    tape.mul_scalar(acc.expect("c >= 1"), T::of_f64(1.0 / c as f64))
}

/// 1 - SSIM, the phase-2 reconstruction loss.
pub fn ssim_loss<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let s = ssim(tape, a, b)?;
    let neg = tape.mul_scalar(s, -T::one())?;
    tape.add_scalar(neg, T::one())
}

/// Smoothed anisotropic total variation of the defocus map.
pub fn tv_loss<T: Real>(tape: &mut Tape<T>, psi: Var) -> Result<Var> {
    tape.total_variation(psi, T::of_f64(1e-6))
}

fn gaussian_window<T: Real>() -> TensorData<T> {
    let n = SSIM_WINDOW;
    let mean = (n / 2) as f64;
    let mut g1 = vec![0.0f64; n];
    let mut sum = 0.0;
    for (i, v) in g1.iter_mut().enumerate() {
        *v = (-(i as f64 - mean).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut g1 {
        *v /= sum;
    }
    let mut w = vec![T::zero(); n * n];
    for y in 0..n {
        for x in 0..n {
            w[y * n + x] = T::of_f64(g1[y] * g1[x]);
        }
    }
    TensorData::new(vec![1, 1, n, n], w)
}

// ── Metrics (plain f64, no tape) ─────────────────────────────────────

/// 10*log10(peak^2 / MSE), capped at the 99 dB reporting sentinel (which is
/// also the exact-match value).
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return 99.0;
    }
    (10.0 * (peak * peak / mse).log10()).min(99.0)
}

/// Plain-array SSIM with the same window/constants as the differentiable
/// path (valid positions, channel average).
pub fn ssim_metric(a: &[f64], b: &[f64], channels: usize, h: usize, w: usize) -> f64 {
    assert_eq!(a.len(), channels * h * w);
    assert_eq!(a.len(), b.len());
    let n = SSIM_WINDOW;
    assert!(h >= n && w >= n);
    let win = {
        let t: TensorData<f64> = gaussian_window();
        t.data().to_vec()
    };
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut total = 0.0;
    for c in 0..channels {
        let pa = &a[c * h * w..(c + 1) * h * w];
        let pb = &b[c * h * w..(c + 1) * h * w];
        let mut acc = 0.0;
        for oy in 0..ho {
            for ox in 0..wo {
                let (mut m1, mut m2, mut e11, mut e22, mut e12) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..n {
                    for kx in 0..n {
                        let g = win[ky * n + kx];
                        let va = pa[(oy + ky) * w + ox + kx];
                        let vb = pb[(oy + ky) * w + ox + kx];
                        m1 += g * va;
                        m2 += g * vb;
                        e11 += g * va * va;
                        e22 += g * vb * vb;
                        e12 += g * va * vb;
                    }
                }
                let (v1, v2, cv) = (e11 - m1 * m1, e22 - m2 * m2, e12 - m1 * m2);
                acc += ((2.0 * m1 * m2 + SSIM_C1) * (2.0 * cv + SSIM_C2))
                    / ((m1 * m1 + m2 * m2 + SSIM_C1) * (v1 + v2 + SSIM_C2));
            }
        }
        total += acc / (ho * wo) as f64;
    }
    total / channels as f64
}

/// Depth errors in meters between two defocus maps. Both maps are clipped to
/// the system's physical range before conversion, per the evaluation
/// protocol. Returns (rmse_m, mae_m).
pub fn depth_errors_m(
    psi_pred: &[f64],
    psi_gt: &[f64],
    cfg: &OpticsConfig,
    mask: Option<&[bool]>,
) -> Result<(f64, f64)> {
    assert_eq!(psi_pred.len(), psi_gt.len());
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut n = 0usize;
    for i in 0..psi_pred.len() {
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        let zp = cfg.psi_to_depth(psi_pred[i].clamp(cfg.psi_min, cfg.psi_max))?;
        let zg = cfg.psi_to_depth(psi_gt[i].clamp(cfg.psi_min, cfg.psi_max))?;
        let d = zp - zg;
        se += d * d;
        ae += d.abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("depth metric over an empty mask".into()));
    }
    Ok(((se / n as f64).sqrt(), ae / n as f64))
}

/// RMSE between defocus maps (clipped to the system range), in psi units.
pub fn psi_rmse(psi_pred: &[f64], psi_gt: &[f64], cfg: &OpticsConfig, mask: Option<&[bool]>) -> Result<f64> {
    assert_eq!(psi_pred.len(), psi_gt.len());
    let mut se = 0.0;
    let mut n = 0usize;
    for i in 0..psi_pred.len() {
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        let d = psi_pred[i].clamp(cfg.psi_min, cfg.psi_max) - psi_gt[i].clamp(cfg.psi_min, cfg.psi_max);
        se += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("psi metric over an empty mask".into()));
    }
    Ok((se / n as f64).sqrt())
}

/// Image and depth scores of one reconstruction against ground truth.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalScores {
    pub psnr_db: f64,
    pub ssim: f64,
    pub depth_rmse_m: f64,
    pub depth_mae_m: f64,
    pub psi_rmse: f64,
}

/// The metrics JSON payload every run emits. `wall_time_s` is provenance and
/// is excluded from determinism comparisons.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub depth_rmse_m: f64,
    pub depth_mae_m: f64,
    pub psi_rmse: f64,
    pub loss_history: Vec<f64>,
    pub config_digest: String,
    pub seed: u64,
    pub wall_time_s: f64,
}
