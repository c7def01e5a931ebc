//! Differentiable layered-defocus rendering.
//!
//! Forward: blur the image with every plane kernel (true convolution, reflect
//! padding, computed in the frequency domain against pre-transformed kernels),
//! then per pixel linearly interpolate between the two planes bracketing that
//! pixel's defocus value. Differentiable wrt the image (through every
//! convolution) and wrt the defocus map (gradient (B_hi - B_lo)/delta-psi,
//! piecewise constant, zero outside the clamp range). Kernels are frozen: no
//! gradient flows into them.

use std::sync::Arc;

use num_complex::Complex;

use super::conv::{fold_pad_adjoint, pad_chw, PadMode};
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::fft::{fast_len, Fft2};
use crate::par;
use crate::scalar::Real;
use crate::tensor::{shape_str, TensorData};

/// Frozen per-(plane, channel) blur kernels prepared for a fixed image size.
/// Immutable and shareable across iterations and solves.
pub struct BlurContext<T: Real> {
    pub psi_grid: Vec<f64>,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    kernel_size: usize,
    pad: usize,
    fft: Fft2<T>,
    /// FFT of each kernel embedded at the origin: (plane*channels + channel).
    khat: Vec<Vec<Complex<T>>>,
}

impl<T: Real> BlurContext<T> {
    /// `kernels` is K x channels x s x s, row-major, paired with the ascending
    /// `psi_grid` of length K >= 2.
    pub fn new(psi_grid: &[f64], kernels: &[f64], channels: usize, kernel_size: usize, h: usize, w: usize) -> Result<Self> {
        let k = psi_grid.len();
        if k < 2 {
            return Err(Error::Config(format!("layered blur needs >= 2 planes, got {}", k)));
        }
        if psi_grid.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Config("psi grid must be strictly increasing".into()));
        }
        let s = kernel_size;
        if s % 2 == 0 || kernels.len() != k * channels * s * s {
            return Err(Error::Config(format!(
                "kernel array must be K x C x s x s with odd s, got len {} for K={} C={} s={}",
                kernels.len(),
                k,
                channels,
                s
            )));
        }
        let pad = s / 2;
        if pad >= h || pad >= w {
            return Err(Error::Config(format!(
                "image {}x{} too small for reflect padding {}",
                h, w, pad
            )));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let ny = fast_len(hp + s - 1);
        let nx = fast_len(wp + s - 1);
        let fft = Fft2::<T>::new(ny, nx);
        let khat = par::map_indexed(k * channels, |i| {
            let mut buf = vec![Complex::<T>::default(); ny * nx];
            let ker = &kernels[i * s * s..(i + 1) * s * s];
            for ky in 0..s {
                for kx in 0..s {
                    buf[ky * nx + kx] = Complex::new(T::of_f64(ker[ky * s + kx]), T::zero());
                }
            }
            fft.forward(&mut buf);
            buf
        });
        Ok(BlurContext {
            psi_grid: psi_grid.to_vec(),
            channels,
            h,
            w,
            kernel_size: s,
            pad,
            fft,
            khat,
        })
    }

    pub fn planes(&self) -> usize {
        self.psi_grid.len()
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    /// Blur every channel with every plane kernel (reflect padding, true
    /// convolution). Returns K x C x H x W.
    pub fn blur_planes(&self, image: &[T]) -> Vec<T> {
        let (h, w, c, s) = (self.h, self.w, self.channels, self.kernel_size);
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        let (ny, nx) = (self.fft.rows(), self.fft.cols());
        let xp = pad_chw(image, c, h, w, self.pad, PadMode::Reflect);
        let xhat: Vec<Vec<Complex<T>>> = par::map_indexed(c, |ci| {
            let mut buf = vec![Complex::<T>::default(); ny * nx];
            for iy in 0..hp {
                for ix in 0..wp {
                    buf[iy * nx + ix] = Complex::new(xp[(ci * hp + iy) * wp + ix], T::zero());
                }
            }
            self.fft.forward(&mut buf);
            buf
        });
        let scale = self.fft.scale();
        let k = self.planes();
        let mut planes = vec![T::zero(); k * c * h * w];
        par::for_each_chunk_mut(&mut planes, h * w, |i, plane| {
            let (ki, ci) = (i / c, i % c);
            let mut buf: Vec<Complex<T>> = self.khat[ki * c + ci]
                .iter()
                .zip(&xhat[ci])
                .map(|(a, b)| a * b)
                .collect();
            self.fft.inverse(&mut buf);
            // Crop the "same" region of the full linear convolution: the
            // centered output starts at index s-1 in each axis.
            for y in 0..h {
                for x in 0..w {
                    plane[y * w + x] = buf[(y + s - 1) * nx + (x + s - 1)].re * scale;
                }
            }
        });
        planes
    }

    /// Per-pixel bracketing plane, interpolation weight, and in-range flag.
    /// Values at or beyond the top knot map to the last interval with w = 1;
    /// out-of-range values are clamped (gradient zero there).
    pub fn bracket(&self, psi: &[T]) -> (Vec<u32>, Vec<T>, Vec<bool>) {
        let grid = &self.psi_grid;
        let k = grid.len();
        let (lo_v, hi_v) = (grid[0], grid[k - 1]);
        let mut lo = vec![0u32; psi.len()];
        let mut wgt = vec![T::zero(); psi.len()];
        let mut inside = vec![false; psi.len()];
        for (i, &p) in psi.iter().enumerate() {
            let pv = p.as_f64();
            inside[i] = pv >= lo_v && pv <= hi_v;
            let pc = pv.clamp(lo_v, hi_v);
            // Largest interval start with grid[j] <= pc, capped at k-2.
            let j = match grid.binary_search_by(|g| g.partial_cmp(&pc).unwrap()) {
                Ok(j) => j.min(k - 2),
                Err(j) => j.saturating_sub(1).min(k - 2),
            };
            lo[i] = j as u32;
            wgt[i] = T::of_f64((pc - grid[j]) / (grid[j + 1] - grid[j]));
        }
        (lo, wgt, inside)
    }

    /// Interpolate pre-blurred planes by the (already bracketed) psi map.
    pub fn interpolate(&self, planes: &[T], lo: &[u32], wgt: &[T]) -> Vec<T> {
        let (h, w, c) = (self.h, self.w, self.channels);
        let hw = h * w;
        let mut out = vec![T::zero(); c * hw];
        par::for_each_chunk_mut(&mut out, hw, |ci, chunk| {
            for px in 0..hw {
                let k0 = lo[px] as usize;
                let w1 = wgt[px];
                let b0 = planes[(k0 * c + ci) * hw + px];
                let b1 = planes[((k0 + 1) * c + ci) * hw + px];
                chunk[px] = (T::one() - w1) * b0 + w1 * b1;
            }
        });
        out
    }

    /// Non-tape forward pass: blur planes then interpolate.
    pub fn render(&self, image: &[T], psi: &[T]) -> Vec<T> {
        let planes = self.blur_planes(image);
        let (lo, wgt, _) = self.bracket(psi);
        self.interpolate(&planes, &lo, &wgt)
    }

    /// Adjoint of the plane-blur operator: given per-plane output gradients
    /// (K x C x H x W), accumulate the image gradient (C x H x W).
    fn blur_adjoint(&self, gplanes: &[T], gimage: &mut [T]) {
        let (h, w, c, s) = (self.h, self.w, self.channels, self.kernel_size);
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        let (ny, nx) = (self.fft.rows(), self.fft.cols());
        let k = self.planes();
        let scale = self.fft.scale();
        let hw = h * w;
        for ci in 0..c {
            // Sum_k conj(Khat_k) * FFT(embedded gplane_k) in the spectrum,
            // then one inverse FFT per channel.
            let spectra: Vec<Vec<Complex<T>>> = par::map_indexed(k, |ki| {
                let mut buf = vec![Complex::<T>::default(); ny * nx];
                let g = &gplanes[(ki * c + ci) * hw..(ki * c + ci + 1) * hw];
                for y in 0..h {
                    for x in 0..w {
                        buf[(y + s - 1) * nx + (x + s - 1)] = Complex::new(g[y * w + x], T::zero());
                    }
                }
                self.fft.forward(&mut buf);
                let kh = &self.khat[ki * c + ci];
                for (b, kv) in buf.iter_mut().zip(kh) {
                    *b = *b * kv.conj();
                }
                buf
            });
            let mut acc = vec![Complex::<T>::default(); ny * nx];
            for sp in spectra {
                for (a, v) in acc.iter_mut().zip(&sp) {
                    *a = *a + v;
                }
            }
            self.fft.inverse(&mut acc);
            let mut dxp = vec![T::zero(); hp * wp];
            for iy in 0..hp {
                for ix in 0..wp {
                    dxp[iy * wp + ix] = acc[iy * nx + ix].re * scale;
                }
            }
            fold_pad_adjoint(&dxp, 1, h, w, self.pad, PadMode::Reflect, &mut gimage[ci * hw..(ci + 1) * hw]);
        }
    }
}

/// Forward caches for the backward pass of one layered-blur application.
pub struct LayeredBlurRecord<T: Real> {
    ctx: Arc<BlurContext<T>>,
    planes: Vec<T>,
    lo: Vec<u32>,
    wgt: Vec<T>,
    inside: Vec<bool>,
}

impl<T: Real> Tape<T> {
    /// Differentiable layered-defocus render: image (C x H x W) and psi map
    /// (H x W) -> coded image (C x H x W).
    pub fn layered_blur(&mut self, image: Var, psi: Var, ctx: &Arc<BlurContext<T>>) -> Result<Var> {
        let iv = self.value(image).clone();
        let pv = self.value(psi).clone();
        let (c, h, w) = (ctx.channels, ctx.h, ctx.w);
        if iv.shape() != [c, h, w] {
            return Err(Error::shape("layered_blur", format!("[{}, {}, {}]", c, h, w), shape_str(iv.shape())));
        }
        if pv.shape() != [h, w] {
            return Err(Error::shape("layered_blur", format!("[{}, {}]", h, w), shape_str(pv.shape())));
        }
        let planes = ctx.blur_planes(iv.data());
        let (lo, wgt, inside) = ctx.bracket(pv.data());
        let out = ctx.interpolate(&planes, &lo, &wgt);
        let rg = self.requires_grad(image) || self.requires_grad(psi);
        let rec = LayeredBlurRecord {
            ctx: Arc::clone(ctx),
            planes,
            lo,
            wgt,
            inside,
        };
        self.push_checked(
            "layered_blur",
            TensorData::new(vec![c, h, w], out),
            rg,
            Op::LayeredBlur { image, psi, rec },
        )
    }
}

pub(crate) fn backward_layered_blur<T: Real>(
    tape: &Tape<T>,
    image: Var,
    psi: Var,
    rec: &LayeredBlurRecord<T>,
    gout: &[T],
    bufs: &mut [Option<Vec<T>>],
) {
    let ctx = &rec.ctx;
    let (c, h, w) = (ctx.channels, ctx.h, ctx.w);
    let hw = h * w;
    let k = ctx.planes();

    if tape.wants_grad(psi) {
        let gpsi = tape.grad_buf(bufs, psi);
        for px in 0..hw {
            if !rec.inside[px] {
                continue;
            }
            let k0 = rec.lo[px] as usize;
            let dpsi = T::of_f64(ctx.psi_grid[k0 + 1] - ctx.psi_grid[k0]);
            let mut acc = T::zero();
            for ci in 0..c {
                let b0 = rec.planes[(k0 * c + ci) * hw + px];
                let b1 = rec.planes[((k0 + 1) * c + ci) * hw + px];
                acc = acc + gout[ci * hw + px] * (b1 - b0);
            }
            gpsi[px] = gpsi[px] + acc / dpsi;
        }
    }

    if tape.wants_grad(image) {
        // Scatter the output gradient onto the two bracketing planes with the
        // interpolation weights, then apply the blur adjoint.
        let mut gplanes = vec![T::zero(); k * c * hw];
        for px in 0..hw {
            let k0 = rec.lo[px] as usize;
            let w1 = rec.wgt[px];
            let w0 = T::one() - w1;
            for ci in 0..c {
                let g = gout[ci * hw + px];
                gplanes[(k0 * c + ci) * hw + px] = gplanes[(k0 * c + ci) * hw + px] + w0 * g;
                gplanes[((k0 + 1) * c + ci) * hw + px] = gplanes[((k0 + 1) * c + ci) * hw + px] + w1 * g;
            }
        }
        let gimg = tape.grad_buf(bufs, image);
        ctx.blur_adjoint(&gplanes, gimg);
    }
}
