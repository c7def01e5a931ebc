//! 2D convolution (cross-correlation, no kernel flip) with zero/reflect/valid
//! padding and stride 1 or 2.
//!
//! Forward and both backward passes reduce to GEMM over im2col row blocks.
//! Blocks are processed with a fixed partition whether the parallel feature is
//! active or not, so results are bit-identical across thread counts. The
//! gradient wrt x is computed as a stride-1 convolution of the (dilated,
//! zero-padded) output gradient with the channel-transposed, spatially
//! flipped kernel, followed by the padding adjoint.

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Real;
use crate::tensor::{shape_str, TensorData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    /// Pad with zeros by k/2 (size-preserving at stride 1).
    Zero,
    /// Mirror padding without edge repetition, by k/2. Default for
    /// image-sized convolutions (no dark halos at borders).
    Reflect,
    /// No padding.
    Valid,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvCfg {
    pub stride: usize,
    pub pad: PadMode,
}

impl<T: Real> Tape<T> {
    /// x: C_in x H x W, w: C_out x C_in x k x k -> C_out x H_out x W_out.
    pub fn conv2d(&mut self, x: Var, w: Var, cfg: ConvCfg) -> Result<Var> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let (cin, h, width) = match xv.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::shape("conv2d", "C x H x W input", shape_str(s))),
        };
        let (cout, cin2, k) = match wv.shape() {
            [co, ci, kh, kw] if kh == kw => (*co, *ci, *kh),
            s => return Err(Error::shape("conv2d", "C_out x C_in x k x k kernel", shape_str(s))),
        };
        if cin != cin2 {
            return Err(Error::shape("conv2d", format!("C_in {}", cin), format!("{}", cin2)));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d: kernel size {} must be odd", k)));
        }
        if !matches!(cfg.stride, 1 | 2) {
            return Err(Error::Config(format!("conv2d: stride {} not in {{1, 2}}", cfg.stride)));
        }
        let p = pad_amount(cfg.pad, k);
        if matches!(cfg.pad, PadMode::Reflect) && (p >= h || p >= width) {
            return Err(Error::Config(format!(
                "conv2d: reflect padding {} needs spatial extents > {}, got {}x{}",
                p, p, h, width
            )));
        }
        let (hp, wp) = (h + 2 * p, width + 2 * p);
        if hp < k || wp < k {
            return Err(Error::Config(format!(
                "conv2d: kernel {} larger than padded input {}x{}",
                k, hp, wp
            )));
        }
        let ho = (hp - k) / cfg.stride + 1;
        let wo = (wp - k) / cfg.stride + 1;

        let xp = pad_chw(xv.data(), cin, h, width, p, cfg.pad);
        let mut out = vec![T::zero(); cout * ho * wo];
        conv_core(&xp, cin, hp, wp, wv.data(), cout, k, cfg.stride, ho, wo, &mut out);

        let rg = self.requires_grad(x) || self.requires_grad(w);
        self.push_checked(
            "conv2d",
            TensorData::new(vec![cout, ho, wo], out),
            rg,
            Op::Conv2d { x, w, cfg },
        )
    }
}

pub(crate) fn pad_amount(mode: PadMode, k: usize) -> usize {
    match mode {
        PadMode::Valid => 0,
        PadMode::Zero | PadMode::Reflect => k / 2,
    }
}

/// Mirror index for reflect-101 padding.
#[inline(always)]
fn mirror(j: isize, n: usize) -> usize {
    let n = n as isize;
    let m = if j < 0 {
        -j
    } else if j >= n {
        2 * n - 2 - j
    } else {
        j
    };
    debug_assert!((0..n).contains(&m));
    m as usize
}

/// Pad a C x H x W tensor spatially by p on each side.
pub(crate) fn pad_chw<T: Real>(x: &[T], c: usize, h: usize, w: usize, p: usize, mode: PadMode) -> Vec<T> {
    if p == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); c * hp * wp];
    par::for_each_chunk_mut(&mut out, hp * wp, |ci, plane| {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        match mode {
            PadMode::Zero => {
                for iy in 0..h {
                    let dst = &mut plane[(iy + p) * wp + p..(iy + p) * wp + p + w];
                    dst.copy_from_slice(&src[iy * w..(iy + 1) * w]);
                }
            }
            PadMode::Reflect => {
                for iy in 0..hp {
                    let sy = mirror(iy as isize - p as isize, h);
                    for ix in 0..wp {
                        let sx = mirror(ix as isize - p as isize, w);
                        plane[iy * wp + ix] = src[sy * w + sx];
                    }
                }
            }
            PadMode::Valid => unreachable!(),
        }
    });
    out
}

/// Adjoint of [`pad_chw`]: fold a padded gradient back onto the unpadded grid,
/// accumulating into `dx`.
pub(crate) fn fold_pad_adjoint<T: Real>(
    dxp: &[T],
    c: usize,
    h: usize,
    w: usize,
    p: usize,
    mode: PadMode,
    dx: &mut [T],
) {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    debug_assert_eq!(dxp.len(), c * hp * wp);
    debug_assert_eq!(dx.len(), c * h * w);
    par::for_each_chunk_mut(dx, h * w, |ci, plane| {
        let src = &dxp[ci * hp * wp..(ci + 1) * hp * wp];
        match mode {
            PadMode::Valid => {
                for (d, s) in plane.iter_mut().zip(src) {
                    *d = *d + *s;
                }
            }
            PadMode::Zero => {
                for iy in 0..h {
                    let row = &src[(iy + p) * wp + p..(iy + p) * wp + p + w];
                    for (d, s) in plane[iy * w..(iy + 1) * w].iter_mut().zip(row) {
                        *d = *d + *s;
                    }
                }
            }
            PadMode::Reflect => {
                for iy in 0..hp {
                    let sy = mirror(iy as isize - p as isize, h);
                    for ix in 0..wp {
                        let sx = mirror(ix as isize - p as isize, w);
                        plane[sy * w + sx] = plane[sy * w + sx] + src[iy * wp + ix];
                    }
                }
            }
        }
    });
}

/// Rows of output per im2col block, sized for ~2k-pixel GEMM panels.
fn block_rows(wo: usize) -> usize {
    (2048 / wo.max(1)).max(1)
}

/// Fill `cols` (C_in*k*k x rows*W_out) from padded input for output rows
/// [r0, r0+rows).
#[allow(clippy::too_many_arguments)]
fn im2col_block<T: Real>(
    xp: &[T],
    cin: usize,
    hp: usize,
    wp: usize,
    k: usize,
    stride: usize,
    wo: usize,
    r0: usize,
    rows: usize,
    cols: &mut [T],
) {
    let pb = rows * wo;
    debug_assert_eq!(cols.len(), cin * k * k * pb);
    for ci in 0..cin {
        let plane = &xp[ci * hp * wp..(ci + 1) * hp * wp];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * pb..((ci * k + ky) * k + kx + 1) * pb];
                for oy in 0..rows {
                    let sy = (r0 + oy) * stride + ky;
                    let src = &plane[sy * wp..(sy + 1) * wp];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        dst.copy_from_slice(&src[kx..kx + wo]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src[ox * stride + kx];
                        }
                    }
                }
            }
        }
    }
}

/// out (C_out x H_out x W_out) = cross-correlation of padded input with w.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_core<T: Real>(
    xp: &[T],
    cin: usize,
    hp: usize,
    wp: usize,
    w: &[T],
    cout: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    let ck = cin * k * k;
    let rb = block_rows(wo);
    let nblocks = ho.div_ceil(rb);
    // Compute per-block panels in parallel, then assemble in block order.
    let panels: Vec<(usize, usize, Vec<T>)> = par::map_indexed(nblocks, |bi| {
        let r0 = bi * rb;
        let rows = rb.min(ho - r0);
        let pb = rows * wo;
        let mut cols = vec![T::zero(); ck * pb];
        im2col_block(xp, cin, hp, wp, k, stride, wo, r0, rows, &mut cols);
        let mut panel = vec![T::zero(); cout * pb];
        T::gemm_rm(cout, ck, pb, w, &cols, &mut panel, false);
        (r0, rows, panel)
    });
    for (r0, rows, panel) in panels {
        let pb = rows * wo;
        for co in 0..cout {
            out[co * ho * wo + r0 * wo..co * ho * wo + r0 * wo + pb].copy_from_slice(&panel[co * pb..(co + 1) * pb]);
        }
    }
}

pub(crate) fn backward_conv2d<T: Real>(
    tape: &Tape<T>,
    x: Var,
    w: Var,
    cfg: ConvCfg,
    gout: &[T],
    bufs: &mut [Option<Vec<T>>],
) {
    let xv = tape.value(x).clone();
    let wv = tape.value(w).clone();
    let (cin, h, width) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let (cout, k) = (wv.shape()[0], wv.shape()[2]);
    let p = pad_amount(cfg.pad, k);
    let (hp, wp) = (h + 2 * p, width + 2 * p);
    let ho = (hp - k) / cfg.stride + 1;
    let wo = (wp - k) / cfg.stride + 1;
    let ck = cin * k * k;

    if tape.wants_grad(w) {
        // dW = sum over blocks of G_block @ cols_block^T, accumulated in a
        // fixed group partition for determinism.
        let xp = pad_chw(xv.data(), cin, h, width, p, cfg.pad);
        let rb = block_rows(wo);
        let nblocks = ho.div_ceil(rb);
        const NGROUPS: usize = 4;
        let bpg = nblocks.div_ceil(NGROUPS).max(1);
        let partials: Vec<Vec<T>> = par::map_indexed(nblocks.div_ceil(bpg), |gi| {
            let mut acc = vec![T::zero(); cout * ck];
            let mut cols = Vec::new();
            for bi in gi * bpg..(gi * bpg + bpg).min(nblocks) {
                let r0 = bi * rb;
                let rows = rb.min(ho - r0);
                let pb = rows * wo;
                cols.clear();
                cols.resize(ck * pb, T::zero());
                im2col_block(&xp, cin, hp, wp, k, cfg.stride, wo, r0, rows, &mut cols);
                // acc += G_block (cout x pb) @ cols^T (pb x ck)
                T::gemm_st(cout, pb, ck, &gout[r0 * wo..], ho * wo, 1, &cols, 1, pb, &mut acc, true);
            }
            acc
        });
        let gw = tape.grad_buf(bufs, w);
        for part in partials {
            for (g, v) in gw.iter_mut().zip(&part) {
                *g = *g + *v;
            }
        }
    }

    if tape.wants_grad(x) {
        // Dilate the output gradient by the stride, zero-pad by k-1, and
        // convolve at stride 1 with the flipped, channel-transposed kernel.
        let s = cfg.stride;
        let (hd, wd) = ((ho - 1) * s + 1, (wo - 1) * s + 1);
        let (hg, wg) = (hd + 2 * (k - 1), wd + 2 * (k - 1));
        let mut gp = vec![T::zero(); cout * hg * wg];
        par::for_each_chunk_mut(&mut gp, hg * wg, |co, plane| {
            let src = &gout[co * ho * wo..(co + 1) * ho * wo];
            for oy in 0..ho {
                let ty = oy * s + (k - 1);
                for ox in 0..wo {
                    plane[ty * wg + ox * s + (k - 1)] = src[oy * wo + ox];
                }
            }
        });
        let mut wt = vec![T::zero(); cin * cout * k * k];
        for co in 0..cout {
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        wt[((ci * cout + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                            wv.data()[((co * cin + ci) * k + ky) * k + kx];
                    }
                }
            }
        }
        // Output covers dxp rows [0, hd+k-1); trailing padded rows that never
        // contributed stay zero.
        let (hv, wv_) = (hd + k - 1, wd + k - 1);
        let mut dxp_core = vec![T::zero(); cin * hv * wv_];
        conv_core(&gp, cout, hg, wg, &wt, cin, k, 1, hv, wv_, &mut dxp_core);
        let dxp = if hv == hp && wv_ == wp {
            dxp_core
        } else {
            let mut full = vec![T::zero(); cin * hp * wp];
            for ci in 0..cin {
                for iy in 0..hv {
                    let src = &dxp_core[(ci * hv + iy) * wv_..(ci * hv + iy + 1) * wv_];
                    full[(ci * hp + iy) * wp..(ci * hp + iy) * wp + wv_].copy_from_slice(src);
                }
            }
            full
        };
        let gx = tape.grad_buf(bufs, x);
        fold_pad_adjoint(&dxp, cin, h, width, p, cfg.pad, gx);
    }
}
