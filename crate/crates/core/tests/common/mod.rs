//! Shared test oracles, kept independent of the library implementation paths
//! they verify: plain scalar loops, no im2col, no FFT.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mirror index for reflect-101 padding (no edge repetition).
fn mirror(j: isize, n: usize) -> usize {
    let n = n as isize;
    let m = if j < 0 {
        -j
    } else if j >= n {
        2 * n - 2 - j
    } else {
        j
    };
    m as usize
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum RefPad {
    Zero,
    Reflect,
    Valid,
}

/// Direct cross-correlation (no kernel flip), matching the conv2d contract.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    ker: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: RefPad,
) -> (Vec<f64>, usize, usize) {
    let p = if pad == RefPad::Valid { 0 } else { k / 2 } as isize;
    let hp = h as isize + 2 * p;
    let wp = w as isize + 2 * p;
    let ho = ((hp - k as isize) / stride as isize + 1) as usize;
    let wo = ((wp - k as isize) / stride as isize + 1) as usize;
    let fetch = |ci: usize, y: isize, xx: isize| -> f64 {
        match pad {
            RefPad::Zero => {
                if y < 0 || y >= h as isize || xx < 0 || xx >= w as isize {
                    0.0
                } else {
                    x[(ci * h + y as usize) * w + xx as usize]
                }
            }
            RefPad::Reflect => x[(ci * h + mirror(y, h)) * w + mirror(xx, w)],
            RefPad::Valid => x[(ci * h + y as usize) * w + xx as usize],
        }
    };
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - p;
                            let xx = (ox * stride + kx) as isize - p;
                            acc += fetch(ci, y, xx) * ker[((co * cin + ci) * k + ky) * k + kx];
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    (out, ho, wo)
}

/// Direct true convolution (kernel flipped relative to correlation) with
/// reflect padding — the orientation the optics uses for PSF application.
pub fn convolve_true_ref(x: &[f64], h: usize, w: usize, ker: &[f64], s: usize) -> Vec<f64> {
    let p = (s / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let mut acc = 0.0;
            for ky in 0..s as isize {
                for kx in 0..s as isize {
                    let dy = p - ky;
                    let dx = p - kx;
                    let sy = mirror(y + dy, h);
                    let sx = mirror(xx + dx, w);
                    acc += ker[(ky * s as isize + kx) as usize] * x[sy * w + sx];
                }
            }
            out[(y * w as isize + xx) as usize] = acc;
        }
    }
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
