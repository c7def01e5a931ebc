//! 2D complex FFT on top of rustfft, with cached plans per grid size.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Real;

/// Smallest {2,3,5}-smooth integer >= n (fast FFT length).
pub fn fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2usize, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Forward/inverse 2D FFT plans for a fixed (rows, cols) grid.
pub struct Fft2<T: Real> {
    rows: usize,
    cols: usize,
    fwd_row: Arc<dyn Fft<T>>,
    fwd_col: Arc<dyn Fft<T>>,
    inv_row: Arc<dyn Fft<T>>,
    inv_col: Arc<dyn Fft<T>>,
}

impl<T: Real> Fft2<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            rows,
            cols,
            fwd_row: planner.plan_fft_forward(cols),
            fwd_col: planner.plan_fft_forward(rows),
            inv_row: planner.plan_fft_inverse(cols),
            inv_col: planner.plan_fft_inverse(rows),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    /// In-place forward transform of a row-major rows x cols buffer.
    pub fn forward(&self, buf: &mut [Complex<T>]) {
        self.transform(buf, true);
    }

    /// In-place unscaled inverse transform; apply [`Fft2::scale`] to normalize.
    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        self.transform(buf, false);
    }

    /// 1/(rows*cols), the normalization factor for a forward+inverse round trip.
    pub fn scale(&self) -> T {
        T::of_f64(1.0 / (self.rows * self.cols) as f64)
    }

    fn transform(&self, buf: &mut [Complex<T>], forward: bool) {
        assert_eq!(buf.len(), self.rows * self.cols);
        let (row_fft, col_fft) = if forward {
            (&self.fwd_row, &self.fwd_col)
        } else {
            (&self.inv_row, &self.inv_col)
        };
        let mut scratch =
            vec![Complex::<T>::default(); row_fft.get_inplace_scratch_len().max(col_fft.get_inplace_scratch_len())];
        for r in 0..self.rows {
            row_fft.process_with_scratch(&mut buf[r * self.cols..(r + 1) * self.cols], &mut scratch);
        }
        // Column pass via transpose, row FFTs, transpose back.
        let mut t = transpose(buf, self.rows, self.cols);
        for c in 0..self.cols {
            col_fft.process_with_scratch(&mut t[c * self.rows..(c + 1) * self.rows], &mut scratch);
        }
        transpose_into(&t, self.cols, self.rows, buf);
    }
}

fn transpose<T: Copy + Default>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut dst = vec![T::default(); src.len()];
    transpose_into(src, rows, cols, &mut dst);
    dst
}

fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_len_smooth() {
        assert_eq!(fast_len(1), 1);
        assert_eq!(fast_len(97), 100);
        assert_eq!(fast_len(128), 128);
        assert_eq!(fast_len(241), 243);
    }

    #[test]
    fn round_trip() {
        let (r, c) = (6, 10);
        let fft = Fft2::<f64>::new(r, c);
        let orig: Vec<Complex<f64>> = (0..r * c)
            .map(|i| Complex::new((i as f64 * 0.71).sin(), (i as f64 * 0.37).cos()))
            .collect();
        let mut buf = orig.clone();
        fft.forward(&mut buf);
        fft.inverse(&mut buf);
        let s = fft.scale();
        for (a, b) in buf.iter().zip(&orig) {
            assert!((a * s - b).norm() < 1e-12);
        }
    }

    #[test]
    fn impulse_gives_flat_spectrum() {
        let fft = Fft2::<f64>::new(4, 8);
        let mut buf = vec![Complex::default(); 32];
        buf[0] = Complex::new(1.0, 0.0);
        fft.forward(&mut buf);
        for v in &buf {
            assert!((v.re - 1.0).abs() < 1e-12 && v.im.abs() < 1e-12);
        }
    }
}
