//! Element type abstraction: f64 for verification, f32 for speed runs.

use gemm::Parallelism;

/// Floating-point element of tensors. f64 is the default precision for the
/// verification suite (finite-difference checks are meaningless at f32);
/// f32 is for speed runs.
pub trait Real:
    rustfft::FftNum
    + num_traits::Float
    + std::iter::Sum
    + std::fmt::Display
    + std::fmt::LowerExp
    + Default
    + serde::Serialize
{
    const DTYPE: Dtype;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// c (m x n, contiguous row-major) = a @ b, with arbitrary element strides
    /// on the operands (rs = row stride, cs = column stride), so transposed
    /// views need no copies. With `accumulate` the product is added into c.
    /// Runs single-threaded; callers parallelize over disjoint output blocks
    /// for determinism.
    #[allow(clippy::too_many_arguments)]
    fn gemm_st(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_rs: usize,
        a_cs: usize,
        b: &[Self],
        b_rs: usize,
        b_cs: usize,
        c: &mut [Self],
        accumulate: bool,
    );

    /// Row-major contiguous convenience wrapper over [`Real::gemm_st`].
    fn gemm_rm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self], accumulate: bool) {
        Self::gemm_st(m, k, n, a, k, 1, b, n, 1, c, accumulate);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr) => {
        impl Real for $t {
            const DTYPE: Dtype = $dtype;

            #[inline(always)]
            fn of_f64(v: f64) -> Self {
                v as $t
            }

            #[inline(always)]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm_st(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_rs: usize,
                a_cs: usize,
                b: &[Self],
                b_rs: usize,
                b_cs: usize,
                c: &mut [Self],
                accumulate: bool,
            ) {
                if m == 0 || n == 0 || k == 0 {
                    return;
                }
                assert!(a.len() > (m - 1) * a_rs + (k - 1) * a_cs, "lhs out of bounds");
                assert!(b.len() > (k - 1) * b_rs + (n - 1) * b_cs, "rhs out of bounds");
                assert!(c.len() >= m * n, "dst out of bounds");
                unsafe {
                    gemm::gemm(
                        m,
                        n,
                        k,
                        c.as_mut_ptr(),
                        1,
                        n as isize,
                        accumulate,
                        a.as_ptr(),
                        a_cs as isize,
                        a_rs as isize,
                        b.as_ptr(),
                        b_cs as isize,
                        b_rs as isize,
                        1.0,
                        1.0,
                        false,
                        false,
                        false,
                        Parallelism::None,
                    );
                }
            }
        }
    };
}

impl_real!(f32, Dtype::F32);
impl_real!(f64, Dtype::F64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (5, 7, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        f64::gemm_rm(m, k, n, &a, &b, &mut c, false);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_accumulates() {
        let a = vec![1.0f32, 2.0];
        let b = vec![3.0f32, 4.0];
        let mut c = vec![10.0f32];
        f32::gemm_rm(1, 2, 1, &a, &b, &mut c, true);
        assert_eq!(c[0], 10.0 + 3.0 + 8.0);
    }

    #[test]
    fn gemm_transposed_strides() {
        // dA = G @ B^T exercised through stride parameters.
        let g = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![1.0f64, 0.5, -1.0, 2.0, 0.0, 3.0]; // 2x3 (k=2 rows? no: treat as 2x3)
        // B is 2x3 row-major; B^T is 3x2 with rs=1, cs=3.
        let mut c = vec![0.0f64; 4]; // (2x3)@(3x2) = 2x2
        f64::gemm_st(2, 3, 2, &g, 3, 1, &b, 1, 3, &mut c, false);
        // naive
        let bt = |r: usize, ccol: usize| b[ccol * 3 + r];
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|p| g[i * 3 + p] * bt(p, j)).sum();
                assert!((c[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }
}
