//! Floating point abstraction shared by the network, diffusion and oracles.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type the model and samplers are generic over.
///
/// `f32` is the training/sampling precision, `f64` is used by verification
/// oracles (finite differences, objective identities).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// `c = a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n` (overwrites `c`).
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    /// `c += a · bᵀ` where `b` is stored row-major as `n×k`.
    fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    /// `c += aᵀ · b` where `a` is stored row-major as `k×m`.
    fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                if m == 0 || n == 0 {
                    return;
                }
                unsafe {
                    $gemm(
                        m, k, n, 1.0,
                        a.as_ptr(), k as isize, 1,
                        b.as_ptr(), n as isize, 1,
                        0.0,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), n * k);
                debug_assert_eq!(c.len(), m * n);
                if m == 0 || n == 0 {
                    return;
                }
                unsafe {
                    $gemm(
                        m, k, n, 1.0,
                        a.as_ptr(), k as isize, 1,
                        b.as_ptr(), 1, k as isize,
                        1.0,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
                debug_assert_eq!(a.len(), k * m);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                if m == 0 || n == 0 {
                    return;
                }
                unsafe {
                    $gemm(
                        m, k, n, 1.0,
                        a.as_ptr(), 1, m as isize,
                        b.as_ptr(), n as isize, 1,
                        1.0,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
