use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element type of a [`Tensor`](super::Tensor).
///
/// `f64` is the workhorse. [`Dual`] carries a tangent alongside each value so
/// that running a reverse pass over dual numbers yields Hessian-vector
/// products (forward-over-reverse).
pub trait Scalar:
    Copy
    + Default
    + Debug
    + PartialEq
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn from_f64(v: f64) -> Self;
    /// Primal part.
    fn re(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    /// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), with `op(a)` of
    /// shape m×k and `op(b)` of shape k×n, all buffers row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    ) {
        naive_gemm(m, k, n, a, a_t, b, b_t, c, accumulate)
    }
}

#[allow(clippy::too_many_arguments)]
fn naive_gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    a_t: bool,
    b: &[S],
    b_t: bool,
    c: &mut [S],
    accumulate: bool,
) {
    if !accumulate {
        c.iter_mut().for_each(|v| *v = S::zero());
    }
    for i in 0..m {
        for l in 0..k {
            let av = if a_t { a[l * m + i] } else { a[i * k + l] };
            if av == S::zero() {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            if b_t {
                for (j, cv) in row.iter_mut().enumerate() {
                    *cv += av * b[j * k + l];
                }
            } else {
                for (cv, &bv) in row.iter_mut().zip(&b[l * n..(l + 1) * n]) {
                    *cv += av * bv;
                }
            }
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_t: bool,
        b: &[f64],
        b_t: bool,
        c: &mut [f64],
        accumulate: bool,
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            if !accumulate {
                c.iter_mut().for_each(|v| *v = 0.0);
            }
            return;
        }
        let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: the strides describe exactly the row-major buffers checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// First-order dual number `re + eps·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub const fn new(re: f64, eps: f64) -> Self {
        Dual { re, eps }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let q = self.re / o.re;
        Dual::new(q, (self.eps - q * o.eps) / o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.eps)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        *self = *self + o;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Dual) {
        *self = *self - o;
    }
}

impl MulAssign for Dual {
    #[inline]
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

impl Scalar for Dual {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    #[inline]
    fn re(self) -> f64 {
        self.re
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, e * self.eps)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.eps / self.re)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.eps / (2.0 * s))
    }
    #[inline]
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.eps.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_derivatives() {
        let x = Dual::new(2.0, 1.0);
        let y = x * x * x;
        assert_eq!(y.re, 8.0);
        assert_eq!(y.eps, 12.0);
        let l = x.ln();
        assert!((l.eps - 0.5).abs() < 1e-15);
        let q = Dual::one() / x;
        assert!((q.eps + 0.25).abs() < 1e-15);
    }

    #[test]
    fn fast_gemm_matches_naive_for_all_transpositions() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        for &(a_t, b_t) in &[(false, false), (true, false), (false, true), (true, true)] {
            let mut fast = vec![1.0; m * n];
            let mut slow = vec![1.0; m * n];
            f64::gemm(m, k, n, &a, a_t, &b, b_t, &mut fast, true);
            naive_gemm(m, k, n, &a, a_t, &b, b_t, &mut slow, true);
            for (x, y) in fast.iter().zip(&slow) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
