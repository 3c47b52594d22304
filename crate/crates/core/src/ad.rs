//! Forward-mode automatic differentiation over a fixed number of local
//! variables.
//!
//! The pair likelihood is a function of at most eight local inputs
//! (two dependence parameters and three marginal parameters per site), so
//! gradients and Hessians are carried as fixed-size arrays. `Grad<N>` carries
//! first derivatives; `Hess<N>` carries first and second derivatives.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::extremes::{normal_cdf, normal_pdf};

/// Arithmetic needed by the likelihood kernels.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn constant(c: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    /// Standard normal distribution function.
    fn norm_cdf(self) -> Self;
    /// Standard normal density.
    fn norm_pdf(self) -> Self;

    fn recip(self) -> Self {
        Self::constant(1.0) / self
    }
}

impl Scalar for f64 {
    #[inline]
    fn constant(c: f64) -> Self {
        c
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
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
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn norm_cdf(self) -> Self {
        normal_cdf(self)
    }
    #[inline]
    fn norm_pdf(self) -> Self {
        normal_pdf(self)
    }
}

/// Value plus gradient with respect to `N` local variables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grad<const N: usize> {
    pub v: f64,
    pub g: [f64; N],
}

impl<const N: usize> Grad<N> {
    pub fn var(v: f64, slot: usize) -> Self {
        let mut g = [0.0; N];
        g[slot] = 1.0;
        Grad { v, g }
    }

    /// Re-seat a gradient over `M` variables into slots `offset..offset+M`.
    pub fn lift<const M: usize>(src: Grad<M>, offset: usize) -> Self {
        let mut g = [0.0; N];
        g[offset..offset + M].copy_from_slice(&src.g);
        Grad { v: src.v, g }
    }

    #[inline]
    fn chain(self, f0: f64, f1: f64) -> Self {
        let mut g = self.g;
        for x in g.iter_mut() {
            *x *= f1;
        }
        Grad { v: f0, g }
    }
}

impl<const N: usize> Add for Grad<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: Self) -> Self {
        self.v += o.v;
        for i in 0..N {
            self.g[i] += o.g[i];
        }
        self
    }
}

impl<const N: usize> Sub for Grad<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, o: Self) -> Self {
        self.v -= o.v;
        for i in 0..N {
            self.g[i] -= o.g[i];
        }
        self
    }
}

impl<const N: usize> Mul for Grad<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut g = [0.0; N];
        for i in 0..N {
            g[i] = self.g[i] * o.v + self.v * o.g[i];
        }
        Grad { v: self.v * o.v, g }
    }
}

impl<const N: usize> Div for Grad<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let q = self.v * inv;
        let mut g = [0.0; N];
        for i in 0..N {
            g[i] = (self.g[i] - q * o.g[i]) * inv;
        }
        Grad { v: q, g }
    }
}

impl<const N: usize> Neg for Grad<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.chain(-self.v, -1.0)
    }
}

impl<const N: usize> Add<f64> for Grad<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, c: f64) -> Self {
        self.v += c;
        self
    }
}

impl<const N: usize> Sub<f64> for Grad<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, c: f64) -> Self {
        self.v -= c;
        self
    }
}

impl<const N: usize> Mul<f64> for Grad<N> {
    type Output = Self;
    #[inline]
    fn mul(self, c: f64) -> Self {
        self.chain(self.v * c, c)
    }
}

impl<const N: usize> Div<f64> for Grad<N> {
    type Output = Self;
    #[inline]
    fn div(self, c: f64) -> Self {
        self.chain(self.v / c, 1.0 / c)
    }
}

impl<const N: usize> Scalar for Grad<N> {
    fn constant(c: f64) -> Self {
        Grad { v: c, g: [0.0; N] }
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }
    fn ln_1p(self) -> Self {
        self.chain(self.v.ln_1p(), 1.0 / (1.0 + self.v))
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn norm_cdf(self) -> Self {
        self.chain(normal_cdf(self.v), normal_pdf(self.v))
    }
    fn norm_pdf(self) -> Self {
        let p = normal_pdf(self.v);
        self.chain(p, -self.v * p)
    }
}

/// Value, gradient and Hessian with respect to `N` local variables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hess<const N: usize> {
    pub v: f64,
    pub g: [f64; N],
    pub h: [[f64; N]; N],
}

impl<const N: usize> Hess<N> {
    pub fn var(v: f64, slot: usize) -> Self {
        let mut g = [0.0; N];
        g[slot] = 1.0;
        Hess {
            v,
            g,
            h: [[0.0; N]; N],
        }
    }

    pub fn lift<const M: usize>(src: Hess<M>, offset: usize) -> Self {
        let mut out = Hess::<N>::constant(src.v);
        for i in 0..M {
            out.g[offset + i] = src.g[i];
            for j in 0..M {
                out.h[offset + i][offset + j] = src.h[i][j];
            }
        }
        out
    }

    /// Apply a scalar function with value `f0`, first derivative `f1` and
    /// second derivative `f2` at `self.v`.
    #[inline]
    fn chain(self, f0: f64, f1: f64, f2: f64) -> Self {
        let mut out = Hess {
            v: f0,
            g: [0.0; N],
            h: [[0.0; N]; N],
        };
        for i in 0..N {
            out.g[i] = f1 * self.g[i];
            for j in 0..N {
                out.h[i][j] = f1 * self.h[i][j] + f2 * self.g[i] * self.g[j];
            }
        }
        out
    }
}

impl<const N: usize> Add for Hess<N> {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self.v += o.v;
        for i in 0..N {
            self.g[i] += o.g[i];
            for j in 0..N {
                self.h[i][j] += o.h[i][j];
            }
        }
        self
    }
}

impl<const N: usize> Sub for Hess<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl<const N: usize> Mul for Hess<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut out = Hess {
            v: self.v * o.v,
            g: [0.0; N],
            h: [[0.0; N]; N],
        };
        for i in 0..N {
            out.g[i] = self.g[i] * o.v + self.v * o.g[i];
            for j in 0..N {
                out.h[i][j] = self.h[i][j] * o.v
                    + self.v * o.h[i][j]
                    + self.g[i] * o.g[j]
                    + o.g[i] * self.g[j];
            }
        }
        out
    }
}

impl<const N: usize> Div for Hess<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        self * o.recip()
    }
}

impl<const N: usize> Neg for Hess<N> {
    type Output = Self;
    fn neg(self) -> Self {
        self.chain(-self.v, -1.0, 0.0)
    }
}

impl<const N: usize> Add<f64> for Hess<N> {
    type Output = Self;
    fn add(mut self, c: f64) -> Self {
        self.v += c;
        self
    }
}

impl<const N: usize> Sub<f64> for Hess<N> {
    type Output = Self;
    fn sub(mut self, c: f64) -> Self {
        self.v -= c;
        self
    }
}

impl<const N: usize> Mul<f64> for Hess<N> {
    type Output = Self;
    fn mul(self, c: f64) -> Self {
        self.chain(self.v * c, c, 0.0)
    }
}

impl<const N: usize> Div<f64> for Hess<N> {
    type Output = Self;
    fn div(self, c: f64) -> Self {
        self.chain(self.v / c, 1.0 / c, 0.0)
    }
}

impl<const N: usize> Scalar for Hess<N> {
    fn constant(c: f64) -> Self {
        Hess {
            v: c,
            g: [0.0; N],
            h: [[0.0; N]; N],
        }
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }
    fn ln(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(self.v.ln(), r, -r * r)
    }
    fn ln_1p(self) -> Self {
        let r = 1.0 / (1.0 + self.v);
        self.chain(self.v.ln_1p(), r, -r * r)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.v))
    }
    fn norm_cdf(self) -> Self {
        let p = normal_pdf(self.v);
        self.chain(normal_cdf(self.v), p, -self.v * p)
    }
    fn norm_pdf(self) -> Self {
        let p = normal_pdf(self.v);
        self.chain(p, -self.v * p, (self.v * self.v - 1.0) * p)
    }
    fn recip(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r, 2.0 * r * r * r)
    }
}
