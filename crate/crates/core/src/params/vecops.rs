//! Euclidean vector algebra over `f64` slices.
//!
//! Every reduction goes through a Neumaier-compensated accumulator so that
//! long inner products over millions of parameters keep close to full
//! double precision regardless of term magnitudes.

use crate::error::{check_len, Result};

/// Neumaier's variant of Kahan summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = CompensatedSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Unchecked inner product; callers guarantee equal lengths.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = CompensatedSum::new();
    for (x, y) in a.iter().zip(b) {
        acc.add(x * y);
    }
    acc.value()
}

pub fn inner_product(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(dot(a, b))
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `dst + c * src`.
pub fn add_scaled(dst: &[f64], src: &[f64], c: f64) -> Result<Vec<f64>> {
    check_len(dst.len(), src.len())?;
    Ok(dst.iter().zip(src).map(|(d, s)| d + c * s).collect())
}

/// `dst += c * src`, in place.
pub fn add_scaled_in_place(dst: &mut [f64], src: &[f64], c: f64) -> Result<()> {
    check_len(dst.len(), src.len())?;
    axpy(dst, src, c);
    Ok(())
}

#[inline]
pub(crate) fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}
