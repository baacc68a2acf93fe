//! Scalar abstraction shared by every simulation routine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type the particle dynamics can be run in: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` literal into `T`.
#[inline(always)]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

/// Lossy conversion to `f64` for statistics and I/O.
#[inline(always)]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// `usize` to scalar.
#[inline(always)]
pub fn from_usize<T: Scalar>(n: usize) -> T {
    T::from_usize(n).expect("usize representable in scalar type")
}

const LANES: usize = 4;

/// Compensated accumulator built from error-free `TwoSum` transforms.
///
/// Four independent lanes keep the dependency chain short; the lanes are
/// merged in a fixed order so the result depends only on the input sequence.
#[derive(Clone, Copy, Debug)]
pub struct CompensatedSum<T: Scalar> {
    sum: [T; LANES],
    err: [T; LANES],
    next: usize,
}

impl<T: Scalar> Default for CompensatedSum<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline(always)]
fn two_sum<T: Scalar>(a: T, b: T) -> (T, T) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

impl<T: Scalar> CompensatedSum<T> {
    pub fn new() -> Self {
        Self {
            sum: [T::zero(); LANES],
            err: [T::zero(); LANES],
            next: 0,
        }
    }

    #[inline(always)]
    pub fn add(&mut self, x: T) {
        let l = self.next;
        let (s, e) = two_sum(self.sum[l], x);
        self.sum[l] = s;
        self.err[l] += e;
        self.next = (l + 1) % LANES;
    }

    /// Adds a whole slice; lane assignment is by position within the slice.
    pub fn add_slice(&mut self, xs: &[T]) {
        let mut chunks = xs.chunks_exact(LANES);
        for ch in &mut chunks {
            for l in 0..LANES {
                let (s, e) = two_sum(self.sum[l], ch[l]);
                self.sum[l] = s;
                self.err[l] += e;
            }
        }
        for &x in chunks.remainder() {
            self.add(x);
        }
    }

    /// Adds `a_i * b_i` for equal-length slices.
    pub fn add_products(&mut self, a: &[T], b: &[T]) {
        debug_assert_eq!(a.len(), b.len());
        let mut ca = a.chunks_exact(LANES);
        let mut cb = b.chunks_exact(LANES);
        for (x, y) in (&mut ca).zip(&mut cb) {
            for l in 0..LANES {
                let (s, e) = two_sum(self.sum[l], x[l] * y[l]);
                self.sum[l] = s;
                self.err[l] += e;
            }
        }
        for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
            self.add(x * y);
        }
    }

    /// Merges another accumulator (order matters for bitwise results).
    pub fn merge(&mut self, other: &Self) {
        for l in 0..LANES {
            let (s, e) = two_sum(self.sum[l], other.sum[l]);
            self.sum[l] = s;
            self.err[l] += e + other.err[l];
        }
    }

    pub fn value(&self) -> T {
        let mut s = T::zero();
        let mut e = T::zero();
        for l in 0..LANES {
            let (ns, ne) = two_sum(s, self.sum[l]);
            s = ns;
            e += ne + self.err[l];
        }
        s + e
    }
}

/// Compensated sum of an iterator.
pub fn csum<T: Scalar, I: IntoIterator<Item = T>>(it: I) -> T {
    let mut acc = CompensatedSum::new();
    for x in it {
        acc.add(x);
    }
    acc.value()
}

/// Compensated dot product of two equal-length slices.
pub fn cdot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = CompensatedSum::new();
    acc.add_products(a, b);
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn compensated_sum_recovers_cancellation() {
        let xs = [1.0e16, 1.0, -1.0e16, 1.0];
        assert_eq!(csum(xs.iter().copied()), 2.0);
        let naive: f64 = xs.iter().sum();
        assert_ne!(naive, 2.0);
    }

    #[test]
    fn many_tenths() {
        let s = csum(std::iter::repeat(0.1f64).take(1_000_000));
        assert!((s - 100_000.0).abs() < 1e-9);
    }

    #[test]
    fn slice_and_scalar_paths_agree() {
        let xs: Vec<f64> = (0..1003).map(|i| ((i * 37) % 101) as f64 * 0.013 - 0.6).collect();
        let mut a = CompensatedSum::new();
        a.add_slice(&xs);
        let b = csum(xs.iter().copied());
        assert!((a.value() - b).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn matches_exact_integer_sum(v in proptest::collection::vec(-1_000_000i64..1_000_000, 0..500)) {
            let exact: i64 = v.iter().sum();
            let s = csum(v.iter().map(|&x| x as f64 * 0.5));
            prop_assert_eq!(s, exact as f64 * 0.5);
        }
    }
}
