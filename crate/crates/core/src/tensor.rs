//! Dense tensors, named parameter collections and the GEMM entry point.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use indexmap::IndexMap;
use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{GerspError, Result};

/// Floating-point element type usable by the network code.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// The strides must keep every access inside the backing slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits in scalar")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major GEMM, BLAS style: `C[m,n] = alpha * op(A) * op(B) + beta * C`.
///
/// `A` is stored as `[m,k]` (or `[k,m]` when `trans_a`), `B` as `[k,n]`
/// (or `[n,k]` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: A too small");
    assert!(b.len() >= k * n, "gemm: B too small");
    assert!(c.len() >= m * n, "gemm: C too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: sizes were checked above and the strides describe dense
    // row-major matrices of exactly those sizes.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
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
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(GerspError::InvalidInput(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, cols) = self.dims2();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let (_, cols) = self.dims2();
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.f64()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum()
    }
}

/// Ordered, named collection of tensors (weights, gradients, running stats).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| GerspError::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| GerspError::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes, in order.
    /// The error names the first offending tensor.
    pub fn check_congruent<U: Scalar>(&self, other: &ParamSet<U>) -> Result<()> {
        for (name, t) in self.iter() {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(GerspError::ShapeMismatch {
                    name: name.to_string(),
                    expected: t.shape().to_vec(),
                    found: o.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = other.names().find(|n| !self.contains(n)) {
            return Err(GerspError::MissingTensor(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    pub fn sq_norm(&self) -> f64 {
        self.entries.values().map(Tensor::sq_norm).sum()
    }

    /// Euclidean distance between two congruent sets.
    pub fn distance(&self, other: &ParamSet<T>) -> f64 {
        self.iter()
            .map(|(name, t)| {
                let o = other.get(name).expect("congruent sets");
                t.data()
                    .iter()
                    .zip(o.data())
                    .map(|(a, b)| {
                        let d = a.f64() - b.f64();
                        d * d
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    /// CRC32 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(&v.f64().to_le_bytes());
            }
        }
        h.finalize()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transpositions() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let expected = naive(&a, &b, m, k, n);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut c = vec![0.0; m * n];
            gemm(ta, tb, m, n, k, 1.0, aa, bb, 0.0, &mut c);
            for (x, y) in c.iter().zip(&expected) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn congruence_names_first_offender() {
        let mut a = ParamSet::<f32>::new();
        a.insert("w1", Tensor::zeros(&[2, 2]));
        a.insert("w2", Tensor::zeros(&[3]));
        let mut b = a.clone();
        b.insert("w2", Tensor::zeros(&[4]));
        match a.check_congruent(&b) {
            Err(GerspError::ShapeMismatch { name, .. }) => assert_eq!(name, "w2"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
