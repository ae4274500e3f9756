use std::fmt::Debug;
use std::iter::Sum;
use std::sync::Arc;

use rayon::prelude::*;

/// Element type of tensors: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Copy + Clone + Debug + PartialOrd + Send + Sync + Sum + num_traits::Float + num_traits::NumAssign + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Immutable dense array. Cloning shares the underlying buffer.
#[derive(Clone, Debug)]
pub struct TensorData<E: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

/// Row-parallel kernels only pay off above this many multiply-adds.
const PAR_FLOP_THRESHOLD: usize = 1 << 19;

impl<E: Scalar> TensorData<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match buffer of {} elements",
            shape,
            data.len()
        );
        Self { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![E::zero(); n])
    }

    pub fn scalar(value: E) -> Self {
        Self::new(vec![], vec![value])
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Self {
        Self::new(shape, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn values(&self) -> &[E] {
        &self.data
    }

    pub fn scalar_value(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| Scalar::to_f64(v)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same buffer, new shape; element count must be preserved.
    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.numel());
        Self { shape, data: Arc::clone(&self.data) }
    }

    /// Size of the last axis (the feature axis for most ops here).
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank-0 tensor has no last axis")
    }

    pub fn map(&self, f: impl Fn(E) -> E + Sync) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, other: &Self, f: impl Fn(E, E) -> E + Sync) -> Self {
        assert_eq!(self.shape, other.shape);
        let out = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.shape.clone(), out)
    }
}

/// `out[m,n] = a[m,k] · b[k,n]`, deterministic regardless of thread count:
/// each output row is reduced sequentially by exactly one worker.
pub fn matmul<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    let row = |i: usize, out_row: &mut [E]| {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == E::zero() {
                continue;
            }
            let brow = &b[kk * n..kk * n + n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
    out
}

/// `out[m,k] = g[m,n] · bᵀ[n,k]` — the `dA` side of matmul backward.
pub fn matmul_nt<E: Scalar>(g: &[E], b: &[E], m: usize, n: usize, k: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * k];
    let row = |i: usize, out_row: &mut [E]| {
        for j in 0..n {
            let gij = g[i * n + j];
            if gij == E::zero() {
                continue;
            }
            for (kk, o) in out_row.iter_mut().enumerate() {
                *o += gij * b[kk * n + j];
            }
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(k).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(k).enumerate() {
            row(i, r);
        }
    }
    out
}

/// `out[k,n] = aᵀ[k,m] · g[m,n]` — the `dB` side of matmul backward.
/// Accumulated sequentially over `m` so the reduction order is fixed.
pub fn matmul_tn<E: Scalar>(a: &[E], g: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); k * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == E::zero() {
                continue;
            }
            let grow = &g[i * n..i * n + n];
            let orow = &mut out[kk * n..kk * n + n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
    out
}
