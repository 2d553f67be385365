use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand::RngCore;

use crate::{Error, Real, Result};

/// Dense 4-D array stored row-major.
///
/// Activations use `(n, h, w, c)` order. Convolution kernels reuse the same
/// container with `(kh, kw, c_in, c_out)` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::EmptyTensor(dims));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::DataLength { dims, len: data.len() });
        }
        Ok(Tensor { dims, data })
    }

    /// Panics if a dimension is zero.
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: [usize; 4], value: T) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "tensor dims must be >= 1: {dims:?}");
        Tensor { dims, data: vec![value; dims.iter().product()] }
    }

    /// Standard-normal samples scaled by `std` (Box–Muller).
    pub fn random_normal(dims: [usize; 4], std: f64, rng: &mut impl RngCore) -> Self {
        let mut t = Self::zeros(dims);
        for v in t.data.iter_mut() {
            *v = T::of_f64(std * standard_normal(rng));
        }
        t
    }

    pub fn random_uniform(dims: [usize; 4], lo: f64, hi: f64, rng: &mut impl RngCore) -> Self {
        let mut t = Self::zeros(dims);
        for v in t.data.iter_mut() {
            *v = T::of_f64(rng.gen_range(lo..hi));
        }
        t
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.dims[0]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.dims[1]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.dims[2]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.dims[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, i: usize, y: usize, x: usize, ch: usize) -> usize {
        ((i * self.dims[1] + y) * self.dims[2] + x) * self.dims[3] + ch
    }

    #[inline]
    pub fn at(&self, i: usize, y: usize, x: usize, ch: usize) -> T {
        self.data[self.offset(i, y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, y: usize, x: usize, ch: usize, v: T) {
        let o = self.offset(i, y, x, ch);
        self.data[o] = v;
    }

    /// The `c`-length channel vector at one site.
    #[inline]
    pub fn pixel(&self, i: usize, y: usize, x: usize) -> &[T] {
        let o = self.offset(i, y, x, 0);
        &self.data[o..o + self.dims[3]]
    }

    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { dims: self.dims, data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect() }
    }

    /// Copies sample `i` of the batch out as a batch of one.
    pub fn sample(&self, i: usize) -> Self {
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        Tensor {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Concatenates along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let [_, h, w, c] = first.dims;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            if t.dims[1..] != [h, w, c] {
                return Err(Error::dim("stack", alloc::format!("{:?} vs {:?}", t.dims, first.dims)));
            }
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Self::from_vec([n, h, w, c], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub(crate) fn standard_normal(rng: &mut impl RngCore) -> f64 {
    // Box–Muller; u1 is kept away from zero so ln is finite.
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen::<f64>();
    num_traits::Float::sqrt(-2.0 * num_traits::Float::ln(u1))
        * num_traits::Float::cos(2.0 * core::f64::consts::PI * u2)
}
