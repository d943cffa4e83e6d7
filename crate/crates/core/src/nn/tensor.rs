use crate::error::{Error, Result};
use crate::nn::Real;

/// Dense NCHW activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 4], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.dims[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// Elements in one sample (C·H·W).
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
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

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel-wise concatenation `[self, other]`.
    pub fn concat_channels(&self, other: &Tensor4<T>) -> Result<Tensor4<T>> {
        let [n, c1, h, w] = self.dims;
        let [n2, c2, h2, w2] = other.dims;
        if n != n2 || h != h2 || w != w2 {
            return Err(Error::shape(format!(
                "cannot concatenate {:?} with {:?}",
                self.dims, other.dims
            )));
        }
        let mut data = Vec::with_capacity(n * (c1 + c2) * h * w);
        for i in 0..n {
            data.extend_from_slice(self.sample(i));
            data.extend_from_slice(other.sample(i));
        }
        Ok(Tensor4 {
            dims: [n, c1 + c2, h, w],
            data,
        })
    }

    /// Inverse of [`Tensor4::concat_channels`]: split after `first` channels.
    pub fn split_channels(&self, first: usize) -> (Tensor4<T>, Tensor4<T>) {
        let [n, c, h, w] = self.dims;
        assert!(first <= c);
        let plane = h * w;
        let mut a = Vec::with_capacity(n * first * plane);
        let mut b = Vec::with_capacity(n * (c - first) * plane);
        for i in 0..n {
            let s = self.sample(i);
            a.extend_from_slice(&s[..first * plane]);
            b.extend_from_slice(&s[first * plane..]);
        }
        (
            Tensor4 {
                dims: [n, first, h, w],
                data: a,
            },
            Tensor4 {
                dims: [n, c - first, h, w],
                data: b,
            },
        )
    }

    pub fn add_assign(&mut self, other: &Tensor4<T>) {
        assert_eq!(self.dims, other.dims, "tensor add: dims differ");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
