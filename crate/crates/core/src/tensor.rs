//! Dense row-major tensors. Images use NCHW layout.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Self {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    /// First axis extent (batch size for NCHW images).
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per item along the first axis.
    pub fn item_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn item(&self, index: usize) -> &[T] {
        let n = self.item_len();
        &self.data[index * n..(index + 1) * n]
    }

    /// Stacks equally shaped items along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Self {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(inner.iter().product::<usize>() * items.len());
        for t in items {
            assert_eq!(t.shape, inner, "stack: shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Self { shape, data }
    }

    /// Concatenates along the leading axis.
    pub fn concat(items: &[&Tensor<T>]) -> Self {
        assert!(!items.is_empty(), "cannot concat zero tensors");
        let tail = items[0].shape[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for t in items {
            assert_eq!(t.shape[1..], tail[..], "concat: trailing shape mismatch");
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Self { shape, data }
    }

    /// Item `index` along the leading axis, keeping a leading axis of 1.
    pub fn select(&self, index: usize) -> Self {
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self {
            shape,
            data: self.item(index).to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn mean(&self) -> T {
        let n = T::from_usize(self.data.len()).unwrap();
        self.data.iter().copied().sum::<T>() / n
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Converts element type (used when moving images between f32 and f64 paths).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}
