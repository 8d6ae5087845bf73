use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::element::Element;

/// Dense row-major tensor. Image batches use NCHW layout.
///
/// Serializes as `{"shape": [..], "dtype": "f32", "data": "<base64 of little-endian values>"}`
/// so values round-trip bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Panics when `data.len()` does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::from_vec(shape, data.iter().map(|&v| T::of(v)).collect())
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape size");
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Item `i` along the leading axis, keeping a leading axis of size 1.
    pub fn item(&self, i: usize) -> Self {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self { shape, data: self.data[i * per..(i + 1) * per].to_vec() }
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack(items: &[Self]) -> Self {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let tail = &items[0].shape[1..];
        let mut data = Vec::with_capacity(items.iter().map(|t| t.data.len()).sum());
        let mut lead = 0;
        for t in items {
            assert_eq!(&t.shape[1..], tail, "stack shape mismatch");
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Self { shape, data }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    dtype: String,
    data: String,
}

impl<T: Element> Serialize for Tensor<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut bytes = Vec::with_capacity(self.data.len() * T::BYTES);
        for &v in &self.data {
            v.write_le(&mut bytes);
        }
        TensorRepr { shape: self.shape.clone(), dtype: T::DTYPE.to_string(), data: B64.encode(bytes) }.serialize(s)
    }
}

impl<'de, T: Element> Deserialize<'de> for Tensor<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = TensorRepr::deserialize(d)?;
        if repr.dtype != T::DTYPE {
            return Err(D::Error::custom(format!("expected dtype {}, found {}", T::DTYPE, repr.dtype)));
        }
        let bytes = B64.decode(repr.data.as_bytes()).map_err(D::Error::custom)?;
        let n: usize = repr.shape.iter().product();
        if bytes.len() != n * T::BYTES {
            return Err(D::Error::custom("tensor data length does not match shape"));
        }
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Self { shape: repr.shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_and_item_round_trip() {
        let a = Tensor::<f32>::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::<f32>::from_f64(&[1, 2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let s = Tensor::stack(&[a.clone(), b.clone()]);
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.item(0), a);
        assert_eq!(s.item(1), b);
    }

    #[test]
    fn serde_round_trip_is_bit_exact() {
        let t = Tensor::<f32>::from_vec(&[3], vec![0.1, -1.0e-38, f32::MAX]);
        let json = serde_json::to_string(&t).unwrap();
        let back: Tensor<f32> = serde_json::from_str(&json).unwrap();
        assert_eq!(t, back);
        assert!(serde_json::from_str::<Tensor<f64>>(&json).is_err());
    }

    #[test]
    #[should_panic]
    fn from_vec_rejects_bad_length() {
        let _ = Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]);
    }
}
