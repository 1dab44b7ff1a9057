use crate::error::{EngineError, Result};
use crate::real::Real;

/// Dense row-major array. The first dimension is the batch dimension
/// wherever a tensor carries a batch of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(EngineError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        check_shape(shape).expect("Tensor::full: invalid shape");
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Builds a tensor from values given as `f64`, converting to `T`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Leading (batch) dimension.
    pub fn batch_size(&self) -> usize {
        self.shape[0]
    }

    /// Shape of one sample: every dimension after the first.
    pub fn sample_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    /// Number of elements in one sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(EngineError::DataLength {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Samples `start..end` along the batch dimension.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor<T> {
        assert!(start < end && end <= self.batch_size(), "slice_batch out of range");
        let step = self.sample_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * step..end * step].to_vec(),
        }
    }

    /// Gathers the listed samples, in order, into a new batch.
    pub fn gather(&self, indices: &[usize]) -> Tensor<T> {
        assert!(!indices.is_empty(), "gather of zero samples");
        let step = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * step);
        for &i in indices {
            data.extend_from_slice(&self.data[i * step..(i + 1) * step]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    /// Borrow sample `i` of a batch as a flat slice.
    pub fn sample(&self, i: usize) -> &[T] {
        let step = self.sample_len();
        &self.data[i * step..(i + 1) * step]
    }

    /// Stacks equally-shaped samples into a batch `[n, ..sample_shape]`.
    pub fn stack(sample_shape: &[usize], samples: &[&[T]]) -> Result<Self> {
        let step: usize = sample_shape.iter().product();
        let mut data = Vec::with_capacity(step * samples.len());
        for s in samples {
            if s.len() != step {
                return Err(EngineError::DataLength {
                    shape: sample_shape.to_vec(),
                    len: s.len(),
                });
            }
            data.extend_from_slice(s);
        }
        let mut shape = Vec::with_capacity(sample_shape.len() + 1);
        shape.push(samples.len());
        shape.extend_from_slice(sample_shape);
        Tensor::new(shape, data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Row-wise argmax over a `[batch, classes]` tensor; ties go to the
    /// lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let cols = self.sample_len();
        self.data
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(EngineError::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, EngineError::DataLength { .. }));
    }

    #[test]
    fn rejects_zero_dimension() {
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn argmax_ties_lowest_index() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.2, 0.4, 0.4, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.argmax_rows(), vec![1, 0]);
    }

    #[test]
    fn gather_and_slice() {
        let t = Tensor::<f32>::new(vec![3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(t.gather(&[2, 0]).data(), &[4., 5., 0., 1.]);
        assert_eq!(t.slice_batch(1, 3).shape(), &[2, 2]);
        assert_eq!(t.sample(1), &[2., 3.]);
    }

    #[test]
    fn cast_roundtrip_is_exact_for_f32_values() {
        let t = Tensor::<f32>::new(vec![3], vec![0.1, -7.25, 1e-30]).unwrap();
        assert_eq!(t.cast::<f64>().cast::<f32>(), t);
    }
}
