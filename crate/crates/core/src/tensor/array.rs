use std::sync::Arc;

use super::scalar::Scalar;

/// Contiguous row-major n-dimensional value block. The data is shared
/// (`Arc`), so cloning an array, detaching a tensor, or wrapping a stored
/// parameter into a graph leaf never copies the payload.
#[derive(Clone, Debug)]
pub struct Array<E> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Scalar> Array<E> {
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Array {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Array::from_vec(shape, vec![E::zero(); numel])
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let numel: usize = shape.iter().product();
        Array::from_vec(shape, vec![v; numel])
    }

    pub fn scalar(v: E) -> Self {
        Array::from_vec(&[], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable view of the payload; copies first if the block is shared.
    pub fn data_mut(&mut self) -> &mut [E] {
        let v: &mut Vec<E> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    /// Same payload under a different shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape changes element count");
        Array {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        }
    }

    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on non-scalar array");
        self.data[0]
    }

    pub fn map<F: Fn(E) -> E>(&self, f: F) -> Self {
        Array::from_vec(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn share(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }
}

impl<E: Scalar> PartialEq for Array<E> {
    /// Exact (bitwise for finite values) equality; used by determinism tests.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data.iter().zip(other.data.iter()).all(|(a, b)| a == b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_shares_payload() {
        let a = Array::<f32>::from_vec(&[2, 3], vec![0.0; 6]);
        let b = a.reshaped(&[3, 2]);
        assert_eq!(b.shape(), &[3, 2]);
        assert!(Arc::ptr_eq(&a.data, &b.data));
    }

    #[test]
    #[should_panic]
    fn mismatched_shape_panics() {
        let _ = Array::<f32>::from_vec(&[2, 2], vec![0.0; 3]);
    }
}
