//! Dense row-major f32 tensors plus a reverse-mode tape.
//!
//! `Tensor` is plain storage with shape; all differentiable structure lives
//! in [`tape::Graph`]. Inference-only code (the diffusion sampler, metric
//! kernels) works on `Tensor` directly.

pub mod gradcheck;
pub mod kernels;
pub mod rng;
pub mod tape;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn randn(shape: &[usize], rng: &mut rng::Rng) -> Self {
        let mut t = Self::zeros(shape);
        rng.fill_normal(&mut t.data, 0.0, 1.0);
        t
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    // Plain arithmetic for inference-side math (no tape involvement).

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self { shape: self.shape.clone(), data, requires_grad: false, grad: None }
    }

    pub fn scale(&self, c: f32) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self { shape: self.shape.clone(), data, requires_grad: false, grad: None }
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self { shape: self.shape.clone(), data, requires_grad: false, grad: None }
    }

    pub fn mul(&self, other: &Self) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Self { shape: self.shape.clone(), data, requires_grad: false, grad: None }
    }

    /// self + c * other, elementwise.
    pub fn axpy(&self, c: f32, other: &Self) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + c * b).collect();
        Self { shape: self.shape.clone(), data, requires_grad: false, grad: None }
    }

    /// Blend: mask * self + (1 - mask) * other. Mask values are 0/1 weights.
    pub fn lerp_by_mask(&self, other: &Self, mask: &Self) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        debug_assert_eq!(self.shape, mask.shape);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .zip(&mask.data)
            .map(|((a, b), m)| m * a + (1.0 - m) * b)
            .collect();
        Self { shape: self.shape.clone(), data, requires_grad: false, grad: None }
    }

    /// Mean of all elements, accumulated in f64.
    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        let s: f64 = self.data.iter().map(|&v| v as f64).sum();
        (s / self.data.len() as f64) as f32
    }

    /// Mean squared difference, accumulated in f64.
    pub fn mse(&self, other: &Self) -> f32 {
        debug_assert_eq!(self.shape, other.shape);
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        (s / self.data.len().max(1) as f64) as f32
    }

    pub fn dot(&self, other: &Self) -> f32 {
        debug_assert_eq!(self.shape, other.shape);
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a * b) as f64).sum();
        s as f32
    }

    pub fn norm(&self) -> f32 {
        let s: f64 = self.data.iter().map(|&v| (v as f64) * (v as f64)).sum();
        (s.sqrt()) as f32
    }
}

/// Cosine similarity of two flat vectors. Errors on zero norm.
pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape != b.shape {
        return Err(Error::shape(format!("cosine_sim: {:?} vs {:?}", a.shape, b.shape)));
    }
    let na = a.norm() as f64;
    let nb = b.norm() as f64;
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::numeric("cosine_sim: zero-norm vector"));
    }
    let mut dot = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        dot += (*x as f64) * (*y as f64);
    }
    Ok((dot / (na * nb)) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let r = t.clone().reshaped(&[3, 2]).unwrap();
        assert_eq!(r.shape, vec![3, 2]);
        assert_eq!(r.data, t.data);
        assert!(t.clone().reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn cosine_basics() {
        let a = Tensor::new(&[3], vec![1.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(&[3], vec![0.0, 1.0, 0.0]).unwrap();
        assert!((cosine_sim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        assert!(cosine_sim(&a, &b).unwrap().abs() < 1e-6);
        let z = Tensor::zeros(&[3]);
        assert!(cosine_sim(&a, &z).is_err());
    }

    #[test]
    fn mask_blend() {
        let a = Tensor::full(&[4], 1.0);
        let b = Tensor::full(&[4], 5.0);
        let m = Tensor::new(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(a.lerp_by_mask(&b, &m).data, vec![1.0, 5.0, 1.0, 5.0]);
    }
}
