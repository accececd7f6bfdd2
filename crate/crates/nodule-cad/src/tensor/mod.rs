//! Dense f64 tensors and reverse-mode differentiation.
//!
//! [`Tensor`] is a plain row-major buffer with a shape. [`DiffGraph`] is a
//! tape: operations executed through it record closures for the backward
//! pass, and [`DiffGraph::backward`] walks the tape in reverse to produce a
//! gradient for every leaf marked `requires_grad`. The op vocabulary is
//! exactly what the two networks need: 2D/3D convolution, transposed
//! convolution, max pooling, ROI pooling, dense layers, ReLU, inverted
//! dropout, softmax cross-entropy, and smooth-L1.
//!
//! All arithmetic is 64-bit; that keeps finite-difference gradient checks
//! sharp and costs nothing at desk scale.

mod gemm;
mod graph;
pub mod ops;

pub use graph::{DiffGraph, Gradients, Var};

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Magic bytes of the binary tensor format.
pub const TENSOR_MAGIC: [u8; 4] = *b"TNSR";

/// Dense N-dimensional array of f64, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Build a tensor from a shape and matching data buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!(
                "shape extents must be >= 1, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {expected} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert!(shape.iter().all(|&e| e >= 1), "zero extent in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// Fill with independent samples from `U(-half_width, half_width)`.
    pub fn uniform(shape: &[usize], half_width: f64, rng: &mut impl Rng) -> Self {
        let mut t = Tensor::zeros(shape);
        for v in t.data.iter_mut() {
            *v = rng.gen_range(-half_width..half_width);
        }
        t
    }

    /// Zero-mean Gaussian initialization with variance `2 / fan_in`.
    pub fn he_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        assert!(fan_in >= 1, "fan_in must be >= 1");
        Tensor::gaussian(shape, (2.0 / fan_in as f64).sqrt(), rng)
    }

    /// Zero-mean Gaussian with the given standard deviation.
    pub fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("valid normal");
        let mut t = Tensor::zeros(shape);
        for v in t.data.iter_mut() {
            *v = normal.sample(rng);
        }
        t
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Mark this tensor as a trainable leaf (builder style).
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    /// Same data, new shape; element count must match.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elems) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        })
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// Write in the binary format: magic, u32 rank, u32 extents, f64 data,
    /// all little-endian, row-major.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&TENSOR_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Read a tensor written by [`Tensor::write_to`].
    pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(read_err)?;
        if magic != TENSOR_MAGIC {
            return Err(Error::Parse(format!(
                "bad tensor magic {magic:?}, expected {TENSOR_MAGIC:?}"
            )));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(read_err)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Parse(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32buf).map_err(read_err)?;
            let e = u32::from_le_bytes(u32buf) as usize;
            if e == 0 {
                return Err(Error::Parse("zero extent in tensor header".into()));
            }
            shape.push(e);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut f64buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut f64buf).map_err(read_err)?;
            data.push(f64::from_le_bytes(f64buf));
        }
        Tensor::new(shape, data)
    }
}

fn read_err(e: std::io::Error) -> Error {
    Error::Parse(format!("truncated tensor stream: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn he_init_variance_matches_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let t = Tensor::he_init(&[1_000_000], 100, &mut rng);
        let mean: f64 = t.iter().sum::<f64>() / t.len() as f64;
        let var: f64 = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 1e-3, "mean {mean}");
        assert!((var - 0.02).abs() < 1e-3, "variance {var}, want 0.02");
    }

    #[test]
    fn he_init_fan_in_two_targets_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::he_init(&[200_000], 2, &mut rng);
        let var: f64 = t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        assert!((var - 1.0).abs() < 0.02, "variance {var}, want 1.0");
    }

    #[test]
    fn he_init_deterministic_under_fixed_seed() {
        let a = Tensor::he_init(&[64], 9, &mut ChaCha8Rng::seed_from_u64(3));
        let b = Tensor::he_init(&[64], 9, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn serialization_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Tensor::uniform(&[3, 4, 5], 10.0, &mut rng);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TNSR");
        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(t.shape(), back.shape());
        assert_eq!(t.data(), back.data());
    }

    #[test]
    fn read_rejects_bad_magic() {
        let buf = b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00".to_vec();
        assert!(Tensor::read_from(&mut buf.as_slice()).is_err());
    }
}
