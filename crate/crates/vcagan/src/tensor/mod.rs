//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is plain owned data (shape + contiguous f64 values). All
//! differentiable computation happens on a [`Tape`], which records every
//! primitive op; [`Tape::grad`] builds gradients as new tape values, so
//! higher-order derivatives come out of the same machinery.
//!
//! Everything is double precision. That is deliberate: the gradient checks
//! this crate leans on need the headroom, and the model is small enough that
//! f64 throughput is not the bottleneck on the shapes we train at.

pub mod gradcheck;
pub mod kernels;
pub mod rnn;
mod tape;

pub use tape::{Tape, TensorId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{context}: dim {dim} expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        dim: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid convolution geometry: {0}")]
    BadConvGeometry(String),
    #[error("resize target extent must be >= 1")]
    ZeroResizeTarget,
    #[error("sequence must have at least one step")]
    EmptySequence,
}

/// Owned dense tensor: shape plus contiguous row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor::new(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug-build check of the finiteness invariant.
    pub fn debug_assert_finite(&self, what: &str) {
        debug_assert!(self.all_finite(), "non-finite values in {what}");
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Uniform values in [lo, hi) from the given RNG.
    pub fn rand_uniform<R: rand::Rng>(shape: &[usize], rng: &mut R, lo: f64, hi: f64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
        Tensor::new(shape.to_vec(), data)
    }

    /// Standard normal values via Box-Muller.
    pub fn rand_normal<R: rand::Rng>(shape: &[usize], rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            let r = (-2.0 * u1.ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u2;
            data.push(r * th.cos());
            if data.len() < n {
                data.push(r * th.sin());
            }
        }
        Tensor::new(shape.to_vec(), data)
    }
}
