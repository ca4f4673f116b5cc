//! Dense f64 tensors (rank 0..=4, row-major) and the autodiff tape built on them.
//!
//! All arithmetic is 64-bit. Operations that feed equivariance checks use a
//! fixed per-element summation order so that circular shifts commute with
//! convolution bit-exactly, and global pooling uses an exact accumulator so
//! that spatial permutations of the same values produce identical sums.

mod conv;
mod exact;
mod grad_check;
mod shape;
mod tape;

pub use conv::{Conv2dCfg, PadMode};
pub use exact::{exact_mean, exact_sum, ExactAcc};
pub use grad_check::{grad_check, grad_check_params, GradCheckReport};
pub use shape::Shape;
pub use tape::{Tape, Var};

use crate::error::{LpsError, Result};
use rand::Rng;

/// Dense real tensor: shape plus row-major f64 data.
///
/// Tensors are plain values; gradients live on the [`Tape`] nodes that
/// reference them.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(LpsError::shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape.dims(),
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Tensor::new(Shape::from_dims(dims)?, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(other.shape.clone())
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        let n = shape.numel();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![value] }
    }

    /// Centered uniform init with fan-in scaling: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn uniform_fanin<R: Rng>(dims: &[usize], fan_in: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let shape = Shape::from_dims(dims)?;
        let data = (0..shape.numel()).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape, data)
    }

    /// Standard normal entries.
    pub fn randn<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self> {
        use rand_distr_normal::sample_standard;
        let shape = Shape::from_dims(dims)?;
        let data = (0..shape.numel()).map(|_| sample_standard(rng)).collect();
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Single scalar value of a rank-0 or one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(LpsError::shape(format!("item() on tensor with {} elements", self.data.len())));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(LpsError::Invalid("tensor contains NaN/Inf".into()))
        }
    }

    /// Max absolute entry; 0 for empty tensors.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Max absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(LpsError::shape("max_abs_diff: shape mismatch".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Lp norm over all entries (fixed row-major summation order).
    pub fn norm(&self, p: f64) -> f64 {
        if p == 2.0 {
            let mut acc = 0.0;
            for v in &self.data {
                acc += v * v;
            }
            acc.sqrt()
        } else {
            let mut acc = 0.0;
            for v in &self.data {
                acc += v.abs().powf(p);
            }
            acc.powf(1.0 / p)
        }
    }

    /// Circular shift of the trailing spatial dims: out[.., n1, n2] = x[.., (n1+s1) mod N1, (n2+s2) mod N2].
    ///
    /// Rank-1 tensors shift along their only axis by `s2` (s1 is reduced mod 1).
    pub fn roll(&self, s1: i64, s2: i64) -> Tensor {
        let (n1, n2) = self.shape.spatial_or_unit();
        let planes = self.numel() / (n1 * n2);
        let s1 = s1.rem_euclid(n1 as i64) as usize;
        let s2 = s2.rem_euclid(n2 as i64) as usize;
        let mut out = vec![0.0; self.numel()];
        for p in 0..planes {
            let src = &self.data[p * n1 * n2..(p + 1) * n1 * n2];
            let dst = &mut out[p * n1 * n2..(p + 1) * n1 * n2];
            for i in 0..n1 {
                let si = (i + s1) % n1;
                for j in 0..n2 {
                    dst[i * n2 + j] = src[si * n2 + (j + s2) % n2];
                }
            }
        }
        Tensor { shape: self.shape.clone(), data: out }
    }
}

/// Box-Muller standard normal, driven by an explicit RNG stream.
mod rand_distr_normal {
    use rand::Rng;

    pub fn sample_standard<R: Rng>(rng: &mut R) -> f64 {
        // u in (0,1] to keep ln finite.
        let u: f64 = 1.0 - rng.gen::<f64>();
        let v: f64 = rng.gen();
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roll_matches_definition_1d() {
        let x = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(x.roll(0, 1).data(), &[2.0, 3.0, 4.0, 1.0]);
        assert_eq!(x.roll(0, 0).data(), x.data());
        assert_eq!(x.roll(0, 4).data(), x.data());
        assert_eq!(x.roll(0, -1).data(), &[4.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn roll_round_trips() {
        let x = Tensor::from_vec(&[1, 2, 4, 6], (0..48).map(|i| i as f64).collect()).unwrap();
        let back = x.roll(3, 5).roll(-3, -5);
        assert_eq!(back, x);
    }

    #[test]
    fn roll_2d_indexing() {
        // 2x2 map [[a,b],[c,d]], shift (1,0) moves row 1 to row 0.
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(x.roll(1, 0).data(), &[3.0, 4.0, 1.0, 2.0]);
        assert_eq!(x.roll(0, 1).data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }
}
