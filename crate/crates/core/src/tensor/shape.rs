//! Tensor extents, rank 0..=4.

use crate::error::{LpsError, Result};

/// Row-major extents. By convention rank-4 is [batch, channels, height, width].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        if dims.len() > 4 {
            return Err(LpsError::shape(format!("rank {} > 4", dims.len())));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(LpsError::shape(format!("zero extent in {dims:?}")));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.0.is_empty()
    }

    /// (N1, N2) of the trailing two dims; rank-1 reports (1, N); scalars (1, 1).
    pub fn spatial_or_unit(&self) -> (usize, usize) {
        match self.0.len() {
            0 => (1, 1),
            1 => (1, self.0[0]),
            n => (self.0[n - 2], self.0[n - 1]),
        }
    }

    /// [B, C, N1, N2] accessors; errors on other ranks.
    pub fn as_bchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(LpsError::shape(format!("expected rank-4 [B,C,N1,N2], got {:?}", self.0))),
        }
    }

    pub fn as_2d(&self) -> Result<(usize, usize)> {
        match self.0[..] {
            [r, c] => Ok((r, c)),
            _ => Err(LpsError::shape(format!("expected rank-2, got {:?}", self.0))),
        }
    }
}

impl From<&[usize]> for Shape {
    fn from(dims: &[usize]) -> Self {
        Shape::from_dims(dims).expect("invalid shape")
    }
}
