use serde::{Deserialize, Serialize};

use super::PixelPoint;
use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tensor2};

/// Learned rotary basis: one 2-vector per two-dimensional subspace.
/// A relative position Δp turns into the per-subspace angle θ_k = b_k·Δp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotaryBasis {
    /// (d/2)×2 matrix of basis vectors.
    basis: Tensor2,
}

impl RotaryBasis {
    /// Build a basis for vectors of length `d` (d even).
    pub fn new(basis: Tensor2) -> Result<Self> {
        if basis.cols() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "rotary basis must be (d/2)x2, got {:?}",
                basis.shape()
            )));
        }
        basis.check_finite("rotary basis")?;
        Ok(RotaryBasis { basis })
    }

    pub fn zeros(d: usize) -> Result<Self> {
        if d % 2 != 0 {
            return Err(Error::OddDimension(d));
        }
        Self::new(Tensor2::zeros(d / 2, 2))
    }

    pub fn subspaces(&self) -> usize {
        self.basis.rows()
    }

    pub fn dim(&self) -> usize {
        2 * self.basis.rows()
    }

    pub fn tensor(&self) -> &Tensor2 {
        &self.basis
    }

    /// θ_k = b_k · Δp for every subspace.
    pub fn angles(&self, delta_p: PixelPoint) -> Vec<Scalar> {
        (0..self.basis.rows())
            .map(|k| {
                self.basis.get(k, 0) * delta_p.x as Scalar
                    + self.basis.get(k, 1) * delta_p.y as Scalar
            })
            .collect()
    }
}

/// Apply the block-diagonal rotation R(Δp) to `v`: adjacent coordinate pair
/// (2k, 2k+1) is rotated by θ_k = b_k·Δp. Norm-preserving.
pub fn rotary_matrix_apply(
    basis: &RotaryBasis,
    delta_p: PixelPoint,
    v: &[Scalar],
) -> Result<Vec<Scalar>> {
    if v.len() % 2 != 0 {
        return Err(Error::OddDimension(v.len()));
    }
    if v.len() != basis.dim() {
        return Err(Error::ShapeMismatch(format!(
            "vector length {} vs rotary basis dimension {}",
            v.len(),
            basis.dim()
        )));
    }
    let angles = basis.angles(delta_p);
    let mut out = vec![0.0; v.len()];
    for (k, theta) in angles.iter().enumerate() {
        let (s, c) = theta.sin_cos();
        let x0 = v[2 * k];
        let x1 = v[2 * k + 1];
        out[2 * k] = x0 * c - x1 * s;
        out[2 * k + 1] = x0 * s + x1 * c;
    }
    Ok(out)
}
