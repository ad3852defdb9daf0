use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor2D;

/// Truncated-SVD approximation `left * right^T`.
#[derive(Debug, Clone)]
pub struct LowRankApprox {
    pub rank: usize,
    /// `m x r`, columns scaled by the kept singular values.
    pub left: DMatrix<f64>,
    /// `n x r`.
    pub right: DMatrix<f64>,
    /// `sqrt(sum_{k > r} sigma_k^2)`.
    pub tail_energy: f64,
    /// Full spectrum of the source, descending.
    pub singular_values: Vec<f64>,
}

impl LowRankApprox {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.left * self.right.transpose()
    }

    pub fn to_tensor(&self) -> Result<Tensor2D> {
        Tensor2D::from_dmatrix(&self.reconstruct())
    }

    /// `sigma_{r+1}`, or 0 when the approximation is exact.
    pub fn next_singular_value(&self) -> f64 {
        self.singular_values.get(self.rank).copied().unwrap_or(0.0)
    }
}

pub fn svd_lowrank(a: &Tensor2D, rank: usize) -> Result<LowRankApprox> {
    let (m, n) = a.shape();
    let max = m.min(n);
    if rank > max {
        return Err(Error::RankTooLarge { rank, max });
    }
    let s = linalg::svd(&a.to_dmatrix());
    let sv: Vec<f64> = s.singular_values.iter().copied().collect();
    let mut left = s.u.columns(0, rank).into_owned();
    for (j, mut col) in left.column_iter_mut().enumerate() {
        col *= sv[j];
    }
    let right = s.v_t.rows(0, rank).transpose();
    let tail_energy = sv[rank..].iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(LowRankApprox {
        rank,
        left,
        right,
        tail_energy,
        singular_values: sv,
    })
}
