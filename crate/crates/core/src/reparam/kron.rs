//! Nearest Kronecker product via the Van Loan–Pitsiantis rearrangement.
//!
//! For `A` of shape `(a*b) x (c*d)` viewed as an `a x c` grid of `b x d`
//! blocks, `R(A)` has one row per block (row-major block order) holding that
//! block flattened row-major. Then `R(F ⊗ G) = vec(F) vec(G)^T` and the best
//! `F ⊗ G` in Frobenius norm comes from the leading singular pair of `R(A)`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor2D;

/// Factor dimensions: `F` is `a x c`, `G` is `b x d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KronShape {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
}

impl KronShape {
    pub fn check(&self, rows: usize, cols: usize) -> Result<()> {
        let ok = self.a * self.b == rows
            && self.c * self.d == cols
            && self.a * self.b * self.c * self.d > 0;
        if !ok {
            return Err(Error::ShapeFactorizationMismatch {
                rows,
                cols,
                a: self.a,
                b: self.b,
                c: self.c,
                d: self.d,
            });
        }
        Ok(())
    }

    /// Balanced split: `a` is the smallest divisor of `rows` with `a^2 >= rows`,
    /// likewise `c` for `cols`.
    pub fn balanced(rows: usize, cols: usize) -> Self {
        let a = balanced_divisor(rows);
        let c = balanced_divisor(cols);
        Self {
            a,
            b: rows / a,
            c,
            d: cols / c,
        }
    }
}

fn balanced_divisor(n: usize) -> usize {
    (1..=n).find(|&a| n % a == 0 && a * a >= n).unwrap_or(n)
}

#[derive(Debug, Clone)]
pub struct KroneckerApprox {
    pub shape: KronShape,
    pub factor_a: DMatrix<f64>,
    pub factor_b: DMatrix<f64>,
    /// Spectrum of `R(A)`, descending.
    pub rearranged_singular_values: Vec<f64>,
}

impl KroneckerApprox {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.factor_a.kronecker(&self.factor_b)
    }

    pub fn to_tensor(&self) -> Result<Tensor2D> {
        Tensor2D::from_dmatrix(&self.reconstruct())
    }

    /// `sqrt(sum_{k > 1} sigma_k(R(A))^2)`.
    pub fn tail_energy(&self) -> f64 {
        self.rearranged_singular_values
            .iter()
            .skip(1)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn rearrange_matrix(m: &DMatrix<f64>, s: KronShape) -> Result<DMatrix<f64>> {
    s.check(m.nrows(), m.ncols())?;
    let mut r = DMatrix::zeros(s.a * s.c, s.b * s.d);
    for i1 in 0..s.a {
        for j1 in 0..s.c {
            let row = i1 * s.c + j1;
            for i2 in 0..s.b {
                for j2 in 0..s.d {
                    r[(row, i2 * s.d + j2)] = m[(i1 * s.b + i2, j1 * s.d + j2)];
                }
            }
        }
    }
    Ok(r)
}

pub fn rearrange(a: &Tensor2D, shape: KronShape) -> Result<Tensor2D> {
    Tensor2D::from_dmatrix(&rearrange_matrix(&a.to_dmatrix(), shape)?)
}

/// Rank-1 nearest Kronecker product `F ⊗ G` of `a`.
pub fn kronecker_approx(a: &Tensor2D, shape: KronShape) -> Result<KroneckerApprox> {
    let r = rearrange_matrix(&a.to_dmatrix(), shape)?;
    let s = linalg::svd(&r);
    let sigma = s.singular_values[0];
    let root = sigma.sqrt();
    let u = s.u.column(0);
    let v = s.v_t.row(0);
    let factor_a = DMatrix::from_fn(shape.a, shape.c, |i, j| root * u[i * shape.c + j]);
    let factor_b = DMatrix::from_fn(shape.b, shape.d, |i, j| root * v[i * shape.d + j]);
    Ok(KroneckerApprox {
        shape,
        factor_a,
        factor_b,
        rearranged_singular_values: s.singular_values.iter().copied().collect(),
    })
}
