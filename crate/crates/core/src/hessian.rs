//! Calibration Hessian and Hessian-aware rounding-matrix initialization.
//!
//! Columns are quantized left to right with RTN. Each column's error is
//! normalized by the diagonal of the upper Cholesky factor of the damped
//! inverse Hessian and pushed onto the columns not yet processed, in lazy
//! blocks of `blocksize` columns. The normalized error also shifts the
//! fractional residual that seeds the rounding matrix.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::quant::{self, QuantParams};
use crate::tensor::{matmul_f64, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HessianConfig {
    pub percdamp: f32,
    pub blocksize: usize,
    /// Subtract the raw weight-unit error from the residual instead of the
    /// scale-normalized one.
    pub literal_residual: bool,
}

impl Default for HessianConfig {
    fn default() -> Self {
        Self {
            percdamp: 0.01,
            blocksize: 128,
            literal_residual: false,
        }
    }
}

impl HessianConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.percdamp > 0.0) || self.blocksize == 0 {
            return Err(Error::InvalidConfig(format!(
                "percdamp must be > 0 and blocksize >= 1 (got {}, {})",
                self.percdamp, self.blocksize
            )));
        }
        Ok(())
    }
}

/// Upper Cholesky factor `U` of `(H + damp I)^-1`, i.e. `U^T U = (H + damp I)^-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianFactor {
    pub upper: Tensor2D,
}

impl HessianFactor {
    pub fn n(&self) -> usize {
        self.upper.rows()
    }

    pub fn identity(n: usize) -> Result<Self> {
        Ok(Self {
            upper: Tensor2D::identity(n)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitResult {
    /// Dequantized weights after error compensation.
    pub w_q: Tensor2D,
    /// `floor(u)` of the compensated weights on the integer grid.
    pub base: Tensor2D,
    pub h_tilde: Tensor2D,
}

/// `2 X X^T` for calibration activations `X` of shape `n x T`.
pub fn accumulate_hessian(x: &Tensor2D) -> Result<Tensor2D> {
    let (n, t) = x.shape();
    if t == 0 {
        return Err(Error::EmptyCalibration);
    }
    if let Some(idx) = x.first_non_finite() {
        return Err(Error::NonFiniteValue(idx));
    }
    let xs = x.to_f64();
    let mut h = vec![0.0f64; n * n];
    for i in 0..n {
        let xi = &xs[i * t..(i + 1) * t];
        for j in i..n {
            let xj = &xs[j * t..(j + 1) * t];
            let dot: f64 = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
            h[i * n + j] = 2.0 * dot;
            h[j * n + i] = 2.0 * dot;
        }
    }
    Tensor2D::new(n, n, h.into_iter().map(|v| v as f32).collect())
}

pub fn damped_inverse_factor(hmat: &Tensor2D, cfg: &HessianConfig) -> Result<HessianFactor> {
    cfg.validate()?;
    let (n, c) = hmat.shape();
    if n != c {
        return Err(Error::ShapeMismatch(format!(
            "Hessian must be square, got {n}x{c}"
        )));
    }
    let mut h = hmat.to_dmatrix();
    let damp = cfg.percdamp as f64 * h.diagonal().mean();
    for i in 0..n {
        h[(i, i)] += damp;
    }
    let inv = linalg::spd_inverse(&h)?;
    let upper = linalg::cholesky_lower(&inv)?.transpose();
    Ok(HessianFactor {
        upper: Tensor2D::from_dmatrix(&upper)?,
    })
}

/// Fractional residual `W/s - floor(W/s)` clipped to `[0, 1]`.
pub fn residual_init(w: &Tensor2D, p: &QuantParams) -> Result<Tensor2D> {
    quant::residual(w, p)
}

pub fn hessian_aware_init(
    w: &Tensor2D,
    p: &QuantParams,
    factor: &HessianFactor,
    cfg: &HessianConfig,
) -> Result<InitResult> {
    cfg.validate()?;
    let (m, n) = w.shape();
    if p.rows() != m {
        return Err(Error::ShapeMismatch(format!(
            "{m} weight rows vs {} quantization rows",
            p.rows()
        )));
    }
    if factor.upper.shape() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "factor is {}x{}, weights have {n} columns",
            factor.upper.rows(),
            factor.upper.cols()
        )));
    }

    let u_f = factor.upper.to_f64();
    let uf = |i: usize, j: usize| u_f[i * n + j];
    let mut work = w.to_f64();
    let mut w_q = Tensor2D::zeros(m, n)?;
    let mut base = Tensor2D::zeros(m, n)?;
    let mut h_tilde = Tensor2D::zeros(m, n)?;
    let (q_min, q_max) = (p.q_min as f32, p.q_max as f32);

    let mut i1 = 0;
    while i1 < n {
        let i2 = (i1 + cfg.blocksize).min(n);
        let width = i2 - i1;
        let mut block_err = vec![0.0f64; m * width];

        for j in 0..width {
            let col = i1 + j;
            let d = uf(col, col);
            for r in 0..m {
                let (s, z) = (p.scale[r], p.zero[r] as f32);
                let wv = work[r * n + col];
                let u = wv as f32 / s;
                let q = s * ((u.round() + z).clamp(q_min, q_max) - z);
                w_q.set(r, col, q);

                let err = (wv - q as f64) / d;
                block_err[r * width + j] = err;
                for k in col..i2 {
                    work[r * n + k] -= err * uf(col, k);
                }

                let b = u.floor();
                base.set(r, col, b);
                let shift = if cfg.literal_residual {
                    err
                } else {
                    err / s as f64
                };
                h_tilde.set(r, col, ((u - b) as f64 - shift).clamp(0.0, 1.0) as f32);
            }
        }

        if i2 < n {
            // W[:, i2:] -= Err * U[i1:i2, i2:]
            let rest = n - i2;
            let mut coupling = vec![0.0f64; width * rest];
            for a in 0..width {
                for b in 0..rest {
                    coupling[a * rest + b] = uf(i1 + a, i2 + b);
                }
            }
            let delta = matmul_f64(&block_err, &coupling, m, width, rest);
            for r in 0..m {
                for b in 0..rest {
                    work[r * n + i2 + b] -= delta[r * rest + b];
                }
            }
        }
        i1 = i2;
    }

    Ok(InitResult { w_q, base, h_tilde })
}

/// `||(W - W_hat) X||_F` with `X` of shape `n x T`.
pub fn output_error(w: &Tensor2D, w_hat: &Tensor2D, x: &Tensor2D) -> Result<f64> {
    w.ensure_same_shape(w_hat, "weights vs reconstruction")?;
    if w.cols() != x.rows() {
        return Err(Error::ShapeMismatch(format!(
            "weights have {} columns, calibration has {} rows",
            w.cols(),
            x.rows()
        )));
    }
    let diff: Vec<f64> = w
        .data()
        .iter()
        .zip(w_hat.data())
        .map(|(&a, &b)| a as f64 - b as f64)
        .collect();
    let out = matmul_f64(&diff, &x.to_f64(), w.rows(), w.cols(), x.cols());
    Ok(out.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// `(U^T U)` reconstructed in `f64`, for checking a factor against an inverse.
pub fn factor_product(factor: &HessianFactor) -> DMatrix<f64> {
    let u = factor.upper.to_dmatrix();
    u.transpose() * u
}
