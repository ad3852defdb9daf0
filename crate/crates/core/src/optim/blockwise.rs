//! Per-layer reconstruction of the output `W X` through the codebook.
//!
//! Objective: `||W X - W_hat X||_F^2 + lambda * R(H; beta)` with
//! `W_hat = s * (clip(floor(W/s) + h(A_vq) + z) - z)`. The reconstruction term
//! is evaluated as `sum_i e_i^T G e_i` with `G = X X^T` and `e_i` the rows of
//! `W - W_hat`.

use crate::error::{Error, Result};
use crate::quant::{QuantParams, RoundingSpec};
use crate::reparam::Codebook;
use crate::tensor::{matmul_f64, Tensor2D};

use super::adam::{adam_step, AdamState};
use super::layer::{centroids_f64, codebook_from_f64, SoftQuantLayer};
use super::schedule::{anneal_beta, FinetuneConfig};

#[derive(Debug, Clone)]
pub struct BlockwiseProblem {
    layer: SoftQuantLayer,
    weights: Vec<f64>,
    gram: Vec<f64>,
    n: usize,
}

/// Loss split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub reconstruction: f64,
    pub regularizer: f64,
    pub total: f64,
}

impl BlockwiseProblem {
    pub fn new(
        w: &Tensor2D,
        x: &Tensor2D,
        p: &QuantParams,
        cb: &Codebook,
        spec: &RoundingSpec,
    ) -> Result<Self> {
        let layer = SoftQuantLayer::new(w, p, cb, spec)?;
        Self::from_layer(w, x, layer)
    }

    /// Rounds relative to an explicit integer base, such as the one returned
    /// by the Hessian-aware initialization.
    pub fn with_base(
        w: &Tensor2D,
        x: &Tensor2D,
        p: &QuantParams,
        base: &Tensor2D,
        cb: &Codebook,
        spec: &RoundingSpec,
    ) -> Result<Self> {
        w.ensure_same_shape(base, "weights vs integer base")?;
        let layer = SoftQuantLayer::with_base(base, p, cb, spec)?;
        Self::from_layer(w, x, layer)
    }

    fn from_layer(w: &Tensor2D, x: &Tensor2D, layer: SoftQuantLayer) -> Result<Self> {
        if w.cols() != x.rows() {
            return Err(Error::ShapeMismatch(format!(
                "weights have {} columns, calibration has {} rows",
                w.cols(),
                x.rows()
            )));
        }
        let n = x.rows();
        let t = x.cols();
        let xs = x.to_f64();
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let dot: f64 = xs[i * t..(i + 1) * t]
                    .iter()
                    .zip(&xs[j * t..(j + 1) * t])
                    .map(|(a, b)| a * b)
                    .sum();
                gram[i * n + j] = dot;
                gram[j * n + i] = dot;
            }
        }
        Ok(Self {
            layer,
            weights: w.to_f64(),
            gram,
            n,
        })
    }

    pub fn layer(&self) -> &SoftQuantLayer {
        &self.layer
    }

    fn residual(&self, w_hat: &[f64]) -> Vec<f64> {
        self.weights.iter().zip(w_hat).map(|(a, b)| a - b).collect()
    }

    /// `||(W - W_hat) X||_F^2` for arbitrary dequantized weights.
    pub fn output_sq_error(&self, w_hat: &[f64]) -> f64 {
        let e = self.residual(w_hat);
        let m = e.len() / self.n;
        let eg = matmul_f64(&e, &self.gram, m, self.n, self.n);
        eg.iter().zip(&e).map(|(a, b)| a * b).sum()
    }

    pub fn loss(&self, centroids: &[f64], lambda: f64, beta: f64) -> LossParts {
        let state = self.layer.forward(centroids);
        let reconstruction = self.output_sq_error(&state.w_hat);
        let regularizer = if lambda != 0.0 {
            lambda * self.layer.regularizer(&state, beta)
        } else {
            0.0
        };
        LossParts {
            reconstruction,
            regularizer,
            total: reconstruction + regularizer,
        }
    }

    pub fn loss_and_grad(
        &self,
        centroids: &[f64],
        lambda: f64,
        beta: f64,
    ) -> (LossParts, Vec<f64>) {
        let state = self.layer.forward(centroids);
        let e = self.residual(&state.w_hat);
        let m = e.len() / self.n;
        let eg = matmul_f64(&e, &self.gram, m, self.n, self.n);
        let reconstruction: f64 = eg.iter().zip(&e).map(|(a, b)| a * b).sum();
        let regularizer = if lambda != 0.0 {
            lambda * self.layer.regularizer(&state, beta)
        } else {
            0.0
        };
        // d/dW_hat of ||(W - W_hat) X||^2 is -2 (W - W_hat) G.
        let dw: Vec<f64> = eg.iter().map(|v| -2.0 * v).collect();
        let grad = self.layer.backward(&state, &dw, lambda, beta);
        (
            LossParts {
                reconstruction,
                regularizer,
                total: reconstruction + regularizer,
            },
            grad,
        )
    }

    /// Output error of the hard-rounded weights.
    pub fn hard_output_sq_error(&self, centroids: &[f64]) -> f64 {
        self.output_sq_error(&self.layer.hard_weights(centroids))
    }
}

pub fn blockwise_loss(
    w: &Tensor2D,
    x: &Tensor2D,
    p: &QuantParams,
    cb: &Codebook,
    spec: &RoundingSpec,
    lambda: f32,
    beta: f32,
) -> Result<f64> {
    let prob = BlockwiseProblem::new(w, x, p, cb, spec)?;
    Ok(prob
        .loss(&centroids_f64(cb), lambda as f64, beta as f64)
        .total)
}

/// Analytic gradient of [`blockwise_loss`] with respect to the centroid table.
pub fn blockwise_grad(
    w: &Tensor2D,
    x: &Tensor2D,
    p: &QuantParams,
    cb: &Codebook,
    spec: &RoundingSpec,
    lambda: f32,
    beta: f32,
) -> Result<Tensor2D> {
    let prob = BlockwiseProblem::new(w, x, p, cb, spec)?;
    let (_, g) = prob.loss_and_grad(&centroids_f64(cb), lambda as f64, beta as f64);
    Tensor2D::new(cb.k(), cb.d(), g.into_iter().map(|v| v as f32).collect())
}

#[derive(Debug, Clone)]
pub struct BlockwiseRun {
    pub codebook: Codebook,
    /// Total loss evaluated at the start of each step, before the update.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    /// Total loss at the returned codebook, using the final step's weights.
    pub final_loss: f64,
}

/// Adam on the centroid table for `cfg.steps` steps; the index map never changes.
pub fn optimize_blockwise(
    w: &Tensor2D,
    x: &Tensor2D,
    p: &QuantParams,
    cb: &Codebook,
    spec: &RoundingSpec,
    cfg: &FinetuneConfig,
) -> Result<BlockwiseRun> {
    run_blockwise(&BlockwiseProblem::new(w, x, p, cb, spec)?, cb, cfg)
}

/// [`optimize_blockwise`] rounding relative to an explicit integer base.
pub fn optimize_blockwise_with_base(
    w: &Tensor2D,
    x: &Tensor2D,
    p: &QuantParams,
    base: &Tensor2D,
    cb: &Codebook,
    spec: &RoundingSpec,
    cfg: &FinetuneConfig,
) -> Result<BlockwiseRun> {
    run_blockwise(
        &BlockwiseProblem::with_base(w, x, p, base, cb, spec)?,
        cb,
        cfg,
    )
}

fn run_blockwise(
    prob: &BlockwiseProblem,
    cb: &Codebook,
    cfg: &FinetuneConfig,
) -> Result<BlockwiseRun> {
    cfg.validate()?;
    let mut params = centroids_f64(cb);
    let mut adam = AdamState::new(params.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    let (mut lambda, mut beta) = (0.0, cfg.beta_high as f64);
    let initial_loss = prob.loss(&params, 0.0, beta).total;

    for t in 1..=cfg.steps {
        beta = anneal_beta(t, cfg)? as f64;
        lambda = cfg.lambda_at(t);
        let (parts, grad) = prob.loss_and_grad(&params, lambda, beta);
        losses.push(parts.total);
        adam_step(&mut adam, &mut params, &grad, cfg.lr as f64)?;
    }

    let final_loss = prob.loss(&params, lambda, beta).total;
    Ok(BlockwiseRun {
        codebook: codebook_from_f64(cb, &params)?,
        losses,
        initial_loss,
        final_loss,
    })
}
