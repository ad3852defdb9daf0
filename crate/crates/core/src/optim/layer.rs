//! One frozen linear layer whose weights are soft-quantized through a codebook.

use crate::error::{Error, Result};
use crate::quant::{regularizer_grad_scalar, regularizer_sum, QuantParams, RoundingSpec};
use crate::reparam::Codebook;
use crate::tensor::Tensor2D;

/// Frozen per-layer state: integer base plus zero point, the row grid, and the block map.
#[derive(Debug, Clone)]
pub struct SoftQuantLayer {
    rows: usize,
    cols: usize,
    /// `B + z` per entry, with `B = floor(W/s)` unless supplied.
    offset: Vec<f64>,
    scale: Vec<f64>,
    zero: Vec<f64>,
    q_min: f64,
    q_max: f64,
    indices: Vec<u32>,
    k: usize,
    d: usize,
    spec: RoundingSpec,
}

/// Forward quantities at a given centroid table.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub latent: Vec<f64>,
    pub h: Vec<f64>,
    pub w_hat: Vec<f64>,
}

impl SoftQuantLayer {
    pub fn new(w: &Tensor2D, p: &QuantParams, cb: &Codebook, spec: &RoundingSpec) -> Result<Self> {
        if p.rows() != w.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} weight rows vs {} quantization rows",
                w.rows(),
                p.rows()
            )));
        }
        let base = Tensor2D::from_fn(w.rows(), w.cols(), |i, j| {
            (w.get(i, j) / p.scale[i]).floor()
        })?;
        Self::with_base(&base, p, cb, spec)
    }

    /// Uses an explicit integer base in place of `floor(W/s)`.
    pub fn with_base(
        base: &Tensor2D,
        p: &QuantParams,
        cb: &Codebook,
        spec: &RoundingSpec,
    ) -> Result<Self> {
        let (m, n) = base.shape();
        if cb.shape() != (m, n) {
            return Err(Error::ShapeMismatch(format!(
                "codebook covers {}x{}, weights are {m}x{n}",
                cb.shape().0,
                cb.shape().1
            )));
        }
        if p.rows() != m {
            return Err(Error::ShapeMismatch(format!(
                "{m} weight rows vs {} quantization rows",
                p.rows()
            )));
        }
        if base.data().iter().any(|v| v.fract() != 0.0) {
            return Err(Error::InvalidConfig(
                "integer base has fractional entries".into(),
            ));
        }
        let mut offset = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                offset.push(base.get(i, j) as f64 + p.zero[i] as f64);
            }
        }
        Ok(Self {
            rows: m,
            cols: n,
            offset,
            scale: p.scale.iter().map(|&s| s as f64).collect(),
            zero: p.zero.iter().map(|&z| z as f64).collect(),
            q_min: p.q_min as f64,
            q_max: p.q_max as f64,
            indices: cb.indices().to_vec(),
            k: cb.k(),
            d: cb.d(),
            spec: *spec,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn num_params(&self) -> usize {
        self.k * self.d
    }

    fn check(&self, centroids: &[f64]) {
        assert_eq!(centroids.len(), self.k * self.d, "centroid buffer length");
    }

    pub fn latent(&self, centroids: &[f64]) -> Vec<f64> {
        self.check(centroids);
        let d = self.d;
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for &i in &self.indices {
            out.extend_from_slice(&centroids[i as usize * d..(i as usize + 1) * d]);
        }
        out
    }

    fn dequant(&self, idx: usize, h: f64) -> f64 {
        let r = idx / self.cols;
        let q = (self.offset[idx] + h).clamp(self.q_min, self.q_max);
        self.scale[r] * (q - self.zero[r])
    }

    pub fn forward(&self, centroids: &[f64]) -> LayerState {
        let latent = self.latent(centroids);
        let h: Vec<f64> = latent.iter().map(|&a| self.spec.h(a)).collect();
        let w_hat = h
            .iter()
            .enumerate()
            .map(|(idx, &v)| self.dequant(idx, v))
            .collect();
        LayerState { latent, h, w_hat }
    }

    /// Dequantized weights with the rounding matrix hard-thresholded.
    pub fn hard_weights(&self, centroids: &[f64]) -> Vec<f64> {
        let thr = self.spec.hard_threshold as f64;
        // Round through f32 so the decision matches `hard_round` on stored tensors.
        self.latent(centroids)
            .iter()
            .enumerate()
            .map(|(idx, &a)| {
                let h = self.spec.h(a as f32 as f64) as f32 as f64;
                self.dequant(idx, if h >= thr { 1.0 } else { 0.0 })
            })
            .collect()
    }

    pub fn regularizer(&self, state: &LayerState, beta: f64) -> f64 {
        regularizer_sum(state.h.iter().copied(), beta)
    }

    /// Chain rule from `dL/dW_hat` (plus `lambda * R(H; beta)`) to the
    /// centroid table. Clip derivatives are 0 at and beyond their boundaries.
    pub fn backward(&self, state: &LayerState, dw_hat: &[f64], lambda: f64, beta: f64) -> Vec<f64> {
        let mut grad = vec![0.0; self.k * self.d];
        let d = self.d;
        for (blk, &ci) in self.indices.iter().enumerate() {
            let g = &mut grad[ci as usize * d..(ci as usize + 1) * d];
            for (t, gt) in g.iter_mut().enumerate() {
                let idx = blk * d + t;
                let dh_da = self.spec.h_grad(state.latent[idx]);
                if dh_da == 0.0 {
                    continue;
                }
                let q = self.offset[idx] + state.h[idx];
                let dw_dh = if q > self.q_min && q < self.q_max {
                    self.scale[idx / self.cols]
                } else {
                    0.0
                };
                let mut dl_dh = dw_hat[idx] * dw_dh;
                if lambda != 0.0 {
                    dl_dh += lambda * regularizer_grad_scalar(state.h[idx], beta);
                }
                *gt += dl_dh * dh_da;
            }
        }
        grad
    }
}

pub(crate) fn centroids_f64(cb: &Codebook) -> Vec<f64> {
    cb.centroids().to_f64()
}

pub(crate) fn codebook_from_f64(cb: &Codebook, centroids: &[f64]) -> Result<Codebook> {
    let table = Tensor2D::new(
        cb.k(),
        cb.d(),
        centroids.iter().map(|&v| v as f32).collect(),
    )?;
    cb.with_centroids(table)
}
