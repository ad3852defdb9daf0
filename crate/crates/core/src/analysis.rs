//! Empirical checks of how latent-space errors propagate through the
//! rectified sigmoid, plus comparison reports across reparameterizations.
//!
//! All statistics are computed in `f64` from the stored `f32` tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StudentT;

use crate::error::{Error, Result};
use crate::linalg;
use crate::quant::RoundingSpec;
use crate::reparam::{
    flatten_blocks, kmeans_fit, kron_for_budget, kronecker_approx, rank_for_budget, svd_lowrank,
    vq_for_budget, vq_reconstruct, Reparam,
};
use crate::tensor::Tensor2D;

/// Slack on inequalities that hold exactly in real arithmetic.
pub const TOLERANCE: f64 = 1e-9;

/// `(zeta - gamma) / 4`, the largest slope of the stretched sigmoid.
pub fn lipschitz_constant(spec: &RoundingSpec) -> f32 {
    (spec.stretch() / 4.0) as f32
}

fn soft(a: &Tensor2D, spec: &RoundingSpec) -> Vec<f64> {
    a.data().iter().map(|&v| spec.h(v as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzCheck {
    pub lipschitz_l: f64,
    /// Largest `|dH| / |dA|` over entries with `dA != 0`; `None` when `A_tilde == A`.
    pub max_ratio: Option<f64>,
    pub dh_inf: f64,
    pub da_inf: f64,
}

impl LipschitzCheck {
    pub fn holds(&self) -> bool {
        let elementwise = self
            .max_ratio
            .is_none_or(|r| r <= self.lipschitz_l + TOLERANCE);
        elementwise && self.dh_inf <= self.lipschitz_l * self.da_inf + TOLERANCE
    }

    /// `||dH||_inf / ||dA||_inf`, or `None` when `dA` vanishes.
    pub fn inf_ratio(&self) -> Option<f64> {
        (self.da_inf > 0.0).then(|| self.dh_inf / self.da_inf)
    }
}

/// Compares `H_tilde - H` against `A_tilde - A` entry by entry.
pub fn verify_lipschitz_pairs(
    a: &Tensor2D,
    a_tilde: &Tensor2D,
    h: &[f64],
    h_tilde: &[f64],
    lipschitz_l: f64,
) -> Result<LipschitzCheck> {
    a.ensure_same_shape(a_tilde, "latent vs approximation")?;
    if h.len() != a.len() || h_tilde.len() != a.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} latent entries vs {} / {} rounding entries",
            a.len(),
            h.len(),
            h_tilde.len()
        )));
    }
    let mut check = LipschitzCheck {
        lipschitz_l,
        max_ratio: None,
        dh_inf: 0.0,
        da_inf: 0.0,
    };
    for i in 0..a.len() {
        let da = (a_tilde.data()[i] as f64 - a.data()[i] as f64).abs();
        let dh = (h_tilde[i] - h[i]).abs();
        check.da_inf = check.da_inf.max(da);
        check.dh_inf = check.dh_inf.max(dh);
        if da > 0.0 {
            let r = dh / da;
            check.max_ratio = Some(check.max_ratio.map_or(r, |m: f64| m.max(r)));
        }
    }
    Ok(check)
}

pub fn verify_lipschitz(
    a: &Tensor2D,
    a_tilde: &Tensor2D,
    spec: &RoundingSpec,
) -> Result<LipschitzCheck> {
    verify_lipschitz_pairs(
        a,
        a_tilde,
        &soft(a, spec),
        &soft(a_tilde, spec),
        lipschitz_constant(spec) as f64,
    )
}

/// Per-entry distance of `g(A)` to the nearest clip boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginMatrix {
    pub delta: Tensor2D,
}

fn margin(g: f64) -> f64 {
    if g > 0.0 && g < 1.0 {
        g.min(1.0 - g)
    } else {
        0.0
    }
}

pub fn margins(a: &Tensor2D, spec: &RoundingSpec) -> MarginMatrix {
    MarginMatrix {
        delta: a.map(|v| margin(spec.stretched(v as f64)) as f32),
    }
}

/// Saturation statistics over the entries whose `g(A)` lies strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClipCheck {
    pub interior: usize,
    /// Interior entries with `h(A_tilde)` in `{0, 1}`.
    pub saturated: usize,
    /// Interior entries with `|dA| > delta / L`.
    pub above_threshold: usize,
    /// Above-threshold entries whose `g(A_tilde)` is still inside `(0, 1)`.
    pub unsaturated_above_threshold: usize,
    /// Saturated entries with `L |dA| < delta`, impossible for an `L`-Lipschitz map.
    pub converse_violations: usize,
}

impl ClipCheck {
    pub fn clip_rate(&self) -> f64 {
        ratio(self.saturated, self.interior)
    }

    pub fn clip_bound(&self) -> f64 {
        ratio(self.above_threshold, self.interior)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn clipping_check(a: &Tensor2D, a_tilde: &Tensor2D, spec: &RoundingSpec) -> Result<ClipCheck> {
    a.ensure_same_shape(a_tilde, "latent vs approximation")?;
    let l = lipschitz_constant(spec) as f64;
    let mut out = ClipCheck::default();
    for (&x, &y) in a.data().iter().zip(a_tilde.data()) {
        let g = spec.stretched(x as f64);
        if !(g > 0.0 && g < 1.0) {
            continue;
        }
        out.interior += 1;
        let delta = margin(g);
        let da = (y as f64 - x as f64).abs();
        let g_new = spec.stretched(y as f64);
        let saturated = !(g_new > 0.0 && g_new < 1.0);
        let above = da > delta / l;
        out.saturated += saturated as usize;
        out.above_threshold += above as usize;
        out.unsaturated_above_threshold += (above && !saturated) as usize;
        out.converse_violations += (saturated && l * da + TOLERANCE < delta) as usize;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailRow {
    pub eps: f64,
    /// Fraction of entries with `|dH| > eps`.
    pub lhs: f64,
    /// Fraction of entries with `|dA| > eps / L`.
    pub rhs: f64,
}

/// `count` geometrically spaced thresholds from 0.01 to 1.
pub fn default_eps_grid(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.01],
        _ => (0..count)
            .map(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / (count - 1) as f64))
            .collect(),
    }
}

fn check_grid(eps_grid: &[f64]) -> Result<()> {
    if eps_grid.is_empty()
        || eps_grid.iter().any(|&e| !(e > 0.0))
        || eps_grid.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::InvalidConfig(
            "epsilon grid must be positive and strictly ascending".into(),
        ));
    }
    Ok(())
}

pub fn tail_transfer(
    da: &[f64],
    dh: &[f64],
    eps_grid: &[f64],
    lipschitz_l: f64,
) -> Result<Vec<TailRow>> {
    if da.len() != dh.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} latent vs {} rounding differences",
            da.len(),
            dh.len()
        )));
    }
    check_grid(eps_grid)?;
    let n = da.len().max(1) as f64;
    Ok(eps_grid
        .iter()
        .map(|&eps| {
            let lhs = dh.iter().filter(|v| v.abs() > eps).count() as f64 / n;
            let rhs = da.iter().filter(|v| v.abs() > eps / lipschitz_l).count() as f64 / n;
            TailRow { eps, lhs, rhs }
        })
        .collect())
}

/// All propagation checks for one approximation of a latent matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryReport {
    pub lipschitz: LipschitzCheck,
    pub tail: Vec<TailRow>,
    pub clip: ClipCheck,
}

impl TheoryReport {
    pub fn lipschitz_l(&self) -> f64 {
        self.lipschitz.lipschitz_l
    }

    pub fn max_observed_ratio(&self) -> Option<f64> {
        self.lipschitz.max_ratio
    }

    pub fn clip_rate(&self) -> f64 {
        self.clip.clip_rate()
    }

    pub fn clip_bound(&self) -> f64 {
        self.clip.clip_bound()
    }

    /// Descriptions of every failed guarantee: the Lipschitz bound, the tail
    /// inclusion at each threshold, and saturation only beyond `delta / L`.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.lipschitz.holds() {
            out.push(format!(
                "Lipschitz bound: ||dH||_inf = {} > {} * ||dA||_inf = {} (max ratio {:?})",
                self.lipschitz.dh_inf,
                self.lipschitz.lipschitz_l,
                self.lipschitz.lipschitz_l * self.lipschitz.da_inf,
                self.lipschitz.max_ratio
            ));
        }
        for row in &self.tail {
            if row.lhs > row.rhs {
                out.push(format!(
                    "tail transfer at eps = {}: {} > {}",
                    row.eps, row.lhs, row.rhs
                ));
            }
        }
        if self.clip.converse_violations > 0 {
            out.push(format!(
                "{} entries saturated with |dA| below delta / L",
                self.clip.converse_violations
            ));
        }
        out
    }

    pub fn holds(&self) -> bool {
        self.violations().is_empty()
    }
}

/// Builds the report for `A_tilde`; `h_tilde` overrides `h(A_tilde)` when supplied.
pub fn theory_report(
    a: &Tensor2D,
    a_tilde: &Tensor2D,
    h_tilde: Option<&Tensor2D>,
    spec: &RoundingSpec,
    eps_grid: &[f64],
) -> Result<TheoryReport> {
    let h = soft(a, spec);
    let ht = match h_tilde {
        Some(t) => {
            a.ensure_same_shape(t, "latent vs supplied rounding matrix")?;
            t.to_f64()
        }
        None => soft(a_tilde, spec),
    };
    let l = lipschitz_constant(spec) as f64;
    let lipschitz = verify_lipschitz_pairs(a, a_tilde, &h, &ht, l)?;
    let da: Vec<f64> = a
        .data()
        .iter()
        .zip(a_tilde.data())
        .map(|(&x, &y)| y as f64 - x as f64)
        .collect();
    let dh: Vec<f64> = h.iter().zip(&ht).map(|(x, y)| y - x).collect();
    let tail = tail_transfer(&da, &dh, eps_grid, l)?;
    let clip = clipping_check(a, a_tilde, spec)?;
    Ok(TheoryReport {
        lipschitz,
        tail,
        clip,
    })
}

/// Density histograms of `dA` and `dH` per method over shared symmetric ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramReport {
    pub bins: usize,
    pub a_edges: Vec<f64>,
    pub h_edges: Vec<f64>,
    pub methods: Vec<MethodHistogram>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodHistogram {
    pub label: String,
    pub da_density: Vec<f64>,
    pub dh_density: Vec<f64>,
}

impl HistogramReport {
    /// Index of the bin containing zero.
    pub fn zero_bin(&self) -> usize {
        self.bins / 2
    }

    pub fn a_width(&self) -> f64 {
        self.a_edges[1] - self.a_edges[0]
    }

    pub fn h_width(&self) -> f64 {
        self.h_edges[1] - self.h_edges[0]
    }
}

fn edges(range: f64, bins: usize) -> Vec<f64> {
    let w = 2.0 * range / bins as f64;
    (0..=bins).map(|i| -range + w * i as f64).collect()
}

fn density(values: &[f64], range: f64, bins: usize) -> Vec<f64> {
    let w = 2.0 * range / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v + range) / w).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[b] += 1;
    }
    let n = values.len() as f64;
    counts.iter().map(|&c| c as f64 / (n * w)).collect()
}

/// `bins` must be odd so that zero falls in the center bin. A range of zero
/// (every method exact) widens to 1.
pub fn error_histograms(
    a: &Tensor2D,
    approximations: &[(String, Tensor2D)],
    spec: &RoundingSpec,
    bins: usize,
) -> Result<HistogramReport> {
    if bins == 0 || bins % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "histogram bin count {bins} must be odd"
        )));
    }
    let h = soft(a, spec);
    let mut diffs = Vec::with_capacity(approximations.len());
    for (label, t) in approximations {
        a.ensure_same_shape(t, label)?;
        let da: Vec<f64> = a
            .data()
            .iter()
            .zip(t.data())
            .map(|(&x, &y)| x as f64 - y as f64)
            .collect();
        let dh: Vec<f64> = h.iter().zip(soft(t, spec)).map(|(x, y)| x - y).collect();
        diffs.push((label.clone(), da, dh));
    }
    let span = |sel: fn(&(String, Vec<f64>, Vec<f64>)) -> &Vec<f64>| {
        let m = diffs
            .iter()
            .flat_map(|d| sel(d).iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if m > 0.0 {
            m
        } else {
            1.0
        }
    };
    let ra = span(|d| &d.1);
    let rh = span(|d| &d.2);
    Ok(HistogramReport {
        bins,
        a_edges: edges(ra, bins),
        h_edges: edges(rh, bins),
        methods: diffs
            .into_iter()
            .map(|(label, da, dh)| MethodHistogram {
                label,
                da_density: density(&da, ra, bins),
                dh_density: density(&dh, rh, bins),
            })
            .collect(),
    })
}

/// Singular values in descending order.
pub fn singular_spectrum(w: &Tensor2D) -> Vec<f64> {
    linalg::singular_values(&w.to_dmatrix())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormRow {
    pub method: Reparam,
    pub params: usize,
    pub inf: f64,
    pub spectral: f64,
    pub frobenius: f64,
}

impl NormRow {
    pub fn label(&self) -> &'static str {
        self.method.label()
    }

    /// `max|E_ij| <= ||E||_2 <= ||E||_F` up to rounding.
    pub fn norm_chain_holds(&self) -> bool {
        let slack = 1.0 + 1e-9;
        self.inf <= self.spectral * slack + TOLERANCE
            && self.spectral <= self.frobenius * slack + TOLERANCE
    }
}

fn error_norms(method: Reparam, params: usize, a: &Tensor2D, approx: &Tensor2D) -> NormRow {
    let e = a.to_dmatrix() - approx.to_dmatrix();
    NormRow {
        method,
        params,
        inf: linalg::max_abs(&e),
        spectral: linalg::spectral_norm(&e),
        frobenius: e.norm(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComparisonConfig {
    pub d: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            d: 8,
            kmeans_iters: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<NormRow>,
    pub approximations: Vec<(String, Tensor2D)>,
}

impl Comparison {
    pub fn row(&self, label: &str) -> Option<&NormRow> {
        self.rows.iter().find(|r| r.label() == label)
    }
}

/// Approximates `a` by a codebook, a truncated SVD and a Kronecker product,
/// each sized to the largest configuration within `budget` parameters.
pub fn inf_norm_comparison(
    a: &Tensor2D,
    budget: usize,
    cfg: &ComparisonConfig,
) -> Result<Comparison> {
    let (m, n) = a.shape();
    let mut rows = Vec::with_capacity(3);
    let mut approximations = Vec::with_capacity(3);

    let vq = vq_for_budget(m, n, cfg.d, budget)?;
    let Reparam::Vq { k, d } = vq else {
        unreachable!()
    };
    let fit = kmeans_fit(&flatten_blocks(a, d)?, k, cfg.kmeans_iters, cfg.seed)?;
    let vq_hat = vq_reconstruct(&fit.codebook.with_shape((m, n))?);

    let lr = rank_for_budget(m, n, budget)?;
    let Reparam::LowRank { rank } = lr else {
        unreachable!()
    };
    let lr_hat = svd_lowrank(a, rank)?.to_tensor()?;

    let kr = kron_for_budget(m, n, budget)?;
    let Reparam::Kronecker(shape) = kr else {
        unreachable!()
    };
    let kr_hat = kronecker_approx(a, shape)?.to_tensor()?;

    for (method, approx) in [(vq, vq_hat), (lr, lr_hat), (kr, kr_hat)] {
        rows.push(error_norms(method, method.param_count(m, n), a, &approx));
        approximations.push((method.label().to_string(), approx));
    }
    Ok(Comparison {
        rows,
        approximations,
    })
}

/// Student-t latent matrix, the heavy-tailed stand-in for trained weights.
pub fn heavy_tailed_latent(rows: usize, cols: usize, nu: f64, seed: u64) -> Result<Tensor2D> {
    let dist = StudentT::new(nu).map_err(|e| Error::InvalidConfig(format!("Student-t: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor2D::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(dist) as f32)
}
