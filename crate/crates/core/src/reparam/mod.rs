//! Parameter-reduced representations of the latent rounding matrix: the
//! codebook reparameterization plus the low-rank and Kronecker baselines.

mod kron;
mod lowrank;
mod vq;

pub use kron::{kronecker_approx, rearrange, KronShape, KroneckerApprox};
pub use lowrank::{svd_lowrank, LowRankApprox};
pub use vq::{
    codebook_paths, flatten_blocks, init_codebook, kmeans_fit, vq_assign, vq_reconstruct,
    ClusterSpace, Codebook, KMeansFit, INIT_MARGIN,
};

use crate::error::{Error, Result};

/// How a rounding matrix is parameterized, with the sizes that determine
/// its trainable-parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reparam {
    Elementwise,
    /// `k` centroids of dimension `d`; the index map is frozen.
    Vq {
        k: usize,
        d: usize,
    },
    LowRank {
        rank: usize,
    },
    Kronecker(KronShape),
}

impl Reparam {
    pub fn param_count(&self, m: usize, n: usize) -> usize {
        match *self {
            Reparam::Elementwise => m * n,
            Reparam::Vq { k, d } => k * d,
            Reparam::LowRank { rank } => rank * (m + n),
            Reparam::Kronecker(s) => s.a * s.c + s.b * s.d,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Reparam::Elementwise => "elementwise",
            Reparam::Vq { .. } => "vq",
            Reparam::LowRank { .. } => "lowrank",
            Reparam::Kronecker(_) => "kronecker",
        }
    }
}

pub fn param_count(method: Reparam, m: usize, n: usize) -> usize {
    method.param_count(m, n)
}

/// Largest codebook of dimension `d` within `budget` (capped at one centroid
/// per block).
pub fn vq_for_budget(m: usize, n: usize, d: usize, budget: usize) -> Result<Reparam> {
    if d == 0 || (m * n) % d != 0 {
        return Err(Error::IndivisibleShape { len: m * n, d });
    }
    let k = (budget / d).min(m * n / d);
    if k == 0 {
        return Err(Error::BudgetInfeasible {
            method: "vq",
            budget,
        });
    }
    Ok(Reparam::Vq { k, d })
}

pub fn rank_for_budget(m: usize, n: usize, budget: usize) -> Result<Reparam> {
    let rank = (budget / (m + n)).min(m.min(n));
    if rank == 0 {
        return Err(Error::BudgetInfeasible {
            method: "lowrank",
            budget,
        });
    }
    Ok(Reparam::LowRank { rank })
}

/// Kronecker factor shapes with the largest parameter count not above
/// `budget`; ties prefer the more balanced split.
pub fn kron_for_budget(m: usize, n: usize, budget: usize) -> Result<Reparam> {
    let divisors = |x: usize| (1..=x).filter(move |v| x % v == 0);
    let mut best: Option<(usize, usize, KronShape)> = None;
    for a in divisors(m) {
        for c in divisors(n) {
            let s = KronShape {
                a,
                b: m / a,
                c,
                d: n / c,
            };
            let count = Reparam::Kronecker(s).param_count(m, n);
            if count > budget {
                continue;
            }
            let imbalance = (a * c).abs_diff(s.b * s.d);
            let better = match best {
                None => true,
                Some((bc, bi, _)) => count > bc || (count == bc && imbalance < bi),
            };
            if better {
                best = Some((count, imbalance, s));
            }
        }
    }
    best.map(|(_, _, s)| Reparam::Kronecker(s))
        .ok_or(Error::BudgetInfeasible {
            method: "kronecker",
            budget,
        })
}
