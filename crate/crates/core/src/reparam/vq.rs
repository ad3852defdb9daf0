//! Codebook reparameterization of the latent rounding matrix.
//!
//! The matrix is flattened row-major and cut into contiguous length-`d`
//! blocks. Each block is replaced by its nearest centroid, so only the `k x d`
//! centroid table is trainable while the block-to-centroid map stays fixed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io;
use crate::quant::RoundingSpec;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Tensor2D,
    indices: Vec<u32>,
    shape: (usize, usize),
}

impl Codebook {
    pub fn new(centroids: Tensor2D, indices: Vec<u32>, shape: (usize, usize)) -> Result<Self> {
        let (k, d) = centroids.shape();
        let len = shape.0 * shape.1;
        if len == 0 || len % d != 0 {
            return Err(Error::IndivisibleShape { len, d });
        }
        if indices.len() * d != len {
            return Err(Error::ShapeMismatch(format!(
                "{} indices of dimension {d} cannot cover a {}x{} matrix",
                indices.len(),
                shape.0,
                shape.1
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= k) {
            return Err(Error::ShapeMismatch(format!(
                "index {bad} out of range for k = {k}"
            )));
        }
        Ok(Self {
            centroids,
            indices,
            shape,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn d(&self) -> usize {
        self.centroids.cols()
    }

    pub fn num_blocks(&self) -> usize {
        self.indices.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn centroids(&self) -> &Tensor2D {
        &self.centroids
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Replaces the centroid table, keeping the index map.
    pub fn with_centroids(&self, centroids: Tensor2D) -> Result<Self> {
        if centroids.shape() != self.centroids.shape() {
            return Err(Error::ShapeMismatch(format!(
                "centroid table {}x{} vs {}x{}",
                centroids.rows(),
                centroids.cols(),
                self.k(),
                self.d()
            )));
        }
        Ok(Self {
            centroids,
            indices: self.indices.clone(),
            shape: self.shape,
        })
    }

    /// Reinterprets the block grid as belonging to a matrix of `shape`.
    pub fn with_shape(self, shape: (usize, usize)) -> Result<Self> {
        Self::new(self.centroids, self.indices, shape)
    }

    /// Writes `<prefix>.centroids.vqt` and `<prefix>.indices.bin`.
    pub fn save(&self, prefix: impl AsRef<Path>) -> Result<()> {
        let (c, i) = codebook_paths(prefix.as_ref());
        io::save_tensor(&self.centroids, c)?;
        io::save_indices(&self.indices, self.shape, i)
    }

    pub fn load(prefix: impl AsRef<Path>) -> Result<Self> {
        let (c, i) = codebook_paths(prefix.as_ref());
        let centroids = io::load_tensor(c)?;
        let (indices, shape) = io::load_indices(i)?;
        Self::new(centroids, indices, shape)
    }
}

pub fn codebook_paths(prefix: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let base = prefix.as_os_str().to_string_lossy();
    (
        format!("{base}.centroids.vqt").into(),
        format!("{base}.indices.bin").into(),
    )
}

/// Row-major flatten of `a` cut into an `L x d` matrix of blocks.
pub fn flatten_blocks(a: &Tensor2D, d: usize) -> Result<Tensor2D> {
    let len = a.len();
    if d == 0 || len % d != 0 {
        return Err(Error::IndivisibleShape { len, d });
    }
    Tensor2D::new(len / d, d, a.data().to_vec())
}

pub fn vq_reconstruct(cb: &Codebook) -> Tensor2D {
    let d = cb.d();
    let mut data = Vec::with_capacity(cb.indices.len() * d);
    for &i in &cb.indices {
        data.extend_from_slice(cb.centroids.row(i as usize));
    }
    Tensor2D::new(cb.shape.0, cb.shape.1, data).expect("codebook invariants guarantee the shape")
}

/// Nearest centroid per block under squared Euclidean distance; ties go to
/// the lowest centroid index.
pub fn vq_assign(blocks: &Tensor2D, centroids: &Tensor2D) -> Result<Vec<u32>> {
    if blocks.cols() != centroids.cols() {
        return Err(Error::ShapeMismatch(format!(
            "blocks have dimension {}, centroids {}",
            blocks.cols(),
            centroids.cols()
        )));
    }
    Ok(assign(blocks.data(), blocks.cols(), &centroids.to_f64()).0)
}

#[inline]
fn sq_dist(block: &[f32], centroid: &[f64]) -> f64 {
    block
        .iter()
        .zip(centroid)
        .map(|(&b, &c)| {
            let t = b as f64 - c;
            t * t
        })
        .sum()
}

/// Returns indices and the squared distance of each block to its centroid.
fn assign(blocks: &[f32], d: usize, centroids: &[f64]) -> (Vec<u32>, Vec<f64>) {
    blocks
        .par_chunks(d)
        .map(|b| {
            let mut best = (0u32, f64::INFINITY);
            for (j, c) in centroids.chunks(d).enumerate() {
                let dist = sq_dist(b, c);
                if dist < best.1 {
                    best = (j as u32, dist);
                }
            }
            best
        })
        .unzip()
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    /// Codebook over the `L x d` block matrix itself.
    pub codebook: Codebook,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub wcss_trace: Vec<f64>,
}

impl KMeansFit {
    pub fn wcss(&self) -> f64 {
        self.wcss_trace.last().copied().unwrap_or(0.0)
    }
}

fn kmeanspp_seed(blocks: &[f32], d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = blocks.len() / d;
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centroids.extend(blocks[first * d..(first + 1) * d].iter().map(|&v| v as f64));
    let mut nearest: Vec<f64> = blocks
        .par_chunks(d)
        .map(|b| sq_dist(b, &centroids[0..d]))
        .collect();

    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                acc += w;
                chosen = Some(i);
                if acc > target {
                    break;
                }
            }
            chosen.expect("positive total weight implies a positive entry")
        } else {
            rng.random_range(0..n)
        };
        let c: Vec<f64> = blocks[pick * d..(pick + 1) * d]
            .iter()
            .map(|&v| v as f64)
            .collect();
        nearest
            .par_iter_mut()
            .zip(blocks.par_chunks(d))
            .for_each(|(best, b)| *best = best.min(sq_dist(b, &c)));
        centroids.extend(c);
    }
    centroids
}

/// k-means++ seeding followed by at most `iters` Lloyd iterations.
///
/// Empty cells are reseeded to the block farthest from its centroid (taken
/// from a cell with more than one member). Iteration stops early once the
/// assignment is stable.
pub fn kmeans_fit(blocks: &Tensor2D, k: usize, iters: usize, seed: u64) -> Result<KMeansFit> {
    let (n, d) = blocks.shape();
    if k == 0 || k > n {
        return Err(Error::KTooLarge { k, blocks: n });
    }
    if iters == 0 {
        return Err(Error::InvalidConfig(
            "k-means needs at least one iteration".into(),
        ));
    }
    let data = blocks.data();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeanspp_seed(data, d, k, &mut rng);
    let mut indices: Vec<u32> = Vec::new();
    let mut trace = Vec::with_capacity(iters);

    for it in 0..iters {
        let (fresh, _) = assign(data, d, &centroids);
        if it > 0 && fresh == indices {
            break;
        }
        indices = fresh;

        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (b, &j) in data.chunks(d).zip(&indices) {
            let j = j as usize;
            counts[j] += 1;
            for (s, &v) in sums[j * d..(j + 1) * d].iter_mut().zip(b) {
                *s += v as f64;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for t in 0..d {
                    centroids[j * d + t] = sums[j * d + t] / counts[j] as f64;
                }
            }
        }

        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let mut far = None;
            let mut far_dist = -1.0;
            for (i, b) in data.chunks(d).enumerate() {
                let j = indices[i] as usize;
                if counts[j] < 2 {
                    continue;
                }
                let dist = sq_dist(b, &centroids[j * d..(j + 1) * d]);
                if dist > far_dist {
                    far_dist = dist;
                    far = Some(i);
                }
            }
            let Some(i) = far else { break };
            let old = indices[i] as usize;
            let b = &data[i * d..(i + 1) * d];
            counts[old] -= 1;
            for t in 0..d {
                sums[old * d + t] -= b[t] as f64;
                centroids[old * d + t] = sums[old * d + t] / counts[old] as f64;
                sums[empty * d + t] = b[t] as f64;
                centroids[empty * d + t] = b[t] as f64;
            }
            counts[empty] = 1;
            indices[i] = empty as u32;
        }

        let wcss: f64 = data
            .chunks(d)
            .zip(&indices)
            .map(|(b, &j)| sq_dist(b, &centroids[j as usize * d..(j as usize + 1) * d]))
            .sum();
        trace.push(wcss);
    }

    let table = Tensor2D::new(k, d, centroids.iter().map(|&v| v as f32).collect())?;
    Ok(KMeansFit {
        codebook: Codebook::new(table, indices, (n, d))?,
        wcss_trace: trace,
    })
}

/// Which matrix the k-means clustering runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClusterSpace {
    /// Cluster the latent matrix `A = h^-1(H)`.
    #[default]
    Latent,
    /// Cluster the residual `H` directly and map the centroids through `h^-1`.
    Residual,
}

/// Distance kept between initial rounding values and the clip boundaries.
///
/// `h^-1(0)` and `h^-1(1)` sit exactly where the clip engages and the
/// gradient is 0, so saturated entries would never move.
pub const INIT_MARGIN: f32 = 1e-3;

/// Builds a latent-space codebook for the rounding initialization `h_tilde`,
/// with values first clamped to `[INIT_MARGIN, 1 - INIT_MARGIN]`.
pub fn init_codebook(
    h_tilde: &Tensor2D,
    spec: &RoundingSpec,
    d: usize,
    k: usize,
    iters: usize,
    seed: u64,
    space: ClusterSpace,
) -> Result<KMeansFit> {
    let shape = h_tilde.shape();
    if let Some(index) = h_tilde.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::OutOfRange {
            index,
            value: h_tilde.data()[index],
        });
    }
    let inner = h_tilde.map(|v| v.clamp(INIT_MARGIN, 1.0 - INIT_MARGIN));
    match space {
        ClusterSpace::Latent => {
            let latent = crate::quant::inverse_rectified_sigmoid(&inner, spec)?;
            let mut fit = kmeans_fit(&flatten_blocks(&latent, d)?, k, iters, seed)?;
            fit.codebook = fit.codebook.with_shape(shape)?;
            Ok(fit)
        }
        ClusterSpace::Residual => {
            let mut fit = kmeans_fit(&flatten_blocks(&inner, d)?, k, iters, seed)?;
            let latent = fit
                .codebook
                .centroids()
                .map(|v| spec.h_inv(v.clamp(INIT_MARGIN, 1.0 - INIT_MARGIN) as f64) as f32);
            fit.codebook = fit.codebook.with_centroids(latent)?.with_shape(shape)?;
            Ok(fit)
        }
    }
}
