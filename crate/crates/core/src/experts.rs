//! Low-rank experts with frozen, subspace-confined down-projections and the
//! equiangular (simplex ETF) regularizer on their outputs.
//!
//! Each expert computes `scale · B · A · x` where `A` (`r×d`) is frozen. In
//! the orthogonal-subspace layout the input dimensions are partitioned into
//! `K` contiguous slices and expert `n` only has nonzero columns inside its
//! slice, filled with a QR-derived block with orthonormal rows. Disjoint
//! column support makes `A_n A_mᵀ` exactly zero for `n ≠ m`.

use std::ops::Range;

use crate::error::{domain_err, Error, Result};
use crate::linalg::{l2_normalize, l2_normalize_backward, qr_orthonormal_rows, Matrix, SeededRng};

/// Standard deviation of the trainable up-projection at initialization.
pub const B_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Multiply outputs by `alpha / rank`.
    pub use_scaling: bool,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
            use_scaling: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    /// Frozen down-projection, `r×d`.
    pub a: Matrix,
    /// Trainable up-projection, `d×r`.
    pub b: Matrix,
    pub alpha: f64,
    pub rank: usize,
    pub dropout_p: f64,
    pub use_scaling: bool,
    /// Input columns where `a` may be nonzero.
    pub subspace: Range<usize>,
}

impl ExpertParams {
    pub fn scaling(&self) -> f64 {
        if self.use_scaling {
            self.alpha / self.rank as f64
        } else {
            1.0
        }
    }

    pub fn dim(&self) -> usize {
        self.a.cols()
    }

    /// Down-projection `A·x`, skipping columns outside the subspace.
    pub fn down(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.subspace.clone();
        (0..self.rank)
            .map(|j| {
                self.a.row(j)[cols.clone()]
                    .iter()
                    .zip(&x[cols.clone()])
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// Up-projection `scale · B·h`.
    pub fn up(&self, h: &[f64]) -> Vec<f64> {
        let s = self.scaling();
        let mut out = self.b.matvec(h);
        out.iter_mut().for_each(|v| *v *= s);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub experts: Vec<ExpertParams>,
    pub subspace_dims: Vec<usize>,
}

impl ExpertBank {
    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.subspace_dims.iter().sum()
    }
}

/// Splits `d` into `k` parts; the first `d mod k` parts get one extra.
pub fn partition_dims(d: usize, k: usize) -> Vec<usize> {
    let base = d / k;
    let extra = d % k;
    (0..k).map(|n| base + usize::from(n < extra)).collect()
}

/// Orthogonal-subspace initialization of a `K`-expert bank.
pub fn fofs_init(d: usize, k: usize, cfg: ExpertConfig, rng: &mut SeededRng) -> Result<ExpertBank> {
    if k == 0 || k > d {
        return domain_err(format!("cannot split {d} dimensions among {k} experts"));
    }
    let dims = partition_dims(d, k);
    let min_dim = *dims.iter().min().expect("k >= 1");
    if cfg.rank > min_dim {
        return Err(Error::RankInfeasible {
            rows: cfg.rank,
            cols: min_dim,
        });
    }
    let mut offset = 0;
    let mut blocks = Vec::with_capacity(k);
    for &dn in &dims {
        let q = qr_orthonormal_rows(cfg.rank, dn, rng)?;
        let mut a = Matrix::zeros(cfg.rank, d);
        for i in 0..cfg.rank {
            a.row_mut(i)[offset..offset + dn].copy_from_slice(q.row(i));
        }
        blocks.push((a, offset..offset + dn));
        offset += dn;
    }
    Ok(assemble(blocks, dims, cfg, rng))
}

/// Baseline initialization without subspace separation: every expert gets
/// a dense frozen `A` with orthonormal rows over all `d` dimensions.
pub fn dense_init(d: usize, k: usize, cfg: ExpertConfig, rng: &mut SeededRng) -> Result<ExpertBank> {
    if k == 0 {
        return domain_err("expert bank needs at least one expert");
    }
    let mut blocks = Vec::with_capacity(k);
    for _ in 0..k {
        blocks.push((qr_orthonormal_rows(cfg.rank, d, rng)?, 0..d));
    }
    Ok(assemble(blocks, partition_dims(d, k), cfg, rng))
}

fn assemble(
    blocks: Vec<(Matrix, Range<usize>)>,
    dims: Vec<usize>,
    cfg: ExpertConfig,
    rng: &mut SeededRng,
) -> ExpertBank {
    let experts = blocks
        .into_iter()
        .map(|(a, subspace)| {
            let d = a.cols();
            ExpertParams {
                a,
                b: Matrix::randn(d, cfg.rank, B_INIT_STD, rng),
                alpha: cfg.alpha,
                rank: cfg.rank,
                dropout_p: cfg.dropout,
                use_scaling: cfg.use_scaling,
                subspace,
            }
        })
        .collect();
    ExpertBank {
        experts,
        subspace_dims: dims,
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, otherwise
/// `1/(1-p)`.
pub fn dropout_mask(len: usize, p: f64, rng: &mut SeededRng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
        .collect()
}

/// Single expert evaluation. Dropout on the input is applied only when
/// `training` is set.
pub fn expert_forward(x: &[f64], e: &ExpertParams, training: bool, rng: &mut SeededRng) -> Vec<f64> {
    if training && e.dropout_p > 0.0 {
        let mask = dropout_mask(x.len(), e.dropout_p, rng);
        let xt: Vec<f64> = x.iter().zip(&mask).map(|(a, m)| a * m).collect();
        e.up(&e.down(&xt))
    } else {
        e.up(&e.down(x))
    }
}

/// `L×K×d` tensor of per-patch, per-expert outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutputs {
    patches: usize,
    experts: usize,
    dim: usize,
    data: Vec<f64>,
}

impl ExpertOutputs {
    pub fn zeros(patches: usize, experts: usize, dim: usize) -> Self {
        Self {
            patches,
            experts,
            dim,
            data: vec![0.0; patches * experts * dim],
        }
    }

    pub fn from_vec(patches: usize, experts: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != patches * experts * dim {
            return Err(Error::Shape(format!(
                "expert outputs {patches}x{experts}x{dim} need {} values, got {}",
                patches * experts * dim,
                data.len()
            )));
        }
        Ok(Self {
            patches,
            experts,
            dim,
            data,
        })
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, patch: usize, expert: usize) -> &[f64] {
        let start = (patch * self.experts + expert) * self.dim;
        &self.data[start..start + self.dim]
    }

    #[inline]
    pub fn get_mut(&mut self, patch: usize, expert: usize) -> &mut [f64] {
        let start = (patch * self.experts + expert) * self.dim;
        &mut self.data[start..start + self.dim]
    }
}

/// Ideal simplex Gram entry: `1` on the diagonal, `-1/(K-1)` elsewhere.
pub fn ideal_gram(k: usize, n: usize, m: usize) -> f64 {
    if n == m {
        1.0
    } else {
        -1.0 / (k as f64 - 1.0)
    }
}

fn check_etf_input(e: &ExpertOutputs) -> Result<()> {
    if e.experts < 2 {
        return domain_err("equiangular target undefined for fewer than two experts");
    }
    if e.patches == 0 {
        return domain_err("equiangular loss over zero patches");
    }
    Ok(())
}

fn normalized(e: &ExpertOutputs, patch: usize, eps: f64) -> Vec<Vec<f64>> {
    (0..e.experts)
        .map(|n| l2_normalize(e.get(patch, n), eps))
        .collect()
}

/// Mean squared Frobenius distance between each patch's Gram matrix of
/// normalized expert outputs and the ideal simplex Gram, divided by `K²`.
pub fn etf_loss(e: &ExpertOutputs, eps: f64) -> Result<f64> {
    check_etf_input(e)?;
    let k = e.experts;
    let mut total = 0.0;
    for i in 0..e.patches {
        let hat = normalized(e, i, eps);
        for n in 0..k {
            for m in 0..k {
                let g: f64 = hat[n].iter().zip(&hat[m]).map(|(a, b)| a * b).sum();
                let diff = g - ideal_gram(k, n, m);
                total += diff * diff;
            }
        }
    }
    Ok(total / (e.patches * k * k) as f64)
}

/// Gradient of [`etf_loss`] with respect to the raw expert outputs.
pub fn etf_loss_grad(e: &ExpertOutputs, eps: f64) -> Result<ExpertOutputs> {
    check_etf_input(e)?;
    let k = e.experts;
    let norm_factor = 2.0 / (e.patches * k * k) as f64;
    let mut grad = ExpertOutputs::zeros(e.patches, k, e.dim);
    for i in 0..e.patches {
        let hat = normalized(e, i, eps);
        for n in 0..k {
            // dL/dê_n = Σ_m (dG_nm + dG_mn) ê_m with a symmetric residual
            let mut g_hat = vec![0.0; e.dim];
            for m in 0..k {
                let g: f64 = hat[n].iter().zip(&hat[m]).map(|(a, b)| a * b).sum();
                let coeff = 2.0 * norm_factor * (g - ideal_gram(k, n, m));
                for (gh, hm) in g_hat.iter_mut().zip(&hat[m]) {
                    *gh += coeff * hm;
                }
            }
            let raw = l2_normalize_backward(e.get(i, n), eps, &g_hat);
            grad.get_mut(i, n).copy_from_slice(&raw);
        }
    }
    Ok(grad)
}
