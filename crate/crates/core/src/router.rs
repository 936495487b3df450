//! Linear softmax router, Top-k renormalization and the CV² load-balance
//! loss.
//!
//! Top-k ties are broken toward the lowest expert index so that routing is
//! a pure function of the probabilities.

use crate::error::{domain_err, shape_err, Result};
use crate::linalg::{softmax, softmax_backward, Matrix, SeededRng};

/// Router weights, one row per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub weight: Matrix,
}

impl RouterParams {
    pub fn new(weight: Matrix) -> Self {
        Self { weight }
    }

    pub fn init(experts: usize, dim: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self::new(Matrix::randn(experts, dim, std, rng))
    }

    pub fn experts(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingResult {
    /// `L×K` softmax probabilities.
    pub probs: Matrix,
    /// `L×K` renormalized Top-k weights, zero outside the selected set.
    pub topk_weights: Matrix,
    /// Selected expert indices per patch, best first.
    pub topk_indices: Vec<Vec<usize>>,
}

/// Row-wise `softmax(W · F_i)`.
pub fn route(features: &Matrix, params: &RouterParams) -> Result<Matrix> {
    if features.cols() != params.weight.cols() {
        return shape_err(format!(
            "features have dim {}, router expects {}",
            features.cols(),
            params.weight.cols()
        ));
    }
    let logits = features.matmul_t(&params.weight)?;
    let mut probs = Matrix::zeros(features.rows(), params.experts());
    for i in 0..features.rows() {
        probs.row_mut(i).copy_from_slice(&softmax(logits.row(i))?);
    }
    Ok(probs)
}

/// Indices of the `k` largest entries, best first; equal values resolve to
/// the lower index.
pub fn topk_indices(row: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > row.len() {
        return domain_err(format!("top-k with k={k} over {} experts", row.len()));
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps index order among ties
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    order.truncate(k);
    Ok(order)
}

/// Keeps the `k` largest scores divided by their sum; every other entry is
/// exactly zero.
pub fn topk_renormalize(row: &[f64], k: usize) -> Result<Vec<f64>> {
    let selected = topk_indices(row, k)?;
    Ok(renormalize_selected(row, &selected))
}

fn renormalize_selected(row: &[f64], selected: &[usize]) -> Vec<f64> {
    let total: f64 = selected.iter().map(|&n| row[n]).sum();
    let mut out = vec![0.0; row.len()];
    for &n in selected {
        out[n] = row[n] / total;
    }
    out
}

/// Backward of Top-k renormalization for a fixed selected set.
pub fn topk_backward(row: &[f64], selected: &[usize], grad_weights: &[f64]) -> Vec<f64> {
    let total: f64 = selected.iter().map(|&n| row[n]).sum();
    let weighted: f64 = selected
        .iter()
        .map(|&n| grad_weights[n] * row[n] / total)
        .sum();
    let mut grad = vec![0.0; row.len()];
    for &n in selected {
        grad[n] = (grad_weights[n] - weighted) / total;
    }
    grad
}

/// Routes every patch and applies Top-k.
pub fn route_topk(features: &Matrix, params: &RouterParams, k: usize) -> Result<RoutingResult> {
    let probs = route(features, params)?;
    let experts = params.experts();
    let mut topk_weights = Matrix::zeros(features.rows(), experts);
    let mut indices = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        let selected = topk_indices(probs.row(i), k)?;
        topk_weights
            .row_mut(i)
            .copy_from_slice(&renormalize_selected(probs.row(i), &selected));
        indices.push(selected);
    }
    Ok(RoutingResult {
        probs,
        topk_weights,
        topk_indices: indices,
    })
}

/// Backward of [`route`]: given `dL/dprobs`, accumulates into the router
/// weight gradient and returns `dL/dfeatures`.
pub fn route_backward(
    features: &Matrix,
    params: &RouterParams,
    probs: &Matrix,
    grad_probs: &Matrix,
    grad_weight: &mut Matrix,
) -> Matrix {
    let mut grad_features = Matrix::zeros(features.rows(), features.cols());
    for i in 0..features.rows() {
        let dz = softmax_backward(probs.row(i), grad_probs.row(i));
        grad_weight.add_outer(1.0, &dz, features.row(i));
        grad_features
            .row_mut(i)
            .copy_from_slice(&params.weight.t_matvec(&dz));
    }
    grad_features
}

/// Squared coefficient of variation with population variance:
/// `σ²(B) / (μ(B)² + eps)`.
pub fn cv_squared(loads: &[f64], eps: f64) -> f64 {
    let n = loads.len() as f64;
    let mean = loads.iter().sum::<f64>() / n;
    let var = loads.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>() / n;
    var / (mean * mean + eps)
}

fn cv_squared_grad(loads: &[f64], eps: f64) -> Vec<f64> {
    let n = loads.len() as f64;
    let mean = loads.iter().sum::<f64>() / n;
    let var = loads.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>() / n;
    let denom = mean * mean + eps;
    loads
        .iter()
        .map(|b| 2.0 * (b - mean) / (n * denom) - var * 2.0 * mean / (n * denom * denom))
        .collect()
}

/// Column sums of a probability matrix: the per-expert load.
pub fn expert_loads(probs: &Matrix) -> Vec<f64> {
    let mut loads = vec![0.0; probs.cols()];
    for i in 0..probs.rows() {
        for (l, p) in loads.iter_mut().zip(probs.row(i)) {
            *l += p;
        }
    }
    loads
}

/// Sum over levels of the CV² of each level's expert load.
pub fn balance_loss(probs_per_level: &[Matrix], eps: f64) -> Result<f64> {
    if probs_per_level.is_empty() {
        return domain_err("balance loss over zero levels");
    }
    Ok(probs_per_level
        .iter()
        .map(|p| cv_squared(&expert_loads(p), eps))
        .sum())
}

/// Gradient of [`balance_loss`] with respect to each level's probabilities.
pub fn balance_loss_grad(probs_per_level: &[Matrix], eps: f64) -> Result<Vec<Matrix>> {
    if probs_per_level.is_empty() {
        return domain_err("balance loss over zero levels");
    }
    Ok(probs_per_level
        .iter()
        .map(|p| {
            let g = cv_squared_grad(&expert_loads(p), eps);
            let mut out = Matrix::zeros(p.rows(), p.cols());
            for i in 0..p.rows() {
                out.row_mut(i).copy_from_slice(&g);
            }
            out
        })
        .collect())
}
