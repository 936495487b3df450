//! Per-level mixture-of-experts feature adaptation.
//!
//! For each patch: route, evaluate all `K` experts (the full set is kept for
//! the equiangular loss), mix the Top-k outputs with the renormalized
//! weights, rescale the mixture to the input's norm, and blend it back with
//! the input through a fixed residual weight.

use crate::error::{domain_err, shape_err, Result};
use crate::experts::{dropout_mask, ExpertBank, ExpertOutputs};
use crate::linalg::{axpy, dot, norm, Matrix, SeededRng};
use crate::router::{route_backward, route_topk, topk_backward, RouterParams, RoutingResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptConfig {
    pub top_k: usize,
    pub lambda_moe: f64,
    pub eps: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            top_k: 2,
            lambda_moe: 0.1,
            eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutputs {
    /// Adapted `L×d` features.
    pub features: Matrix,
    pub expert_outputs: ExpertOutputs,
    pub routing: RoutingResult,
}

/// Intermediate values needed by [`adapt_layer_backward`].
#[derive(Debug, Clone)]
pub struct AdaptCache {
    /// Per `(patch, expert)` dropout masks; `None` outside training.
    masks: Option<Vec<Vec<f64>>>,
    /// Per `(patch, expert)` rank-`r` hidden activations `A·x̃`.
    hidden: Vec<Vec<f64>>,
    /// Top-k mixtures before norm matching, `L×d`.
    mixture: Matrix,
}

impl AdaptCache {
    pub fn mixture(&self) -> &Matrix {
        &self.mixture
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptGrads {
    pub router: Matrix,
    pub b: Vec<Matrix>,
    pub features: Matrix,
}

/// Rescales `mixture` to `‖input‖`; a zero mixture stays zero.
pub fn norm_match(mixture: &[f64], input: &[f64], eps: f64) -> Vec<f64> {
    let n_mix = norm(mixture);
    if n_mix == 0.0 {
        return vec![0.0; mixture.len()];
    }
    let c = norm(input) / (n_mix + eps);
    mixture.iter().map(|v| v * c).collect()
}

/// `λ · normalized + (1 − λ) · input`.
pub fn residual_blend(normalized: &[f64], input: &[f64], lambda: f64) -> Vec<f64> {
    normalized
        .iter()
        .zip(input)
        .map(|(n, x)| lambda * n + (1.0 - lambda) * x)
        .collect()
}

pub fn adapt_layer(
    features: &Matrix,
    router: &RouterParams,
    bank: &ExpertBank,
    cfg: AdaptConfig,
    training: bool,
    rng: &mut SeededRng,
) -> Result<AdaptOutputs> {
    adapt_layer_with_cache(features, router, bank, cfg, training, rng).map(|(o, _)| o)
}

pub fn adapt_layer_with_cache(
    features: &Matrix,
    router: &RouterParams,
    bank: &ExpertBank,
    cfg: AdaptConfig,
    training: bool,
    rng: &mut SeededRng,
) -> Result<(AdaptOutputs, AdaptCache)> {
    let (l, d) = features.shape();
    let k = bank.len();
    if router.experts() != k {
        return shape_err(format!("router has {} experts, bank has {k}", router.experts()));
    }
    if bank.dim() != d {
        return shape_err(format!("bank dimension {} vs features {d}", bank.dim()));
    }
    if !(0.0..=1.0).contains(&cfg.lambda_moe) {
        return domain_err(format!("residual weight {} outside [0, 1]", cfg.lambda_moe));
    }
    let routing = route_topk(features, router, cfg.top_k)?;

    let use_dropout = training && bank.experts.iter().any(|e| e.dropout_p > 0.0);
    let mut masks = use_dropout.then(|| Vec::with_capacity(l * k));
    let mut hidden = Vec::with_capacity(l * k);
    let mut outputs = ExpertOutputs::zeros(l, k, d);
    let mut mixture = Matrix::zeros(l, d);
    let mut adapted = Matrix::zeros(l, d);

    for i in 0..l {
        let x = features.row(i);
        for (n, expert) in bank.experts.iter().enumerate() {
            let h = match masks.as_mut() {
                Some(masks) => {
                    let mask = dropout_mask(d, expert.dropout_p, rng);
                    let xt: Vec<f64> = x.iter().zip(&mask).map(|(a, m)| a * m).collect();
                    masks.push(mask);
                    expert.down(&xt)
                }
                None => expert.down(x),
            };
            let out = expert.up(&h);
            let w = routing.topk_weights[(i, n)];
            if w != 0.0 {
                axpy(w, &out, mixture.row_mut(i));
            }
            outputs.get_mut(i, n).copy_from_slice(&out);
            hidden.push(h);
        }
        let normalized = norm_match(mixture.row(i), x, cfg.eps);
        adapted
            .row_mut(i)
            .copy_from_slice(&residual_blend(&normalized, x, cfg.lambda_moe));
    }

    Ok((
        AdaptOutputs {
            features: adapted,
            expert_outputs: outputs,
            routing,
        },
        AdaptCache {
            masks,
            hidden,
            mixture,
        },
    ))
}

/// Backward pass of [`adapt_layer_with_cache`].
///
/// `grad_adapted` is the gradient reaching the adapted features;
/// `grad_expert_outputs` and `grad_probs` carry the regularizer gradients
/// (equiangular loss on all expert outputs, balance loss on the softmax
/// probabilities). Top-k selection is treated as fixed.
#[allow(clippy::too_many_arguments)]
pub fn adapt_layer_backward(
    features: &Matrix,
    router: &RouterParams,
    bank: &ExpertBank,
    cfg: AdaptConfig,
    out: &AdaptOutputs,
    cache: &AdaptCache,
    grad_adapted: &Matrix,
    grad_expert_outputs: Option<&ExpertOutputs>,
    grad_probs: Option<&Matrix>,
) -> AdaptGrads {
    let (l, d) = features.shape();
    let k = bank.len();
    let lambda = cfg.lambda_moe;
    let mut grad_features = Matrix::zeros(l, d);
    let mut grad_b: Vec<Matrix> = bank
        .experts
        .iter()
        .map(|e| Matrix::zeros(e.b.rows(), e.b.cols()))
        .collect();
    let mut grad_probs_total = match grad_probs {
        Some(g) => g.clone(),
        None => Matrix::zeros(l, k),
    };

    for i in 0..l {
        let x = features.row(i);
        let g = grad_adapted.row(i);
        let gf = grad_features.row_mut(i);
        axpy(1.0 - lambda, g, gf);

        // norm matching: F_norm = F_exp · ‖F‖ / (‖F_exp‖ + eps)
        let mix = cache.mixture.row(i);
        let n_mix = norm(mix);
        let mut grad_mix = vec![0.0; d];
        if lambda != 0.0 && n_mix > 0.0 {
            let n_x = norm(x);
            let denom = n_mix + cfg.eps;
            let c = n_x / denom;
            let g_norm: Vec<f64> = g.iter().map(|v| lambda * v).collect();
            let proj = dot(mix, &g_norm);
            axpy(c, &g_norm, &mut grad_mix);
            axpy(-n_x * proj / (denom * denom * n_mix), mix, &mut grad_mix);
            if n_x > 0.0 {
                axpy(proj / (denom * n_x), x, gf);
            }
        }

        let selected = &out.routing.topk_indices[i];
        let probs = out.routing.probs.row(i);
        let mut grad_w = vec![0.0; k];
        for &n in selected {
            grad_w[n] = dot(&grad_mix, out.expert_outputs.get(i, n));
        }
        let grad_p = topk_backward(probs, selected, &grad_w);
        for (t, gp) in grad_probs_total.row_mut(i).iter_mut().zip(&grad_p) {
            *t += gp;
        }

        for (n, expert) in bank.experts.iter().enumerate() {
            let weight = out.routing.topk_weights[(i, n)];
            let mut grad_out = vec![0.0; d];
            if weight != 0.0 {
                axpy(weight, &grad_mix, &mut grad_out);
            }
            if let Some(ge) = grad_expert_outputs {
                axpy(1.0, ge.get(i, n), &mut grad_out);
            }
            if grad_out.iter().all(|&v| v == 0.0) {
                continue;
            }
            let s = expert.scaling();
            let h = &cache.hidden[i * k + n];
            grad_b[n].add_outer(s, &grad_out, h);
            let mut grad_h = expert.b.t_matvec(&grad_out);
            grad_h.iter_mut().for_each(|v| *v *= s);
            let mut grad_x = expert.a.t_matvec(&grad_h);
            if let Some(masks) = &cache.masks {
                for (gx, m) in grad_x.iter_mut().zip(&masks[i * k + n]) {
                    *gx *= m;
                }
            }
            axpy(1.0, &grad_x, grad_features.row_mut(i));
        }
    }

    let mut grad_router = Matrix::zeros(router.weight.rows(), router.weight.cols());
    let grad_from_router = route_backward(
        features,
        router,
        &out.routing.probs,
        &grad_probs_total,
        &mut grad_router,
    );
    grad_features.add_assign(&grad_from_router);

    AdaptGrads {
        router: grad_router,
        b: grad_b,
        features: grad_features,
    }
}
