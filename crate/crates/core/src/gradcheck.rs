//! Randomized finite-difference suite over every loss component and every
//! trainable parameter group, on tiny instances.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::experts::{etf_loss, etf_loss_grad, ExpertOutputs};
use crate::linalg::{softmax, Matrix, SeededRng};
use crate::losses::{
    bce_loss, bce_loss_grad, dice_loss, dice_loss_grad, focal_loss, focal_loss_grad, LossWeights,
};
use crate::model::{ArchConfig, Model};
use crate::router::{balance_loss, balance_loss_grad};
use crate::training::{check_model_gradients, finite_diff_check, FdReport, Prepared};

/// Suite defaults: central step and relative tolerance.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Nine patches (3×3 grid of 2×2 pixels) and eight feature dimensions.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        image_size: 6,
        patch_size: 2,
        dim: 8,
        n_levels: 2,
        experts: 4,
        top_k: 2,
        rank: 2,
        dropout: 0.0,
        ..ArchConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub instances: usize,
    pub coords: usize,
    pub max_rel_err: f64,
    /// Description of the worst coordinate seen.
    pub worst: String,
    pub pass: bool,
}

#[derive(Default)]
struct RowAcc {
    instances: usize,
    coords: usize,
    max_rel_err: f64,
    worst: String,
    pass: bool,
}

impl RowAcc {
    fn add(&mut self, label: &str, r: &FdReport) {
        if self.instances == 0 {
            self.pass = true;
        }
        self.instances += 1;
        self.coords += r.coords;
        self.pass &= r.pass;
        if r.max_rel_err >= self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = r.max_rel_err;
            self.worst = format!(
                "{label}[{}] analytic={:.6e} numeric={:.6e}",
                r.worst_index, r.worst_analytic, r.worst_numeric
            );
        }
    }
}

fn scaled(g: &[f64], s: f64) -> Vec<f64> {
    g.iter().map(|v| v * s).collect()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Maps a tensor name to its parameter group.
pub fn param_group(name: &str) -> &'static str {
    if name.ends_with(".router") {
        "router"
    } else if name.ends_with(".b") {
        "expert_b"
    } else if name.ends_with(".proj") {
        "proj"
    } else if name == "head.dw" {
        "head_dw"
    } else if name == "head.pw" {
        "head_pw"
    } else {
        "head_ln"
    }
}

/// A random tiny model with nontrivial expert weights and one sample.
pub fn tiny_instance(rng: &mut SeededRng) -> Result<(Model, Prepared)> {
    let arch = tiny_arch();
    let mut model = Model::init(&arch, rng)?;
    for lp in &mut model.levels {
        for e in &mut lp.bank.experts {
            e.b = Matrix::randn(e.b.rows(), e.b.cols(), 0.3, rng);
        }
    }
    let image = Matrix::randn(arch.image_size, arch.image_size, 1.0, rng);
    let features = model.features(&image)?;
    let pixels = arch.image_size * arch.image_size;
    let label = rng.bernoulli(0.5);
    let mask: Vec<bool> = (0..pixels).map(|_| label && rng.bernoulli(0.3)).collect();
    let label = mask.iter().any(|&m| m);
    Ok((
        model,
        Prepared {
            features,
            mask,
            label,
            class_id: 0,
        },
    ))
}

/// Runs `instances` random instances of every component check and the
/// full-pipeline check per parameter group. `grad_scale` multiplies every
/// analytic gradient before comparison; anything but 1 should fail.
pub fn gradient_suite(instances: usize, seed: u64, h: f64, tol: f64, grad_scale: f64) -> Result<Vec<SuiteRow>> {
    let mut rng = SeededRng::new(seed);
    let mut rows: BTreeMap<String, RowAcc> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut record = |rows: &mut BTreeMap<String, RowAcc>, name: &str, label: &str, r: &FdReport| {
        if !rows.contains_key(name) {
            order.push(name.to_string());
        }
        rows.entry(name.to_string()).or_default().add(label, r);
    };
    let weights = LossWeights {
        lambda_etf: 0.5,
        lambda_bal: 0.5,
        gamma: 2.0,
    };

    for _ in 0..instances {
        let n = 12;
        let p: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.02, 0.98)).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.4)).collect();

        let r = finite_diff_check(|x| focal_loss(x, 2.0), &p, &scaled(&focal_loss_grad(&p, 2.0)?, grad_scale), &all(n), h, tol)?;
        record(&mut rows, "loss.focal", "p", &r);

        let r = finite_diff_check(|x| dice_loss(x, &mask), &p, &scaled(&dice_loss_grad(&p, &mask)?, grad_scale), &all(n), h, tol)?;
        record(&mut rows, "loss.dice", "p", &r);

        let label = rng.bernoulli(0.5);
        let r = finite_diff_check(|x| Ok(bce_loss(x[0], label)), &p[..1], &[bce_loss_grad(p[0], label) * grad_scale], &[0], h, tol)?;
        record(&mut rows, "loss.bce", "p", &r);

        let (l, k, d) = (3, 4, 8);
        let e: Vec<f64> = (0..l * k * d).map(|_| rng.normal()).collect();
        let eo = ExpertOutputs::from_vec(l, k, d, e.clone())?;
        let g = etf_loss_grad(&eo, 1e-6)?;
        let r = finite_diff_check(
            |x| etf_loss(&ExpertOutputs::from_vec(l, k, d, x.to_vec())?, 1e-6),
            &e,
            &scaled(g.data(), grad_scale),
            &all(e.len()),
            h,
            tol,
        )?;
        record(&mut rows, "loss.etf", "e", &r);

        let levels = 2;
        let mut probs = Vec::with_capacity(levels * 9 * 4);
        for _ in 0..levels * 9 {
            let logits: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            probs.extend(softmax(&logits)?);
        }
        let split = |x: &[f64]| -> Result<Vec<Matrix>> {
            x.chunks(36).map(|c| Matrix::from_vec(9, 4, c.to_vec())).collect()
        };
        let g: Vec<f64> = balance_loss_grad(&split(&probs)?, 1e-6)?
            .into_iter()
            .flat_map(|m| m.into_data())
            .collect();
        let r = finite_diff_check(|x| balance_loss(&split(x)?, 1e-6), &probs, &scaled(&g, grad_scale), &all(probs.len()), h, tol)?;
        record(&mut rows, "loss.balance", "probs", &r);

        let (model, sample) = tiny_instance(&mut rng)?;
        for (name, r) in check_model_gradients(&model, &sample, weights, h, tol, grad_scale, None, &mut rng)? {
            record(&mut rows, &format!("pipeline.{}", param_group(&name)), &name, &r);
        }
    }

    Ok(order
        .into_iter()
        .map(|name| {
            let acc = rows.remove(&name).expect("recorded");
            SuiteRow {
                name,
                instances: acc.instances,
                coords: acc.coords,
                max_rel_err: acc.max_rel_err,
                worst: acc.worst,
                pass: acc.pass,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_detects_corruption() {
        let rows = gradient_suite(2, 3, FD_STEP, FD_TOL, 1.0).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        for want in ["loss.focal", "loss.dice", "loss.bce", "loss.etf", "loss.balance", "pipeline.router", "pipeline.expert_b", "pipeline.proj", "pipeline.head_dw", "pipeline.head_pw", "pipeline.head_ln"] {
            assert!(names.contains(&want), "{want} missing from {names:?}");
        }
        for r in &rows {
            assert!(r.pass, "{r:?}");
        }
        let bad = gradient_suite(1, 3, FD_STEP, FD_TOL, 1.01).unwrap();
        assert!(bad.iter().all(|r| !r.pass));
    }

    #[test]
    fn group_names() {
        assert_eq!(param_group("level1.router"), "router");
        assert_eq!(param_group("level0.expert3.b"), "expert_b");
        assert_eq!(param_group("head.ln_bias"), "head_ln");
    }
}
