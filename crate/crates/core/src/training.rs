//! Adam, the finite-difference gradient oracle, and the training loop.

use crate::error::{domain_err, shape_err, Error, Result};
use crate::linalg::{Matrix, RngState, SeededRng};
use crate::losses::LossWeights;
use crate::model::{ArchConfig, LossParts, Model, ModelGrads};
use crate::synthdata::{gen_dataset, ClassSplit, SynthConfig, SyntheticSample};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub data: SynthConfig,
    pub loss: LossWeights,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fractions of the total step count at which the rate decays.
    pub lr_milestones: Vec<f64>,
    pub lr_decay_factor: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            data: SynthConfig::default(),
            loss: LossWeights::default(),
            lr: 5e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 20,
            batch_size: 2,
            seed: 0,
            lr_milestones: vec![0.6, 0.9],
            lr_decay_factor: 0.5,
            n_train: 200,
            n_eval: 100,
            n_seen: 3,
            n_unseen: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.data.validate()?;
        self.loss.validate()?;
        if self.data.image_size != self.arch.image_size || self.data.patch_size != self.arch.patch_size {
            return domain_err("data and model image/patch sizes differ");
        }
        if self.lr <= 0.0 || self.adam_eps <= 0.0 || self.batch_size == 0 {
            return domain_err("lr, adam_eps and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return domain_err("Adam betas must lie in [0, 1)");
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return domain_err("lr milestones are fractions in [0, 1]");
        }
        if self.lr_decay_factor <= 0.0 {
            return domain_err("lr decay factor must be positive");
        }
        ClassSplit::new(self.n_seen, self.n_unseen)?;
        Ok(())
    }

    pub fn split(&self) -> Result<ClassSplit> {
        ClassSplit::new(self.n_seen, self.n_unseen)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// Learning rate at 0-based `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let decays = self
            .lr_milestones
            .iter()
            .filter(|&&m| step >= (m * total as f64).floor() as usize)
            .count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }
}

/// Independent streams derived from the run seed, so data does not depend
/// on the model architecture and vice versa.
#[derive(Debug, Clone)]
pub struct RunStreams {
    pub train_data: SeededRng,
    pub eval_data: SeededRng,
    pub init: SeededRng,
    pub train: SeededRng,
}

impl RunStreams {
    pub fn new(seed: u64) -> Self {
        let mut master = SeededRng::new(seed);
        Self {
            train_data: master.fork(),
            eval_data: master.fork(),
            init: master.fork(),
            train: master.fork(),
        }
    }
}

/// Seen-class training samples and unseen-class evaluation samples.
pub fn gen_split_data(cfg: &TrainConfig) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    let split = cfg.split()?;
    let mut streams = RunStreams::new(cfg.seed);
    let train = gen_dataset(&cfg.data, split.seen(), cfg.n_train, &mut streams.train_data)?;
    let eval = gen_dataset(&cfg.data, split.unseen(), cfg.n_eval, &mut streams.eval_data)?;
    Ok((train, eval))
}

/// A sample with its frozen backbone features precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub features: Vec<Matrix>,
    pub mask: Vec<bool>,
    pub label: bool,
    pub class_id: usize,
}

pub fn prepare(model: &Model, samples: &[SyntheticSample]) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                features: model.features(&s.image)?,
                mask: s.mask.clone(),
                label: s.label,
                class_id: s.class_id,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            step: 0,
        }
    }

    pub fn for_model(model: &Model) -> Self {
        let shapes: Vec<(usize, usize)> = model.trainable().iter().map(|(_, t)| t.shape()).collect();
        Self::new(&shapes)
    }
}

/// One bias-corrected Adam update over matching parameter and gradient lists.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape_err("parameter, gradient and state counts differ");
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return shape_err(format!("Adam shape mismatch {:?} vs {:?}", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Denominator floor of the relative error: `|a−n| / max(|a|, |n|, floor)`.
/// Coordinates whose true gradient is below the floor are effectively held
/// to an absolute tolerance of `tol·floor`, which is above the rounding
/// noise of a central difference at `h = 1e-5`.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central differences of `loss` at `x` for the listed coordinates,
/// compared with `analytic`. A non-finite loss is an error.
pub fn finite_diff_check(
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    if x.len() != analytic.len() {
        return shape_err("point and gradient lengths differ");
    }
    let mut report = FdReport {
        coords: coords.len(),
        max_rel_err: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        pass: true,
    };
    let mut probe = x.to_vec();
    for &i in coords {
        probe[i] = x[i] + h;
        let up = loss(&probe)?;
        probe[i] = x[i] - h;
        let dn = loss(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !dn.is_finite() {
            return Err(Error::NonFinite {
                step: i,
                detail: format!("loss non-finite while probing coordinate {i}"),
            });
        }
        let numeric = (up - dn) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_err || !err.is_finite() {
            report.max_rel_err = err;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

/// Per-tensor check of the full model loss on one image. `grad_scale`
/// multiplies the analytic gradient before comparison (1.0 normally).
#[allow(clippy::too_many_arguments)]
pub fn check_model_gradients(
    model: &Model,
    sample: &Prepared,
    w: LossWeights,
    h: f64,
    tol: f64,
    grad_scale: f64,
    max_coords: Option<usize>,
    rng: &mut SeededRng,
) -> Result<Vec<(String, FdReport)>> {
    let (_, grads) = model.loss_and_grad(&sample.features, &sample.mask, sample.label, w, false, &mut SeededRng::new(0))?;
    let names: Vec<String> = model.trainable().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::with_capacity(names.len());
    for (t, name) in names.into_iter().enumerate() {
        let x = model.trainable()[t].1.data().to_vec();
        let analytic: Vec<f64> = grads.tensors()[t].1.data().iter().map(|g| g * grad_scale).collect();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < x.len() => {
                let mut all: Vec<usize> = (0..x.len()).collect();
                for i in 0..m {
                    let j = i + rng.below(x.len() - i);
                    all.swap(i, j);
                }
                all.truncate(m);
                all
            }
            _ => (0..x.len()).collect(),
        };
        let mut probe_model = model.clone();
        let report = finite_diff_check(
            |p| {
                probe_model.trainable_mut()[t].data_mut().copy_from_slice(p);
                Ok(probe_model
                    .loss(&sample.features, &sample.mask, sample.label, w, false, &mut SeededRng::new(0))?
                    .total)
            },
            &x,
            &analytic,
            &coords,
            h,
            tol,
        )?;
        out.push((name, report));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossParts,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub adam: AdamState,
    pub trace: Vec<StepRecord>,
    pub rng_state: RngState,
}

impl TrainOutcome {
    /// Mean total loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.trace.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let losses: Vec<f64> = self.trace.iter().filter(|r| r.epoch == e).map(|r| r.loss.total).collect();
                losses.iter().sum::<f64>() / losses.len() as f64
            })
            .collect()
    }
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch Adam on `data`.
///
/// Per-image gradients are summed in batch order and divided by the batch
/// size, so the result is bitwise reproducible from `rng`.
pub fn fit(cfg: &TrainConfig, mut model: Model, data: &[Prepared], rng: &mut SeededRng) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return domain_err("training set is empty");
    }
    let mut adam = AdamState::for_model(&model);
    let steps_per_epoch = cfg.steps_per_epoch(data.len());
    let total = steps_per_epoch * cfg.epochs;
    let mut trace = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.below(i + 1);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = ModelGrads::zeros_like(&model);
            let mut parts = LossParts::default();
            let inv = 1.0 / batch.len() as f64;
            for &idx in batch {
                let s = &data[idx];
                let (p, g) = model.loss_and_grad(&s.features, &s.mask, s.label, cfg.loss, true, rng)?;
                parts.add_scaled(&p, inv);
                grads.add_scaled(&g, inv);
            }
            if !parts.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!(
                        "seg={} ac={} etf={} bal={} total={}",
                        parts.seg, parts.ac, parts.etf, parts.bal, parts.total
                    ),
                });
            }
            let lr = cfg.lr_at(step, total);
            let grad_refs: Vec<&Matrix> = grads.tensors().into_iter().map(|(_, t)| t).collect();
            adam_step(&mut model.trainable_mut(), &grad_refs, &mut adam, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)?;
            trace.push(StepRecord {
                step,
                epoch,
                lr,
                loss: parts,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        model,
        adam,
        trace,
        rng_state: rng.state(),
    })
}

/// Everything produced by a seeded end-to-end run.
#[derive(Debug, Clone)]
pub struct Run {
    pub outcome: TrainOutcome,
    pub eval_data: Vec<Prepared>,
}

/// Generates data, initializes, and trains from `cfg.seed`.
pub fn train_from_config(cfg: &TrainConfig) -> Result<Run> {
    cfg.validate()?;
    let (train, eval) = gen_split_data(cfg)?;
    let mut streams = RunStreams::new(cfg.seed);
    let model = Model::init(&cfg.arch, &mut streams.init)?;
    let train_p = prepare(&model, &train)?;
    let eval_p = prepare(&model, &eval)?;
    let outcome = fit(cfg, model, &train_p, &mut streams.train)?;
    Ok(Run {
        outcome,
        eval_data: eval_p,
    })
}
