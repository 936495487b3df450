//! Full per-image pipeline: frozen backbone features, per-level expert
//! adaptation, multi-scale aggregation, projection and anomaly maps, and the
//! image head on the final level. Forward, loss, and hand-written backward.

use std::collections::BTreeMap;

use crate::adapter::{adapt_layer_backward, adapt_layer_with_cache, AdaptCache, AdaptConfig, AdaptOutputs};
use crate::error::{domain_err, shape_err, Result};
use crate::experts::{dense_init, etf_loss, etf_loss_grad, fofs_init, ExpertBank, ExpertConfig};
use crate::heads::{
    anomaly_map, anomaly_map_backward, anomaly_score, anomaly_score_backward, depthwise_head_backward,
    depthwise_head_with_cache, init_projection, project, AnomalyMap, HeadCache, HeadGrads, HeadParams,
    ResizePlan, ScorePair, TextAnchors,
};
use crate::linalg::{axpy, Matrix, SeededRng};
use crate::losses::{bce_loss_grad_pair, bce_loss_pair, map_loss, map_loss_grad, total_loss, LossWeights};
use crate::paa::{paa_aggregate, paa_grad};
use crate::router::{balance_loss, balance_loss_grad, RouterParams};
use crate::synthdata::{extract_features, make_anchors, ToyBackbone};

/// Noise on the identity-initialized projection and image head.
pub const HEAD_INIT_NOISE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub n_levels: usize,
    pub experts: usize,
    pub top_k: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub use_scaling: bool,
    /// Subspace-confined frozen `A` blocks; dense orthonormal `A` otherwise.
    pub orthogonal_init: bool,
    pub lambda_moe: f64,
    pub scales: Vec<usize>,
    pub tau: f64,
    /// Norm-matching and balance-loss floor.
    pub eps: f64,
    pub head_width: usize,
    pub router_init_std: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            dim: 64,
            n_levels: 2,
            experts: 4,
            top_k: 2,
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
            use_scaling: true,
            orthogonal_init: true,
            lambda_moe: 0.1,
            scales: vec![1, 3, 5],
            tau: 0.07,
            eps: 1e-6,
            head_width: 3,
            router_init_std: 0.1,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) || self.image_size == 0 {
            return domain_err("image size must be a positive multiple of the patch size");
        }
        if self.dim == 0 || self.n_levels == 0 || self.experts == 0 || self.rank == 0 {
            return domain_err("dimension, levels, experts and rank must be positive");
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return domain_err(format!("top_k {} must lie in 1..={}", self.top_k, self.experts));
        }
        if !(0.0..=1.0).contains(&self.lambda_moe) {
            return domain_err("lambda_moe outside [0, 1]");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return domain_err("dropout outside [0, 1)");
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| s == 0 || s % 2 == 0) {
            return domain_err("scales must be a nonempty list of odd window sizes");
        }
        if self.tau <= 0.0 || self.eps <= 0.0 || self.alpha <= 0.0 {
            return domain_err("tau, eps and alpha must be positive");
        }
        if self.head_width.is_multiple_of(2) {
            return domain_err("head kernel width must be odd");
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn expert_config(&self) -> ExpertConfig {
        ExpertConfig {
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
            use_scaling: self.use_scaling,
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            top_k: self.top_k,
            lambda_moe: self.lambda_moe,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelParams {
    pub router: RouterParams,
    pub bank: ExpertBank,
    pub proj: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchConfig,
    pub backbone: ToyBackbone,
    pub anchors: TextAnchors,
    pub levels: Vec<LevelParams>,
    pub head: HeadParams,
}

/// Forward results of one level.
#[derive(Debug, Clone)]
pub struct LevelForward {
    pub adapt: AdaptOutputs,
    cache: AdaptCache,
    /// Aggregated features, one per scale.
    pub aggregated: Vec<Matrix>,
    pub projected: Vec<Matrix>,
    pub maps: Vec<AnomalyMap>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub levels: Vec<LevelForward>,
    head_caches: Vec<HeadCache>,
    pub image_feature: Vec<f64>,
    pub score: ScorePair,
}

impl Forward {
    /// Mean anomaly probability over every (level, scale) map.
    pub fn pixel_scores(&self) -> Vec<f64> {
        let maps: Vec<&AnomalyMap> = self.levels.iter().flat_map(|l| &l.maps).collect();
        let mut out = vec![0.0; maps[0].anomaly.len()];
        for m in &maps {
            axpy(1.0 / maps.len() as f64, &m.anomaly, &mut out);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub seg: f64,
    pub ac: f64,
    pub etf: f64,
    pub bal: f64,
    pub total: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        [self.seg, self.ac, self.etf, self.bal, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, other: &LossParts, s: f64) {
        self.seg += s * other.seg;
        self.ac += s * other.ac;
        self.etf += s * other.etf;
        self.bal += s * other.bal;
        self.total += s * other.total;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelGrads {
    pub router: Matrix,
    pub b: Vec<Matrix>,
    pub proj: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub levels: Vec<LevelGrads>,
    pub head: HeadGrads,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            levels: model
                .levels
                .iter()
                .map(|l| LevelGrads {
                    router: Matrix::zeros(l.router.weight.rows(), l.router.weight.cols()),
                    b: l.bank.experts.iter().map(|e| Matrix::zeros(e.b.rows(), e.b.cols())).collect(),
                    proj: Matrix::zeros(l.proj.rows(), l.proj.cols()),
                })
                .collect(),
            head: HeadGrads::zeros_like(&model.head),
        }
    }

    /// Same order and names as [`Model::trainable`].
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, g) in self.levels.iter().enumerate() {
            out.push((format!("level{l}.router"), &g.router));
            for (n, b) in g.b.iter().enumerate() {
                out.push((format!("level{l}.expert{n}.b"), b));
            }
            out.push((format!("level{l}.proj"), &g.proj));
        }
        out.push(("head.dw".into(), &self.head.dw_kernel));
        out.push(("head.pw".into(), &self.head.pw));
        out.push(("head.ln_gain".into(), &self.head.ln_gain));
        out.push(("head.ln_bias".into(), &self.head.ln_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for g in &mut self.levels {
            out.push(&mut g.router);
            out.extend(g.b.iter_mut());
            out.push(&mut g.proj);
        }
        out.push(&mut self.head.dw_kernel);
        out.push(&mut self.head.pw);
        out.push(&mut self.head.ln_gain);
        out.push(&mut self.head.ln_bias);
        out
    }

    pub fn add_scaled(&mut self, other: &ModelGrads, s: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.1.data()) {
                *x += s * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.scale_in_place(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

fn anchor_matrix(v: &[f64]) -> Matrix {
    Matrix::from_vec(1, v.len(), v.to_vec()).expect("row vector")
}

impl Model {
    /// Each component draws from its own child stream (backbone, anchors,
    /// then per level router, expert bank, projection, then the head), so
    /// changing how experts are initialized leaves every other tensor as is.
    pub fn init(arch: &ArchConfig, rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        let backbone = ToyBackbone::init(arch.n_levels, arch.dim, arch.patch_size, &mut rng.fork())?;
        let anchors = make_anchors(arch.dim, &mut rng.fork())?;
        let mut levels = Vec::with_capacity(arch.n_levels);
        for _ in 0..arch.n_levels {
            let router = RouterParams::init(arch.experts, arch.dim, arch.router_init_std, &mut rng.fork());
            let mut bank_rng = rng.fork();
            let bank = if arch.orthogonal_init {
                fofs_init(arch.dim, arch.experts, arch.expert_config(), &mut bank_rng)?
            } else {
                dense_init(arch.dim, arch.experts, arch.expert_config(), &mut bank_rng)?
            };
            let proj = init_projection(arch.dim, HEAD_INIT_NOISE, &mut rng.fork());
            levels.push(LevelParams { router, bank, proj });
        }
        let head = HeadParams::init(arch.dim, arch.head_width, HEAD_INIT_NOISE, &mut rng.fork())?;
        Ok(Self {
            arch: arch.clone(),
            backbone,
            anchors,
            levels,
            head,
        })
    }

    pub fn features(&self, image: &Matrix) -> Result<Vec<Matrix>> {
        extract_features(image, &self.backbone)
    }

    fn resize_plan(&self) -> Result<ResizePlan> {
        ResizePlan::new(self.arch.grid_side(), self.arch.image_size, self.arch.image_size)
    }

    fn check_features(&self, feats: &[Matrix]) -> Result<()> {
        if feats.len() != self.levels.len() {
            return shape_err(format!("{} feature levels for a {}-level model", feats.len(), self.levels.len()));
        }
        for f in feats {
            if f.shape() != (self.arch.patches(), self.arch.dim) {
                return shape_err(format!(
                    "features {:?}, expected ({}, {})",
                    f.shape(),
                    self.arch.patches(),
                    self.arch.dim
                ));
            }
        }
        Ok(())
    }

    pub fn forward(&self, feats: &[Matrix], training: bool, rng: &mut SeededRng) -> Result<Forward> {
        self.check_features(feats)?;
        let plan = self.resize_plan()?;
        let cfg = self.arch.adapt_config();
        let mut levels = Vec::with_capacity(self.levels.len());
        for (f, lp) in feats.iter().zip(&self.levels) {
            let (adapt, cache) = adapt_layer_with_cache(f, &lp.router, &lp.bank, cfg, training, rng)?;
            let mut aggregated = Vec::with_capacity(self.arch.scales.len());
            let mut projected = Vec::with_capacity(self.arch.scales.len());
            let mut maps = Vec::with_capacity(self.arch.scales.len());
            for &s in &self.arch.scales {
                let p = paa_aggregate(&adapt.features, s)?;
                let v = project(&p, &lp.proj)?;
                maps.push(anomaly_map(&v, &self.anchors, self.arch.tau, &plan)?.0);
                aggregated.push(p);
                projected.push(v);
            }
            levels.push(LevelForward {
                adapt,
                cache,
                aggregated,
                projected,
                maps,
            });
        }
        let last = levels.last().expect("at least one level");
        let n_scales = last.aggregated.len() as f64;
        let mut image_feature = vec![0.0; self.arch.dim];
        let mut head_caches = Vec::with_capacity(last.aggregated.len());
        for p in &last.aggregated {
            let (v, c) = depthwise_head_with_cache(p, &self.head)?;
            axpy(1.0 / n_scales, &v, &mut image_feature);
            head_caches.push(c);
        }
        let score = anomaly_score(&image_feature, &self.anchors, self.arch.tau)?;
        Ok(Forward {
            levels,
            head_caches,
            image_feature,
            score,
        })
    }

    /// Evaluation-mode forward.
    pub fn predict(&self, feats: &[Matrix]) -> Result<Forward> {
        self.forward(feats, false, &mut SeededRng::new(0))
    }

    fn loss_from(&self, fwd: &Forward, mask: &[bool], label: bool, w: LossWeights) -> Result<LossParts> {
        let mut seg = 0.0;
        for lvl in &fwd.levels {
            for m in &lvl.maps {
                seg += map_loss(m, mask, w.gamma)?;
            }
        }
        let ac = bce_loss_pair(fwd.score.anomaly, fwd.score.normal, label);
        let mut etf = 0.0;
        for lvl in &fwd.levels {
            etf += etf_loss(&lvl.adapt.expert_outputs, self.arch.eps)?;
        }
        let probs: Vec<Matrix> = fwd.levels.iter().map(|l| l.adapt.routing.probs.clone()).collect();
        let bal = balance_loss(&probs, self.arch.eps)?;
        Ok(LossParts {
            seg,
            ac,
            etf,
            bal,
            total: total_loss(seg, ac, etf, bal, w),
        })
    }

    pub fn loss(
        &self,
        feats: &[Matrix],
        mask: &[bool],
        label: bool,
        w: LossWeights,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<LossParts> {
        let fwd = self.forward(feats, training, rng)?;
        self.loss_from(&fwd, mask, label, w)
    }

    /// Per-image loss and gradients of every trainable tensor.
    pub fn loss_and_grad(
        &self,
        feats: &[Matrix],
        mask: &[bool],
        label: bool,
        w: LossWeights,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<(LossParts, ModelGrads)> {
        let fwd = self.forward(feats, training, rng)?;
        let parts = self.loss_from(&fwd, mask, label, w)?;
        let plan = self.resize_plan()?;
        let mut grads = ModelGrads::zeros_like(self);
        let tau = self.arch.tau;
        let n_levels = self.levels.len();

        let probs: Vec<Matrix> = fwd.levels.iter().map(|l| l.adapt.routing.probs.clone()).collect();
        let bal_grads = if w.lambda_bal != 0.0 {
            let mut g = balance_loss_grad(&probs, self.arch.eps)?;
            g.iter_mut().for_each(|m| m.scale_in_place(w.lambda_bal));
            Some(g)
        } else {
            None
        };

        // image branch: BCE → score → mean over scales → head per scale
        let g_score = bce_loss_grad_pair(fwd.score.anomaly, fwd.score.normal, label);
        let g_image = anomaly_score_backward(&fwd.image_feature, &self.anchors, tau, fwd.score, g_score);
        let per_scale: Vec<f64> = g_image.iter().map(|g| g / fwd.head_caches.len() as f64).collect();
        let head_inputs: Vec<Matrix> = fwd
            .head_caches
            .iter()
            .map(|c| depthwise_head_backward(&self.head, c, &per_scale, &mut grads.head))
            .collect();

        for (l, (lvl, lp)) in fwd.levels.iter().zip(&self.levels).enumerate() {
            let lg = &mut grads.levels[l];
            let mut g_adapted = Matrix::zeros(self.arch.patches(), self.arch.dim);
            for (si, &s) in self.arch.scales.iter().enumerate() {
                let map = &lvl.maps[si];
                let (gn, ga) = map_loss_grad(map, mask, w.gamma)?;
                let g_v = anomaly_map_backward(&lvl.projected[si], &self.anchors, tau, &plan, map, &gn, &ga);
                lg.proj.add_assign(&g_v.t_matmul(&lvl.aggregated[si])?);
                let mut g_p = g_v.matmul(&lp.proj)?;
                if l + 1 == n_levels {
                    g_p.add_assign(&head_inputs[si]);
                }
                g_adapted.add_assign(&paa_grad(&g_p, s)?);
            }
            let g_etf = if w.lambda_etf != 0.0 {
                let mut g = etf_loss_grad(&lvl.adapt.expert_outputs, self.arch.eps)?;
                g.data_mut().iter_mut().for_each(|v| *v *= w.lambda_etf);
                Some(g)
            } else {
                None
            };
            let ag = adapt_layer_backward(
                &feats[l],
                &lp.router,
                &lp.bank,
                self.arch.adapt_config(),
                &lvl.adapt,
                &lvl.cache,
                &g_adapted,
                g_etf.as_ref(),
                bal_grads.as_ref().map(|g| &g[l]),
            );
            lg.router = ag.router;
            lg.b = ag.b;
        }
        Ok((parts, grads))
    }

    /// Trainable tensors with stable names, in update order.
    pub fn trainable(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, lp) in self.levels.iter().enumerate() {
            out.push((format!("level{l}.router"), &lp.router.weight));
            for (n, e) in lp.bank.experts.iter().enumerate() {
                out.push((format!("level{l}.expert{n}.b"), &e.b));
            }
            out.push((format!("level{l}.proj"), &lp.proj));
        }
        out.push(("head.dw".into(), &self.head.dw_kernel));
        out.push(("head.pw".into(), &self.head.pw));
        out.push(("head.ln_gain".into(), &self.head.ln_gain));
        out.push(("head.ln_bias".into(), &self.head.ln_bias));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for lp in &mut self.levels {
            out.push(&mut lp.router.weight);
            out.extend(lp.bank.experts.iter_mut().map(|e| &mut e.b));
            out.push(&mut lp.proj);
        }
        out.push(&mut self.head.dw_kernel);
        out.push(&mut self.head.pw);
        out.push(&mut self.head.ln_gain);
        out.push(&mut self.head.ln_bias);
        out
    }

    /// Frozen tensors: backbone, down-projections, anchors (as `1×d`).
    pub fn frozen(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        for (l, w) in self.backbone.levels.iter().enumerate() {
            out.push((format!("backbone.level{l}"), w.clone()));
        }
        for (l, lp) in self.levels.iter().enumerate() {
            for (n, e) in lp.bank.experts.iter().enumerate() {
                out.push((format!("level{l}.expert{n}.a"), e.a.clone()));
            }
        }
        out.push(("anchors.normal".into(), anchor_matrix(&self.anchors.normal)));
        out.push(("anchors.anomaly".into(), anchor_matrix(&self.anchors.anomaly)));
        out
    }

    /// Every tensor, frozen first.
    pub fn named_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = self.frozen();
        out.extend(self.trainable().into_iter().map(|(n, t)| (n, t.clone())));
        out
    }

    /// Overwrites every tensor from `tensors`; each name must be present
    /// with a matching shape.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Matrix>) -> Result<()> {
        let fetch = |name: &str, like: &Matrix| -> Result<Matrix> {
            let t = tensors
                .get(name)
                .ok_or_else(|| crate::Error::Shape(format!("missing tensor {name}")))?;
            if t.shape() != like.shape() {
                return shape_err(format!("tensor {name} is {:?}, expected {:?}", t.shape(), like.shape()));
            }
            Ok(t.clone())
        };
        for l in 0..self.backbone.levels.len() {
            self.backbone.levels[l] = fetch(&format!("backbone.level{l}"), &self.backbone.levels[l])?;
        }
        for (l, lp) in self.levels.iter_mut().enumerate() {
            lp.router.weight = fetch(&format!("level{l}.router"), &lp.router.weight)?;
            for (n, e) in lp.bank.experts.iter_mut().enumerate() {
                e.a = fetch(&format!("level{l}.expert{n}.a"), &e.a)?;
                e.b = fetch(&format!("level{l}.expert{n}.b"), &e.b)?;
            }
            lp.proj = fetch(&format!("level{l}.proj"), &lp.proj)?;
        }
        self.head.dw_kernel = fetch("head.dw", &self.head.dw_kernel)?;
        self.head.pw = fetch("head.pw", &self.head.pw)?;
        self.head.ln_gain = fetch("head.ln_gain", &self.head.ln_gain)?;
        self.head.ln_bias = fetch("head.ln_bias", &self.head.ln_bias)?;
        let normal = fetch("anchors.normal", &anchor_matrix(&self.anchors.normal))?;
        let anomaly = fetch("anchors.anomaly", &anchor_matrix(&self.anchors.anomaly))?;
        self.anchors = TextAnchors::new(normal.into_data(), anomaly.into_data())?;
        Ok(())
    }
}
