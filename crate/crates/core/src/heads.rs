//! Output heads: projection into the anchor space, the two-channel pixel
//! anomaly map, the depthwise-separable image adapter and the image score.

use crate::error::{domain_err, shape_err, Result};
use crate::linalg::{
    axpy, cosine_backward_u, cosine_unchecked, gelu, gelu_grad, layer_norm, layer_norm_backward,
    norm, softmax, softmax_backward, Matrix, SeededRng,
};
use crate::paa::grid_side;

/// Denominator floor for every cosine similarity in the heads.
pub const COS_EPS: f64 = 1e-8;
/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

/// Fixed reference directions for the normal and anomalous classes.
#[derive(Debug, Clone, PartialEq)]
pub struct TextAnchors {
    pub normal: Vec<f64>,
    pub anomaly: Vec<f64>,
}

impl TextAnchors {
    pub fn new(normal: Vec<f64>, anomaly: Vec<f64>) -> Result<Self> {
        if normal.len() != anomaly.len() {
            return shape_err("anchor lengths differ");
        }
        for v in [&normal, &anomaly] {
            if (norm(v) - 1.0).abs() > 1e-9 {
                return domain_err("anchors must be unit vectors");
            }
        }
        Ok(Self { normal, anomaly })
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    /// Same anchors with the two roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            normal: self.anomaly.clone(),
            anomaly: self.normal.clone(),
        }
    }
}

/// Trainable parameters of the depthwise image adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// Per-channel 1-D kernel, `d×width`.
    pub dw_kernel: Matrix,
    /// Pointwise mixing, `d×d`.
    pub pw: Matrix,
    pub ln_gain: Matrix,
    pub ln_bias: Matrix,
}

impl HeadParams {
    /// Near-identity start: centre tap one, pointwise identity, both plus
    /// `N(0, noise²)` jitter; unit gain, zero bias.
    pub fn init(dim: usize, width: usize, noise: f64, rng: &mut SeededRng) -> Result<Self> {
        if width.is_multiple_of(2) {
            return domain_err(format!("depthwise kernel width {width} must be odd"));
        }
        let mut dw_kernel = Matrix::randn(dim, width, noise, rng);
        for c in 0..dim {
            dw_kernel[(c, width / 2)] += 1.0;
        }
        let mut pw = Matrix::randn(dim, dim, noise, rng);
        pw.add_assign(&Matrix::identity(dim));
        Ok(Self {
            dw_kernel,
            pw,
            ln_gain: Matrix::from_vec(1, dim, vec![1.0; dim])?,
            ln_bias: Matrix::zeros(1, dim),
        })
    }

    pub fn width(&self) -> usize {
        self.dw_kernel.cols()
    }

    pub fn dim(&self) -> usize {
        self.pw.rows()
    }
}

/// Projection identity plus `N(0, noise²)` jitter.
pub fn init_projection(dim: usize, noise: f64, rng: &mut SeededRng) -> Matrix {
    let mut p = Matrix::randn(dim, dim, noise, rng);
    p.add_assign(&Matrix::identity(dim));
    p
}

/// `V = F · projᵀ`.
pub fn project(features: &Matrix, proj: &Matrix) -> Result<Matrix> {
    features.matmul_t(proj)
}

/// Bilinear resize with half-pixel centres and edge clamping, stored as the
/// four source taps of every output pixel so the adjoint is a scatter.
#[derive(Debug, Clone)]
pub struct ResizePlan {
    pub side: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<[(usize, f64); 4]>,
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

impl ResizePlan {
    pub fn new(side: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if side == 0 || out_h == 0 || out_w == 0 {
            return shape_err("empty resize");
        }
        let ys = axis_taps(side, out_h);
        let xs = axis_taps(side, out_w);
        let mut taps = Vec::with_capacity(out_h * out_w);
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                taps.push([
                    (y0 * side + x0, (1.0 - wy) * (1.0 - wx)),
                    (y0 * side + x1, (1.0 - wy) * wx),
                    (y1 * side + x0, wy * (1.0 - wx)),
                    (y1 * side + x1, wy * wx),
                ]);
            }
        }
        Ok(Self {
            side,
            out_h,
            out_w,
            taps,
        })
    }

    pub fn apply(&self, grid: &[f64]) -> Vec<f64> {
        self.taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| w * grid[i]).sum())
            .collect()
    }

    pub fn adjoint(&self, upstream: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.side * self.side];
        for (t, g) in self.taps.iter().zip(upstream) {
            for &(i, w) in t {
                out[i] += w * g;
            }
        }
        out
    }
}

/// Per-pixel two-channel probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    pub normal: Vec<f64>,
    pub anomaly: Vec<f64>,
}

/// Patch-level cosines kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MapCache {
    pub cos_normal: Vec<f64>,
    pub cos_anomaly: Vec<f64>,
}

pub fn anomaly_map(
    v: &Matrix,
    anchors: &TextAnchors,
    tau: f64,
    plan: &ResizePlan,
) -> Result<(AnomalyMap, MapCache)> {
    let side = grid_side(v.rows())?;
    if side != plan.side {
        return shape_err(format!("grid side {side} vs resize plan {}", plan.side));
    }
    if tau <= 0.0 {
        return domain_err("temperature must be positive");
    }
    if v.cols() != anchors.dim() {
        return shape_err("feature and anchor dimensions differ");
    }
    let cos_normal: Vec<f64> = (0..v.rows())
        .map(|i| cosine_unchecked(v.row(i), &anchors.normal, COS_EPS))
        .collect();
    let cos_anomaly: Vec<f64> = (0..v.rows())
        .map(|i| cosine_unchecked(v.row(i), &anchors.anomaly, COS_EPS))
        .collect();
    let ln: Vec<f64> = cos_normal.iter().map(|c| c / tau).collect();
    let la: Vec<f64> = cos_anomaly.iter().map(|c| c / tau).collect();
    let up_n = plan.apply(&ln);
    let up_a = plan.apply(&la);
    let mut normal = Vec::with_capacity(up_n.len());
    let mut anomaly = Vec::with_capacity(up_n.len());
    for (n, a) in up_n.iter().zip(&up_a) {
        let p = softmax(&[*n, *a])?;
        normal.push(p[0]);
        anomaly.push(p[1]);
    }
    Ok((
        AnomalyMap {
            height: plan.out_h,
            width: plan.out_w,
            normal,
            anomaly,
        },
        MapCache {
            cos_normal,
            cos_anomaly,
        },
    ))
}

/// Convenience wrapper that builds the resize plan on the fly.
pub fn anomaly_map_sized(
    v: &Matrix,
    anchors: &TextAnchors,
    tau: f64,
    out_h: usize,
    out_w: usize,
) -> Result<AnomalyMap> {
    let plan = ResizePlan::new(grid_side(v.rows())?, out_h, out_w)?;
    anomaly_map(v, anchors, tau, &plan).map(|(m, _)| m)
}

/// Backward of [`anomaly_map`]: from per-pixel probability gradients to
/// the gradient on the projected features.
pub fn anomaly_map_backward(
    v: &Matrix,
    anchors: &TextAnchors,
    tau: f64,
    plan: &ResizePlan,
    map: &AnomalyMap,
    grad_normal: &[f64],
    grad_anomaly: &[f64],
) -> Matrix {
    let pixels = map.normal.len();
    let mut gl_n = Vec::with_capacity(pixels);
    let mut gl_a = Vec::with_capacity(pixels);
    for px in 0..pixels {
        let dz = softmax_backward(
            &[map.normal[px], map.anomaly[px]],
            &[grad_normal[px], grad_anomaly[px]],
        );
        gl_n.push(dz[0]);
        gl_a.push(dz[1]);
    }
    let patch_n = plan.adjoint(&gl_n);
    let patch_a = plan.adjoint(&gl_a);
    let mut grad_v = Matrix::zeros(v.rows(), v.cols());
    for i in 0..v.rows() {
        let row = grad_v.row_mut(i);
        cosine_backward_u(v.row(i), &anchors.normal, COS_EPS, patch_n[i] / tau, row);
        cosine_backward_u(v.row(i), &anchors.anomaly, COS_EPS, patch_a[i] / tau, row);
    }
    grad_v
}

/// Intermediates of [`depthwise_head_with_cache`].
#[derive(Debug, Clone)]
pub struct HeadCache {
    ln_out: Matrix,
    xhat: Matrix,
    inv_std: Vec<f64>,
    conv: Matrix,
    act: Matrix,
}

#[inline]
fn tap_source(i: usize, t: usize, half: usize, len: usize) -> usize {
    (i as isize + t as isize - half as isize).clamp(0, len as isize - 1) as usize
}

/// `mean_i PwConv(GELU(DwConv(LN(F))))_i`, with the patch sequence as the
/// convolution axis and replicate same-padding.
pub fn depthwise_head(features: &Matrix, params: &HeadParams) -> Result<Vec<f64>> {
    depthwise_head_with_cache(features, params).map(|(v, _)| v)
}

pub fn depthwise_head_with_cache(features: &Matrix, params: &HeadParams) -> Result<(Vec<f64>, HeadCache)> {
    let width = params.width();
    if width.is_multiple_of(2) {
        return domain_err(format!("depthwise kernel width {width} must be odd"));
    }
    let (l, d) = features.shape();
    if d != params.dim() || params.dw_kernel.rows() != d {
        return shape_err("head parameters do not match feature dimension");
    }
    if l == 0 {
        return shape_err("depthwise head over zero patches");
    }
    let half = width / 2;
    let mut ln_out = Matrix::zeros(l, d);
    let mut xhat = Matrix::zeros(l, d);
    let mut inv_std = Vec::with_capacity(l);
    for i in 0..l {
        let (y, h, s) = layer_norm(features.row(i), params.ln_gain.row(0), params.ln_bias.row(0), LN_EPS);
        ln_out.row_mut(i).copy_from_slice(&y);
        xhat.row_mut(i).copy_from_slice(&h);
        inv_std.push(s);
    }
    let mut conv = Matrix::zeros(l, d);
    for i in 0..l {
        for t in 0..width {
            let src = tap_source(i, t, half, l);
            for c in 0..d {
                conv[(i, c)] += params.dw_kernel[(c, t)] * ln_out[(src, c)];
            }
        }
    }
    let mut act = conv.clone();
    act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let mut pooled_act = vec![0.0; d];
    for i in 0..l {
        axpy(1.0 / l as f64, act.row(i), &mut pooled_act);
    }
    // pointwise conv is linear, so pooling commutes with it
    let pooled = params.pw.matvec(&pooled_act);
    Ok((
        pooled,
        HeadCache {
            ln_out,
            xhat,
            inv_std,
            conv,
            act,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub dw_kernel: Matrix,
    pub pw: Matrix,
    pub ln_gain: Matrix,
    pub ln_bias: Matrix,
}

impl HeadGrads {
    pub fn zeros_like(p: &HeadParams) -> Self {
        Self {
            dw_kernel: Matrix::zeros(p.dw_kernel.rows(), p.dw_kernel.cols()),
            pw: Matrix::zeros(p.pw.rows(), p.pw.cols()),
            ln_gain: Matrix::zeros(1, p.dim()),
            ln_bias: Matrix::zeros(1, p.dim()),
        }
    }
}

/// Backward of the depthwise head; accumulates parameter gradients and
/// returns the gradient on the input features.
pub fn depthwise_head_backward(
    params: &HeadParams,
    cache: &HeadCache,
    grad_pooled: &[f64],
    grads: &mut HeadGrads,
) -> Matrix {
    let (l, d) = cache.conv.shape();
    let width = params.width();
    let half = width / 2;
    let inv_l = 1.0 / l as f64;
    let mut pooled_act = vec![0.0; d];
    for i in 0..l {
        axpy(inv_l, cache.act.row(i), &mut pooled_act);
    }
    grads.pw.add_outer(1.0, grad_pooled, &pooled_act);
    let grad_act_row: Vec<f64> = params.pw.t_matvec(grad_pooled).iter().map(|g| g * inv_l).collect();

    let mut grad_ln = Matrix::zeros(l, d);
    for i in 0..l {
        for c in 0..d {
            let gz = grad_act_row[c] * gelu_grad(cache.conv[(i, c)]);
            if gz == 0.0 {
                continue;
            }
            for t in 0..width {
                let src = tap_source(i, t, half, l);
                grads.dw_kernel[(c, t)] += gz * cache.ln_out[(src, c)];
                grad_ln[(src, c)] += gz * params.dw_kernel[(c, t)];
            }
        }
    }

    let mut grad_in = Matrix::zeros(l, d);
    for i in 0..l {
        let gx = layer_norm_backward(
            cache.xhat.row(i),
            cache.inv_std[i],
            params.ln_gain.row(0),
            grad_ln.row(i),
            grads.ln_gain.row_mut(0),
            grads.ln_bias.row_mut(0),
        );
        grad_in.row_mut(i).copy_from_slice(&gx);
    }
    grad_in
}

/// Image-level probabilities from `softmax([cos(V,T_A), cos(V,T_N)] / tau)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorePair {
    pub anomaly: f64,
    pub normal: f64,
}

pub fn anomaly_score(v: &[f64], anchors: &TextAnchors, tau: f64) -> Result<ScorePair> {
    if tau <= 0.0 {
        return domain_err("temperature must be positive");
    }
    if v.len() != anchors.dim() {
        return shape_err("image feature and anchor dimensions differ");
    }
    let raw = [
        cosine_unchecked(v, &anchors.anomaly, COS_EPS) / tau,
        cosine_unchecked(v, &anchors.normal, COS_EPS) / tau,
    ];
    let p = softmax(&raw)?;
    Ok(ScorePair {
        anomaly: p[0],
        normal: p[1],
    })
}

/// Gradient on the image feature given `dL/dŜ_A`.
pub fn anomaly_score_backward(
    v: &[f64],
    anchors: &TextAnchors,
    tau: f64,
    score: ScorePair,
    grad_anomaly: f64,
) -> Vec<f64> {
    let dz = softmax_backward(&[score.anomaly, score.normal], &[grad_anomaly, 0.0]);
    let mut grad = vec![0.0; v.len()];
    cosine_backward_u(v, &anchors.anomaly, COS_EPS, dz[0] / tau, &mut grad);
    cosine_backward_u(v, &anchors.normal, COS_EPS, dz[1] / tau, &mut grad);
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn axis_anchors(d: usize) -> TextAnchors {
        let mut n = vec![0.0; d];
        let mut a = vec![0.0; d];
        n[0] = 1.0;
        a[1] = 1.0;
        TextAnchors::new(n, a).unwrap()
    }

    #[test]
    fn projection_examples() {
        let f = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(project(&f, &Matrix::identity(2)).unwrap(), f);
        assert_eq!(project(&f, &Matrix::zeros(2, 2)).unwrap(), Matrix::zeros(2, 2));
        let p = Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
        let v = project(&f, &p).unwrap();
        // row 0: [1*0.5 + 2*-1, 1*2 + 2*0.25]
        assert_eq!(v.row(0), &[-1.5, 2.5]);
        assert_eq!(v.row(1), &[-2.5, 7.0]);
    }

    #[test]
    fn equal_cosines_give_half() {
        let anchors = axis_anchors(3);
        let v = Matrix::from_rows(&vec![vec![1.0, 1.0, 0.3]; 4]).unwrap();
        let map = anomaly_map_sized(&v, &anchors, 0.07, 6, 6).unwrap();
        for (n, a) in map.normal.iter().zip(&map.anomaly) {
            assert_abs_diff_eq!(*n, 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(*a, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn literal_temperature_example() {
        // cos_N = 0.2, cos_A = 0.8 with tau = 1
        let anchors = axis_anchors(3);
        let c = (1.0f64 - 0.04 - 0.64).sqrt();
        let v = Matrix::from_rows(&[vec![0.2, 0.8, c]]).unwrap();
        let map = anomaly_map_sized(&v, &anchors, 1.0, 1, 1).unwrap();
        assert_abs_diff_eq!(map.anomaly[0], 0.6457, epsilon = 1e-4);
        let exact = 0.8f64.exp() / (0.2f64.exp() + 0.8f64.exp());
        assert_abs_diff_eq!(map.anomaly[0], exact, epsilon = 1e-12);
    }

    #[test]
    fn resize_is_identity_at_grid_size() {
        let grid: Vec<f64> = (0..16).map(|v| v as f64 * 0.3 - 1.0).collect();
        let plan = ResizePlan::new(4, 4, 4).unwrap();
        assert_eq!(plan.apply(&grid), grid);
    }

    #[test]
    fn resize_interpolates_between_nodes() {
        let plan = ResizePlan::new(2, 1, 8).unwrap();
        let out = plan.apply(&[0.0, 1.0, 0.0, 1.0]);
        for w in out.windows(2) {
            assert!(w[0] <= w[1]);
        }
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn resize_adjoint_identity() {
        let mut rng = SeededRng::new(3);
        let plan = ResizePlan::new(3, 7, 5).unwrap();
        let x: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..35).map(|_| rng.normal()).collect();
        let lhs: f64 = plan.apply(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = plan.adjoint(&y).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn swapping_anchors_swaps_channels() {
        let mut rng = SeededRng::new(9);
        let v = Matrix::randn(9, 4, 1.0, &mut rng);
        let mut a = vec![0.0; 4];
        a[2] = 1.0;
        let mut n = vec![0.0; 4];
        n[0] = 0.6;
        n[3] = 0.8;
        let anchors = TextAnchors::new(n, a).unwrap();
        let m1 = anomaly_map_sized(&v, &anchors, 0.5, 6, 6).unwrap();
        let m2 = anomaly_map_sized(&v, &anchors.swapped(), 0.5, 6, 6).unwrap();
        assert_eq!(m1.normal, m2.anomaly);
        assert_eq!(m1.anomaly, m2.normal);
        for (p, q) in m1.normal.iter().zip(&m1.anomaly) {
            assert!((p + q - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn map_rejects_non_square() {
        let anchors = axis_anchors(2);
        assert!(anomaly_map_sized(&Matrix::zeros(5, 2), &anchors, 1.0, 4, 4).is_err());
    }

    #[test]
    fn score_examples() {
        let anchors = axis_anchors(3);
        let s = anomaly_score(&anchors.anomaly.clone(), &anchors, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(s.anomaly, e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(s.anomaly, 0.7311, epsilon = 1e-4);
        let mid = anomaly_score(&[1.0, 1.0, 0.0], &anchors, 0.07).unwrap();
        assert_abs_diff_eq!(mid.anomaly, 0.5, epsilon = 1e-15);
        let sharp = anomaly_score(&[0.2, 0.9, 0.0], &anchors, 1e-3).unwrap();
        assert!(sharp.anomaly > 1.0 - 1e-12);
        assert!(anomaly_score(&[1.0, 0.0, 0.0], &anchors, 0.0).is_err());
    }

    #[test]
    fn head_identical_rows_pool_to_row_output() {
        let mut rng = SeededRng::new(5);
        let params = HeadParams::init(4, 3, 0.1, &mut rng).unwrap();
        let row = vec![0.3, -1.0, 2.0, 0.5];
        let single = depthwise_head(&Matrix::from_rows(std::slice::from_ref(&row)).unwrap(), &params).unwrap();
        let many = depthwise_head(&Matrix::from_rows(&vec![row; 6]).unwrap(), &params).unwrap();
        for (a, b) in single.iter().zip(&many) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
        let mut even = params.clone();
        even.dw_kernel = Matrix::zeros(4, 2);
        assert!(depthwise_head(&Matrix::zeros(3, 4), &even).is_err());
        assert!(HeadParams::init(4, 2, 0.1, &mut rng).is_err());
    }

    fn fd<F: Fn(&Matrix) -> f64>(f: F, x: &Matrix, h: f64) -> Matrix {
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for idx in 0..x.data().len() {
            let mut up = x.clone();
            let mut dn = x.clone();
            up.data_mut()[idx] += h;
            dn.data_mut()[idx] -= h;
            g.data_mut()[idx] = (f(&up) - f(&dn)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Matrix, b: &Matrix) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-4 * x.abs().max(y.abs()).max(1e-6), "{x} vs {y}");
        }
    }

    #[test]
    fn head_backward_matches_differences() {
        let mut rng = SeededRng::new(6);
        let params = HeadParams::init(4, 3, 0.3, &mut rng).unwrap();
        let f = Matrix::randn(5, 4, 1.0, &mut rng);
        let w: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let loss = |f: &Matrix, p: &HeadParams| -> f64 {
            depthwise_head(f, p).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = depthwise_head_with_cache(&f, &params).unwrap();
        let mut grads = HeadGrads::zeros_like(&params);
        let gin = depthwise_head_backward(&params, &cache, &w, &mut grads);
        let h = 1e-5;
        assert_close(&gin, &fd(|x| loss(x, &params), &f, h));
        assert_close(&grads.dw_kernel, &fd(|k| { let mut p = params.clone(); p.dw_kernel = k.clone(); loss(&f, &p) }, &params.dw_kernel, h));
        assert_close(&grads.pw, &fd(|k| { let mut p = params.clone(); p.pw = k.clone(); loss(&f, &p) }, &params.pw, h));
        assert_close(&grads.ln_gain, &fd(|k| { let mut p = params.clone(); p.ln_gain = k.clone(); loss(&f, &p) }, &params.ln_gain, h));
        assert_close(&grads.ln_bias, &fd(|k| { let mut p = params.clone(); p.ln_bias = k.clone(); loss(&f, &p) }, &params.ln_bias, h));
    }

    #[test]
    fn map_backward_matches_differences() {
        let mut rng = SeededRng::new(7);
        let mut n = vec![0.0; 3];
        n[0] = 1.0;
        let a = crate::linalg::l2_normalize(&[0.2, 1.0, -0.4], 1e-12);
        let anchors = TextAnchors::new(n, a).unwrap();
        let v = Matrix::randn(4, 3, 1.0, &mut rng);
        let plan = ResizePlan::new(2, 5, 5).unwrap();
        let wn: Vec<f64> = (0..25).map(|_| rng.normal()).collect();
        let wa: Vec<f64> = (0..25).map(|_| rng.normal()).collect();
        let loss = |v: &Matrix| -> f64 {
            let (m, _) = anomaly_map(v, &anchors, 0.5, &plan).unwrap();
            m.normal.iter().zip(&wn).map(|(a, b)| a * b).sum::<f64>()
                + m.anomaly.iter().zip(&wa).map(|(a, b)| a * b).sum::<f64>()
        };
        let (map, _) = anomaly_map(&v, &anchors, 0.5, &plan).unwrap();
        let g = anomaly_map_backward(&v, &anchors, 0.5, &plan, &map, &wn, &wa);
        assert_close(&g, &fd(loss, &v, 1e-5));
    }

    #[test]
    fn score_backward_matches_differences() {
        let anchors = axis_anchors(3);
        let v = [0.4, -0.3, 0.9];
        let s = anomaly_score(&v, &anchors, 0.3).unwrap();
        let g = anomaly_score_backward(&v, &anchors, 0.3, s, 1.0);
        let h = 1e-6;
        for i in 0..3 {
            let mut up = v;
            let mut dn = v;
            up[i] += h;
            dn[i] -= h;
            let fd = (anomaly_score(&up, &anchors, 0.3).unwrap().anomaly
                - anomaly_score(&dn, &anchors, 0.3).unwrap().anomaly)
                / (2.0 * h);
            assert_abs_diff_eq!(g[i], fd, epsilon = 1e-9);
        }
    }
}
