//! Dense row-major matrices, the seeded generator, Householder QR and the
//! small vector kernels (softmax, cosine, normalization, layer norm, GELU)
//! shared by every other module. Everything is `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{domain_err, shape_err, Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return shape_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return shape_err(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                out[(i, j)] = dot(self.row(i), other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return shape_err(format!(
                "t_matmul ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    /// `self · v` for a column vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · v`.
    pub fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            axpy(vi, self.row(i), &mut out);
        }
        out
    }

    /// Accumulates the outer product `scale · u vᵀ`.
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let s = scale * ui;
            if s == 0.0 {
                continue;
            }
            axpy(s, v, self.row_mut(i));
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Deterministic generator backed by ChaCha8 (RFC 7539 block function,
/// 8 rounds). The stream is fully defined by the 64-bit seed, so any
/// platform reproduces the same draws; the position can be captured and
/// restored through [`RngState`].
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of a [`SeededRng`] stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Self::new(state.seed);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    /// Independent child stream; advances the parent by one draw.
    pub fn fork(&mut self) -> SeededRng {
        SeededRng::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `y += a · x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Thin Householder QR of an `m×n` matrix with `m ≥ n`.
///
/// Returns `(Q, R)` with `Q` of shape `m×n` (orthonormal columns) and `R`
/// upper triangular `n×n`. The diagonal of `R` is forced nonnegative, which
/// makes the factorization unique for full-rank input.
pub fn householder_qr(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, n) = a.shape();
    if n > m {
        return Err(Error::RankInfeasible { rows: n, cols: m });
    }
    let mut work = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v: Vec<f64> = (j..m).map(|i| work[(i, j)]).collect();
        let x_norm = norm(&v);
        if x_norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -x_norm } else { x_norm };
        v[0] -= alpha;
        let v_norm = norm(&v);
        if v_norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        v.iter_mut().for_each(|x| *x /= v_norm);
        for col in j..n {
            let proj: f64 = (j..m).map(|i| v[i - j] * work[(i, col)]).sum();
            for i in j..m {
                work[(i, col)] -= 2.0 * v[i - j] * proj;
            }
        }
        reflectors.push(v);
    }

    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            r[(i, j)] = work[(i, j)];
        }
    }

    // Q = H_0 H_1 … H_{n-1} · I[:, :n]
    let mut q = Matrix::zeros(m, n);
    for i in 0..n {
        q[(i, i)] = 1.0;
    }
    for (j, v) in reflectors.iter().enumerate().rev() {
        if v.is_empty() {
            continue;
        }
        for col in 0..n {
            let proj: f64 = (j..m).map(|i| v[i - j] * q[(i, col)]).sum();
            for i in j..m {
                q[(i, col)] -= 2.0 * v[i - j] * proj;
            }
        }
    }

    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for k in j..n {
                r[(j, k)] = -r[(j, k)];
            }
            for i in 0..m {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok((q, r))
}

/// Draws `C ~ N(0, I)` of shape `cols×rows`, factors it, and returns the
/// transposed Q factor: a `rows×cols` matrix with orthonormal rows.
pub fn qr_orthonormal_rows(rows: usize, cols: usize, rng: &mut SeededRng) -> Result<Matrix> {
    if rows > cols {
        return Err(Error::RankInfeasible { rows, cols });
    }
    let c = Matrix::randn(cols, rows, 1.0, rng);
    let (q, _) = householder_qr(&c)?;
    Ok(q.transpose())
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return domain_err("softmax of an empty vector");
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Vector-Jacobian product of softmax: given `p = softmax(z)` and `dL/dp`,
/// returns `dL/dz`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let inner = dot(p, grad_p);
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - inner)).collect()
}

/// Cosine similarity with the denominator floored at `eps`.
pub fn cosine_sim(u: &[f64], v: &[f64], eps: f64) -> Result<f64> {
    if u.len() != v.len() {
        return shape_err(format!("cosine of lengths {} and {}", u.len(), v.len()));
    }
    Ok(cosine_unchecked(u, v, eps))
}

pub(crate) fn cosine_unchecked(u: &[f64], v: &[f64], eps: f64) -> f64 {
    let denom = (norm(u) * norm(v)).max(eps);
    dot(u, v) / denom
}

/// Gradient of [`cosine_sim`] with respect to `u`, scaled by `upstream`,
/// accumulated into `grad_u`.
pub fn cosine_backward_u(u: &[f64], v: &[f64], eps: f64, upstream: f64, grad_u: &mut [f64]) {
    let nu = norm(u);
    let nv = norm(v);
    let prod = nu * nv;
    if prod <= eps {
        axpy(upstream / eps, v, grad_u);
        return;
    }
    let c = dot(u, v) / prod;
    axpy(upstream / prod, v, grad_u);
    axpy(-upstream * c / (nu * nu), u, grad_u);
}

/// `v / max(‖v‖, eps)`; the zero vector maps to zero.
pub fn l2_normalize(v: &[f64], eps: f64) -> Vec<f64> {
    let n = norm(v).max(eps);
    v.iter().map(|x| x / n).collect()
}

/// Vector-Jacobian product of [`l2_normalize`].
pub fn l2_normalize_backward(v: &[f64], eps: f64, grad_out: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n <= eps {
        return grad_out.iter().map(|g| g / eps).collect();
    }
    let radial = dot(v, grad_out) / (n * n);
    v.iter()
        .zip(grad_out)
        .map(|(vi, gi)| (gi - radial * vi) / n)
        .collect()
}

/// Layer normalization over one row. Returns the output and the normalized
/// (pre-affine) values plus the inverse standard deviation for backward.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = xhat
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(h, (g, b))| g * h + b)
        .collect();
    (y, xhat, inv_std)
}

/// Backward of [`layer_norm`]: accumulates gain/bias gradients and returns
/// the gradient with respect to the input row.
pub fn layer_norm_backward(
    xhat: &[f64],
    inv_std: f64,
    gain: &[f64],
    grad_y: &[f64],
    grad_gain: &mut [f64],
    grad_bias: &mut [f64],
) -> Vec<f64> {
    let n = xhat.len() as f64;
    let mut g_hat = vec![0.0; xhat.len()];
    for j in 0..xhat.len() {
        grad_gain[j] += grad_y[j] * xhat[j];
        grad_bias[j] += grad_y[j];
        g_hat[j] = grad_y[j] * gain[j];
    }
    let mean_g = g_hat.iter().sum::<f64>() / n;
    let mean_gx = dot(&g_hat, xhat) / n;
    g_hat
        .iter()
        .zip(xhat)
        .map(|(g, h)| inv_std * (g - mean_g - h * mean_gx))
        .collect()
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
