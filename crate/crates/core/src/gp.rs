//! Exact GP regression with an isotropic Matérn 5/2 kernel.
//!
//! The loss is `yᵀK⁻¹y + log|K|` (no ½ and no 2π term); gradients are
//! returned for the raw kernel parameters and every input row.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NOISE_FLOOR: f64 = 1e-6;
const JITTER_STEPS: [f64; 3] = [1e-8, 1e-6, 1e-4];
const SQRT5: f64 = 2.236_067_977_499_79;

/// Kernel parameters γ in unconstrained space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub raw_lengthscale: f64,
    pub raw_outputscale: f64,
    pub raw_noise: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            raw_lengthscale: 0.0,
            raw_outputscale: 0.0,
            raw_noise: (0.1f64).ln(),
        }
    }
}

impl KernelParams {
    /// Builds raw parameters from positive values. The noise must exceed
    /// the floor.
    pub fn from_values(lengthscale: f64, outputscale: f64, noise: f64) -> Result<Self> {
        if lengthscale <= 0.0 || outputscale <= 0.0 || noise <= NOISE_FLOOR {
            return Err(Error::validation(format!(
                "kernel values must be positive with noise > {NOISE_FLOOR}"
            )));
        }
        Ok(KernelParams {
            raw_lengthscale: lengthscale.ln(),
            raw_outputscale: outputscale.ln(),
            raw_noise: (noise - NOISE_FLOOR).ln(),
        })
    }

    pub fn lengthscale(&self) -> f64 {
        self.raw_lengthscale.exp()
    }

    /// σ_out²
    pub fn outputscale(&self) -> f64 {
        self.raw_outputscale.exp()
    }

    /// σ_p², never below [`NOISE_FLOOR`].
    pub fn noise(&self) -> f64 {
        self.raw_noise.exp() + NOISE_FLOOR
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.raw_lengthscale, self.raw_outputscale, self.raw_noise]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        KernelParams {
            raw_lengthscale: a[0],
            raw_outputscale: a[1],
            raw_noise: a[2],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn matern52(a: &[f64], b: &[f64], params: &KernelParams) -> f64 {
    let u = SQRT5 * sq_dist(a, b).sqrt() / params.lengthscale();
    params.outputscale() * (1.0 + u + u * u / 3.0) * (-u).exp()
}

/// K′ over the rows of `x`: upper triangle computed, lower mirrored.
pub fn kernel_matrix(x: &[Vec<f64>], params: &KernelParams) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = matern52(&x[i], &x[j], params);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn check_inputs(x: &[Vec<f64>], y: &[f64], params: &KernelParams) -> Result<()> {
    if x.is_empty() {
        return Err(Error::validation("GP needs at least one observation"));
    }
    if x.len() != y.len() {
        return Err(Error::shape(format!("{} inputs but {} targets", x.len(), y.len())));
    }
    let z = x[0].len();
    for (i, row) in x.iter().enumerate() {
        if row.len() != z {
            return Err(Error::shape(format!("row {i} has width {} != {z}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("non-finite GP input in row {i}")));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite GP target"));
    }
    if !params.is_finite() {
        return Err(Error::numerical(format!("non-finite kernel parameters {params:?}")));
    }
    Ok(())
}

/// Cholesky of `K′ + σ_p² I`, escalating jitter on failure.
fn factor(kp: &DMatrix<f64>, noise: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = kp.nrows();
    let mut k = kp.clone();
    for i in 0..n {
        k[(i, i)] += noise;
    }
    if let Some(c) = Cholesky::new(k.clone()) {
        return Ok((c, 0.0));
    }
    let mean_diag = k.diagonal().mean();
    for step in JITTER_STEPS {
        let jitter = step * mean_diag;
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj) {
            return Ok((c, jitter));
        }
    }
    let eig = k.clone().symmetric_eigenvalues();
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    Err(Error::numerical(format!(
        "Cholesky failed after jitter escalation (eigenvalue range [{lo:.3e}, {hi:.3e}], \
         condition estimate {:.3e})",
        hi.abs() / lo.abs().max(f64::MIN_POSITIVE)
    )))
}

/// `K⁻¹ = L⁻ᵀ L⁻¹`, using the triangular structure of both factors.
fn inverse_from_factor(chol: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    let l = chol.l_dirty();
    let n = l.nrows();
    // Row-major copy of L (lower triangle only is meaningful).
    let lr: Vec<f64> = l.transpose().as_slice().to_vec();
    // Column-major L⁻¹.
    let mut li = vec![0.0; n * n];
    for j in 0..n {
        let col = &mut li[j * n..(j + 1) * n];
        col[j] = 1.0 / lr[j * n + j];
        for i in (j + 1)..n {
            let row = &lr[i * n + j..i * n + i];
            let s: f64 = row.iter().zip(&col[j..i]).map(|(a, b)| a * b).sum();
            col[i] = -s / lr[i * n + i];
        }
    }
    let mut w = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let s: f64 = li[a * n + b..(a + 1) * n]
                .iter()
                .zip(&li[b * n + b..(b + 1) * n])
                .map(|(x, y)| x * y)
                .sum();
            w[(a, b)] = s;
            w[(b, a)] = s;
        }
    }
    w
}

#[derive(Clone, Debug)]
pub struct GpState {
    x: Vec<Vec<f64>>,
    y: DVector<f64>,
    params: KernelParams,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
}

pub fn fit(x: &[Vec<f64>], y: &[f64], params: &KernelParams) -> Result<GpState> {
    check_inputs(x, y, params)?;
    let kp = kernel_matrix(x, params);
    let (chol, jitter) = factor(&kp, params.noise())?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    Ok(GpState {
        x: x.to_vec(),
        y: yv,
        params: params.clone(),
        chol,
        alpha,
        jitter,
    })
}

impl GpState {
    pub fn alpha(&self) -> &[f64] {
        self.alpha.as_slice()
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    /// Extra diagonal added beyond σ_p² to make K factorizable.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn targets(&self) -> &[f64] {
        self.y.as_slice()
    }

    /// Posterior mean and latent variance (before clamping).
    pub fn predict_unclamped(&self, x_star: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(
            self.x.len(),
            self.x.iter().map(|xi| matern52(xi, x_star, &self.params)),
        );
        let mean = ks.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor has a nonzero diagonal");
        let var = matern52(x_star, x_star, &self.params) - v.norm_squared();
        (mean, var)
    }

    /// Posterior mean and variance with the variance clamped at zero.
    pub fn predict(&self, x_star: &[f64]) -> (f64, f64) {
        let (m, v) = self.predict_unclamped(x_star);
        (m, v.max(0.0))
    }

    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Vec<(f64, f64)> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    /// `yᵀK⁻¹y + log|K|` for the fitted data.
    pub fn nll(&self) -> f64 {
        let log_det: f64 = self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        self.y.dot(&self.alpha) + 2.0 * log_det
    }
}

pub fn nll(x: &[Vec<f64>], y: &[f64], params: &KernelParams) -> Result<f64> {
    let v = fit(x, y, params)?.nll();
    if !v.is_finite() {
        return Err(Error::numerical("non-finite negative log-likelihood"));
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NllGrad {
    pub value: f64,
    /// ∂L/∂(raw_lengthscale, raw_outputscale, raw_noise)
    pub params: [f64; 3],
    /// ∂L/∂x, one row per input.
    pub inputs: Vec<Vec<f64>>,
}

/// Loss and gradients via `∂L/∂K = K⁻¹ − ααᵀ`.
pub fn nll_grad(x: &[Vec<f64>], y: &[f64], params: &KernelParams) -> Result<NllGrad> {
    let state = fit(x, y, params)?;
    let value = state.nll();
    if !value.is_finite() {
        return Err(Error::numerical("non-finite negative log-likelihood"));
    }
    let n = x.len();
    let mut w = inverse_from_factor(&state.chol);
    let a = &state.alpha;
    for i in 0..n {
        for j in 0..n {
            w[(i, j)] -= a[i] * a[j];
        }
    }

    let ell = params.lengthscale();
    let s = params.outputscale();
    let mut g_len = 0.0;
    let mut g_out = 0.0;
    let mut g_x = vec![vec![0.0; x[0].len()]; n];
    for i in 0..n {
        g_out += w[(i, i)] * s;
        for j in (i + 1)..n {
            let r = sq_dist(&x[i], &x[j]).sqrt();
            let u = SQRT5 * r / ell;
            let e = (-u).exp();
            let k = s * (1.0 + u + u * u / 3.0) * e;
            let wij = w[(i, j)];
            // Each off-diagonal pair appears twice in the trace.
            g_out += 2.0 * wij * k;
            g_len += 2.0 * wij * s * u * u * (1.0 + u) * e / 3.0;
            let c = -s * (5.0 / (ell * ell)) * (1.0 + u) * e / 3.0;
            for d in 0..x[i].len() {
                let dk = c * (x[i][d] - x[j][d]);
                g_x[i][d] += 2.0 * wij * dk;
                g_x[j][d] -= 2.0 * wij * dk;
            }
        }
    }
    let g_noise = w.trace() * params.raw_noise.exp();
    Ok(NllGrad {
        value,
        params: [g_len, g_out, g_noise],
        inputs: g_x,
    })
}
