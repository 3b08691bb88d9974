use crate::linalg::Matrix;

use super::LayerNormParams;

/// Per-vector layer normalization with population variance:
/// `γ ⊙ (x − mean(x)) / sqrt(var(x) + eps) + β`.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let (xhat, _) = normalize(x, eps);
    xhat.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(h, (g, b))| g * h + b)
        .collect()
}

fn normalize(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

/// Saved normalized rows for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer norm of a matrix.
pub(crate) fn layer_norm_rows(x: &Matrix, p: &LayerNormParams, eps: f64) -> (Matrix, LnCache) {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut xhat = Matrix::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let (h, is) = normalize(x.row(i), eps);
        inv_std.push(is);
        for (j, hv) in h.iter().enumerate() {
            out.set(i, j, p.gamma[j] * hv + p.beta[j]);
        }
        xhat.row_mut(i).copy_from_slice(&h);
    }
    (out, LnCache { xhat, inv_std })
}

/// Backward of [`layer_norm_rows`]: accumulates `dγ`, `dβ` and returns `dx`.
pub(crate) fn layer_norm_rows_backward(
    dy: &Matrix,
    cache: &LnCache,
    p: &LayerNormParams,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Matrix {
    let d = dy.cols();
    let n = d as f64;
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dxhat = vec![0.0; d];
    for i in 0..dy.rows() {
        let g = dy.row(i);
        let h = cache.xhat.row(i);
        let mut sum = 0.0;
        let mut sum_h = 0.0;
        for j in 0..d {
            dgamma[j] += g[j] * h[j];
            dbeta[j] += g[j];
            dxhat[j] = g[j] * p.gamma[j];
            sum += dxhat[j];
            sum_h += dxhat[j] * h[j];
        }
        let is = cache.inv_std[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = is * (dxhat[j] - sum / n - h[j] * sum_h / n);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
