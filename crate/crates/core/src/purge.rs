//! Token purging: divergence scoring against a source prototype and removal of
//! the most divergent tokens before the first attention layer.
//!
//! PG-SP scores tokens by diagonal Mahalanobis distance to source statistics;
//! PG-SF scores them by negative cosine similarity between their block-1 keys
//! and the projected CLS token.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, vec_matmul, Matrix};
use crate::model::{
    embed_tokens, layer_norm, read_container, BlockWeights, BnMode, Container, LayerNormParams,
    ModelWeights, PurgeHook,
};
use crate::tokenizer::TokenizedSample;

/// Lower bound applied to every `sigma_S` entry before it is inverted.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Where, and how, source token statistics were gathered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsOrigin {
    /// Per-sample mean/std over tokens, folded into running means.
    EmbeddingOutput,
    /// Mean/std over every token seen, accumulated at the block-1 LayerNorm input.
    FirstLnInput,
}

impl StatsOrigin {
    fn code(self) -> f32 {
        match self {
            StatsOrigin::EmbeddingOutput => 0.0,
            StatsOrigin::FirstLnInput => 1.0,
        }
    }
}

impl std::str::FromStr for StatsOrigin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embed" | "embedding" | "embedding_output" => Ok(StatsOrigin::EmbeddingOutput),
            "ln" | "first_ln_input" => Ok(StatsOrigin::FirstLnInput),
            _ => Err(Error::invalid_arg(format!("unknown statistics origin `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub n_samples: u64,
    pub origin: StatsOrigin,
}

/// Single-pass fold of per-sample token means and stds.
///
/// Each pushed sample contributes its own `mu_i` and population `sigma_i` over
/// its tokens; both are folded with `phi <- phi + (phi_i - phi) / n`.
#[derive(Debug, Clone)]
pub struct SampleWelford {
    mu: Vec<f64>,
    sigma: Vec<f64>,
    n: u64,
}

impl SampleWelford {
    pub fn new(d: usize) -> Self {
        Self {
            mu: vec![0.0; d],
            sigma: vec![0.0; d],
            n: 0,
        }
    }

    pub fn push(&mut self, tokens: &Matrix) -> Result<()> {
        if tokens.cols() != self.mu.len() || tokens.rows() == 0 {
            return Err(Error::invalid_arg(format!(
                "expected a non-empty token matrix with {} columns, got {}x{}",
                self.mu.len(),
                tokens.rows(),
                tokens.cols()
            )));
        }
        let (mu_i, sigma_i) = token_mean_std(tokens);
        self.n += 1;
        let inv = 1.0 / self.n as f64;
        for j in 0..self.mu.len() {
            self.mu[j] += inv * (mu_i[j] - self.mu[j]);
            self.sigma[j] += inv * (sigma_i[j] - self.sigma[j]);
        }
        Ok(())
    }

    pub fn finish(self) -> Result<SourceStats> {
        if self.n == 0 {
            return Err(Error::invalid_arg("statistics stream is empty"));
        }
        Ok(SourceStats {
            mu: self.mu,
            sigma: self.sigma,
            n_samples: self.n,
            origin: StatsOrigin::EmbeddingOutput,
        })
    }
}

/// Classic Welford mean/variance over every token row pushed.
#[derive(Debug, Clone)]
pub struct TokenWelford {
    mean: Vec<f64>,
    m2: Vec<f64>,
    count: u64,
    samples: u64,
}

impl TokenWelford {
    pub fn new(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            m2: vec![0.0; d],
            count: 0,
            samples: 0,
        }
    }

    pub fn push(&mut self, tokens: &Matrix) -> Result<()> {
        if tokens.cols() != self.mean.len() || tokens.rows() == 0 {
            return Err(Error::invalid_arg(format!(
                "expected a non-empty token matrix with {} columns, got {}x{}",
                self.mean.len(),
                tokens.rows(),
                tokens.cols()
            )));
        }
        for r in tokens.row_iter() {
            self.count += 1;
            let inv = 1.0 / self.count as f64;
            for j in 0..r.len() {
                let delta = r[j] - self.mean[j];
                self.mean[j] += delta * inv;
                self.m2[j] += delta * (r[j] - self.mean[j]);
            }
        }
        self.samples += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<SourceStats> {
        if self.count == 0 {
            return Err(Error::invalid_arg("statistics stream is empty"));
        }
        let c = self.count as f64;
        Ok(SourceStats {
            mu: self.mean,
            sigma: self.m2.iter().map(|m| (m / c).max(0.0).sqrt()).collect(),
            n_samples: self.samples,
            origin: StatsOrigin::FirstLnInput,
        })
    }
}

/// Per-column mean and population std of a token matrix.
pub fn token_mean_std(tokens: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = tokens.rows() as f64;
    let mut mean = vec![0.0; tokens.cols()];
    tokens.col_sums_into(&mut mean);
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; tokens.cols()];
    for r in tokens.row_iter() {
        for j in 0..r.len() {
            var[j] += (r[j] - mean[j]) * (r[j] - mean[j]);
        }
    }
    (mean, var.into_iter().map(|v| (v / n).sqrt()).collect())
}

/// Folds a stream of per-sample `L_t x d` token matrices (variant a).
pub fn welford_collect<'a, I>(stream: I) -> Result<SourceStats>
where
    I: IntoIterator<Item = &'a Matrix>,
{
    let mut it = stream.into_iter().peekable();
    let d = it
        .peek()
        .map(|m| m.cols())
        .ok_or_else(|| Error::invalid_arg("statistics stream is empty"))?;
    let mut acc = SampleWelford::new(d);
    for m in it {
        acc.push(m)?;
    }
    acc.finish()
}

/// Token-level statistics over a stream (variant b).
pub fn welford_collect_tokens<'a, I>(stream: I) -> Result<SourceStats>
where
    I: IntoIterator<Item = &'a Matrix>,
{
    let mut it = stream.into_iter().peekable();
    let d = it
        .peek()
        .map(|m| m.cols())
        .ok_or_else(|| Error::invalid_arg("statistics stream is empty"))?;
    let mut acc = TokenWelford::new(d);
    for m in it {
        acc.push(m)?;
    }
    acc.finish()
}

/// Embeds clean source samples (frozen BatchNorm, fixed order) and collects
/// their statistics at the block-1 input.
pub fn collect_source_stats(
    weights: &ModelWeights,
    samples: &[TokenizedSample],
    origin: StatsOrigin,
    batch_size: usize,
) -> Result<SourceStats> {
    if samples.is_empty() {
        return Err(Error::invalid_arg("statistics stream is empty"));
    }
    let d = weights.config.d;
    let mut a = SampleWelford::new(d);
    let mut b = TokenWelford::new(d);
    for chunk in samples.chunks(batch_size.max(1)) {
        for emb in embed_tokens(chunk, weights, BnMode::Frozen)? {
            match origin {
                StatsOrigin::EmbeddingOutput => a.push(&emb)?,
                StatsOrigin::FirstLnInput => b.push(&emb)?,
            }
        }
    }
    match origin {
        StatsOrigin::EmbeddingOutput => a.finish(),
        StatsOrigin::FirstLnInput => b.finish(),
    }
}

/// `sqrt(sum_j (x_j - mu_j)^2 / max(sigma_j, floor)^2)` for every token row.
pub fn mahalanobis_divergence(tokens: &Matrix, stats: &SourceStats) -> Result<Vec<f64>> {
    if tokens.cols() != stats.mu.len() || stats.sigma.len() != stats.mu.len() {
        return Err(Error::ShapeMismatch {
            field: "d".into(),
            expected: stats.mu.len().to_string(),
            found: tokens.cols().to_string(),
        });
    }
    let inv_var: Vec<f64> = stats
        .sigma
        .iter()
        .map(|s| {
            let s = s.max(SIGMA_FLOOR);
            1.0 / (s * s)
        })
        .collect();
    Ok(tokens
        .row_iter()
        .map(|r| {
            r.iter()
                .zip(&stats.mu)
                .zip(&inv_var)
                .map(|((x, m), iv)| (x - m) * (x - m) * iv)
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// `G = LN1(cls) W_Q` of the first block.
pub fn cls_prototype(weights: &ModelWeights) -> Vec<f64> {
    let b = &weights.blocks[0];
    let y = layer_norm(&weights.cls_token, &b.ln1.gamma, &b.ln1.beta, weights.config.ln_eps);
    vec_matmul(&y, &b.wq)
}

/// `-cos(LN1(x_t) W_K, G)` per token. Tokens whose key is exactly zero score 0.
pub fn cosine_divergence(
    tokens: &Matrix,
    g: &[f64],
    block: &BlockWeights,
    ln_eps: f64,
) -> Result<Vec<f64>> {
    let g_norm = norm(g);
    if !(g_norm > 0.0) || !g_norm.is_finite() {
        return Err(Error::invalid_arg("CLS prototype has zero or non-finite norm"));
    }
    if tokens.cols() != g.len() {
        return Err(Error::ShapeMismatch {
            field: "d".into(),
            expected: g.len().to_string(),
            found: tokens.cols().to_string(),
        });
    }
    Ok(tokens
        .row_iter()
        .enumerate()
        .map(|(t, r)| {
            let key = vec_matmul(&layer_norm(r, &block.ln1.gamma, &block.ln1.beta, ln_eps), &block.wk);
            let k_norm = norm(&key);
            if k_norm == 0.0 {
                log::debug!("token {t} has a zero-norm key; divergence set to 0");
                0.0
            } else {
                -dot(&key, g) / (k_norm * g_norm)
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurgePlan {
    pub keep: Vec<usize>,
    pub removed: Vec<usize>,
}

/// Removes the `l_pg` largest divergences; ties go to the lower token index.
/// Both index lists come back sorted.
pub fn purge_tokens(delta: &[f64], l_pg: usize) -> Result<PurgePlan> {
    if l_pg >= delta.len() {
        return Err(Error::invalid_arg(format!(
            "purge size {l_pg} must be smaller than the token count {}",
            delta.len()
        )));
    }
    if let Some(i) = delta.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid_arg(format!("divergence of token {i} is not finite")));
    }
    let mut order: Vec<usize> = (0..delta.len()).collect();
    order.sort_by(|&a, &b| delta[b].total_cmp(&delta[a]).then(a.cmp(&b)));
    let mut removed = order[..l_pg].to_vec();
    removed.sort_unstable();
    let mut keep = order[l_pg..].to_vec();
    keep.sort_unstable();
    Ok(PurgePlan { keep, removed })
}

/// First-block pieces PG-SF needs; independent of any test data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsPrototype {
    pub g: Vec<f64>,
    ln1: LayerNormParams,
    wk: Matrix,
    ln_eps: f64,
}

impl ClsPrototype {
    pub fn from_weights(weights: &ModelWeights) -> Self {
        let b = &weights.blocks[0];
        Self {
            g: cls_prototype(weights),
            ln1: b.ln1.clone(),
            wk: b.wk.clone(),
            ln_eps: weights.config.ln_eps,
        }
    }

    pub fn divergence(&self, tokens: &Matrix) -> Result<Vec<f64>> {
        let g_norm = norm(&self.g);
        if !(g_norm > 0.0) {
            return Err(Error::invalid_arg("CLS prototype has zero norm"));
        }
        let y = Matrix::from_rows(
            &tokens
                .row_iter()
                .map(|r| layer_norm(r, &self.ln1.gamma, &self.ln1.beta, self.ln_eps))
                .collect::<Vec<_>>(),
        );
        let keys = y.matmul(&self.wk);
        Ok(keys
            .row_iter()
            .map(|k| {
                let kn = norm(k);
                if kn == 0.0 {
                    0.0
                } else {
                    -dot(k, &self.g) / (kn * g_norm)
                }
            })
            .collect())
    }
}

/// The reference a purge variant scores tokens against.
#[derive(Debug, Clone)]
pub enum SourcePrototype {
    Stats(SourceStats),
    Cls(ClsPrototype),
}

impl SourcePrototype {
    pub fn divergence(&self, tokens: &Matrix) -> Result<Vec<f64>> {
        match self {
            SourcePrototype::Stats(s) => mahalanobis_divergence(tokens, s),
            SourcePrototype::Cls(c) => c.divergence(tokens),
        }
    }
}

/// Purge hook that removes a fixed number of tokens from every sample, using
/// divergences that were computed ahead of time (one vector per sample).
pub struct FixedPurge<'a> {
    pub divergences: &'a [Vec<f64>],
    pub l_pg: usize,
}

impl PurgeHook for FixedPurge<'_> {
    fn keep_indices(&self, sample: usize, tokens: &Matrix) -> Result<Vec<usize>> {
        let delta = self
            .divergences
            .get(sample)
            .ok_or_else(|| Error::InvalidState(format!("no divergences for sample {sample}")))?;
        if delta.len() != tokens.rows() {
            return Err(Error::InvalidState(format!(
                "sample {sample}: {} divergences for {} tokens",
                delta.len(),
                tokens.rows()
            )));
        }
        Ok(purge_tokens(delta, self.l_pg)?.keep)
    }
}

/// Purge hook that scores tokens on the fly.
pub struct PrototypePurge<'a> {
    pub prototype: &'a SourcePrototype,
    pub l_pg: usize,
}

impl PurgeHook for PrototypePurge<'_> {
    fn keep_indices(&self, _sample: usize, tokens: &Matrix) -> Result<Vec<usize>> {
        let delta = self.prototype.divergence(tokens)?;
        Ok(purge_tokens(&delta, self.l_pg)?.keep)
    }
}

const MU: &str = "pg.mu_S";
const SIGMA: &str = "pg.sigma_S";
const N: &str = "pg.n";
const ORIGIN: &str = "pg.origin";

/// Adds (or replaces) the statistics tensors in a container.
pub fn attach_stats(container: &mut Container, stats: &SourceStats) {
    container.tensors.retain(|(n, _, _)| !n.starts_with("pg."));
    let d = stats.mu.len();
    container
        .tensors
        .push((MU.into(), vec![d], stats.mu.iter().map(|&v| v as f32).collect()));
    container
        .tensors
        .push((SIGMA.into(), vec![d], stats.sigma.iter().map(|&v| v as f32).collect()));
    container
        .tensors
        .push((N.into(), vec![1], vec![stats.n_samples as f32]));
    container
        .tensors
        .push((ORIGIN.into(), vec![1], vec![stats.origin.code()]));
}

pub fn stats_from_container(c: &Container) -> Result<SourceStats> {
    let get = |name: &str| {
        c.get(name)
            .ok_or_else(|| Error::format(format!("missing tensor `{name}`")))
    };
    let (mu_shape, mu) = get(MU)?;
    let (sigma_shape, sigma) = get(SIGMA)?;
    if mu_shape != [c.config.d] || sigma_shape != [c.config.d] {
        return Err(Error::ShapeMismatch {
            field: "d".into(),
            expected: c.config.d.to_string(),
            found: format!("{mu_shape:?} / {sigma_shape:?}"),
        });
    }
    let (_, n) = get(N)?;
    let n = *n.first().ok_or_else(|| Error::format("empty pg.n"))?;
    let origin = match c.get(ORIGIN).map(|(_, v)| v.first().copied()) {
        None | Some(Some(0.0)) => StatsOrigin::EmbeddingOutput,
        Some(Some(1.0)) => StatsOrigin::FirstLnInput,
        Some(other) => return Err(Error::format(format!("bad pg.origin {other:?}"))),
    };
    if !(n >= 1.0) || sigma.iter().any(|s| !(*s >= 0.0)) || mu.iter().any(|m| !m.is_finite()) {
        return Err(Error::format("invalid source statistics"));
    }
    Ok(SourceStats {
        mu: mu.iter().map(|&v| v as f64).collect(),
        sigma: sigma.iter().map(|&v| v as f64).collect(),
        n_samples: n as u64,
        origin,
    })
}

/// Writes the weights together with their source statistics.
pub fn save_stats(path: &Path, weights: &ModelWeights, stats: &SourceStats) -> Result<()> {
    let mut c = weights.to_container();
    attach_stats(&mut c, stats);
    crate::model::write_container(path, &c)
}

pub fn load_stats(path: &Path) -> Result<SourceStats> {
    stats_from_container(&read_container(path)?)
}
