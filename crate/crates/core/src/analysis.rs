//! Empirical checks of the attention-under-shift propositions, and the
//! fixed-purge-size sweep.
//!
//! Every function here is a pure function of its inputs and seed. Replicates
//! run in parallel but are reduced in index order, so tables are
//! byte-reproducible.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{tta_evaluate_tokenized, PurgeCandidateSet, SelectionMode, TtaOptions, Variant};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::model::{attention_forward, embed_tokens, layer_norm, BnMode, ModelWeights};
use crate::purge::SourcePrototype;
use crate::seed;
use crate::tokenizer::TokenizedSample;

/// Smallest replicate count a reported statistic may rest on.
pub const MIN_REPLICATES: usize = 30;

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub x: f64,
    pub replicates: usize,
    pub mean: f64,
    pub variance: f64,
    pub max: f64,
    /// Values for `SweepResult::extra_columns`, in order.
    pub extra: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub analysis: String,
    /// Name of the independent variable (`x` column).
    pub variable: String,
    /// What `mean`/`variance`/`max` summarize.
    pub statistic: String,
    pub extra_columns: Vec<String>,
    pub rows: Vec<SweepRow>,
    pub seed: u64,
}

impl SweepResult {
    fn new(analysis: &str, variable: &str, statistic: &str, extra: &[&str], seed: u64) -> Self {
        Self {
            analysis: analysis.into(),
            variable: variable.into(),
            statistic: statistic.into(),
            extra_columns: extra.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            seed,
        }
    }

    /// Values of a named column: `x`, `replicates`, `mean`, `variance`, `max`
    /// or one of the extra columns.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let pick: Box<dyn Fn(&SweepRow) -> f64> = match name {
            "x" => Box::new(|r| r.x),
            "replicates" => Box::new(|r| r.replicates as f64),
            "mean" => Box::new(|r| r.mean),
            "variance" => Box::new(|r| r.variance),
            "max" => Box::new(|r| r.max),
            _ => {
                let i = self.extra_columns.iter().position(|c| c == name)?;
                Box::new(move |r| r.extra[i])
            }
        };
        Some(self.rows.iter().map(pick).collect())
    }

    /// CSV with a leading `#` metadata line. Floats use Rust's shortest
    /// round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# analysis={} statistic={} seed={}",
            self.analysis, self.statistic, self.seed
        );
        let mut header = vec![self.variable.clone(), "replicates".into(), "mean".into(), "variance".into(), "max".into()];
        header.extend(self.extra_columns.iter().cloned());
        let _ = writeln!(out, "{}", header.join(","));
        for r in &self.rows {
            let mut cells = vec![r.x.to_string(), r.replicates.to_string(), r.mean.to_string(), r.variance.to_string(), r.max.to_string()];
            cells.extend(r.extra.iter().map(|v| v.to_string()));
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

/// Mean, unbiased variance and maximum.
pub fn summarize(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, var, max)
}

fn gaussian_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn population_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

const PAIRS_PER_CHUNK: usize = 1024;

/// Upper bound on the Lipschitz constant of LayerNorm over inputs whose
/// per-vector standard deviation is at least `sigma_min`.
///
/// Centering is a projection, and `c ↦ c/√(|c|²/d + ε)` has tangential gain
/// at most `1/√(σ²+ε)` and radial gain at most `ε/(σ²+ε)^{3/2}`, giving
/// `max|γ| (1 + ε/(σ²_min+ε)) / √(σ²_min+ε)`.
pub fn ln_lipschitz_bound(gamma: &[f64], sigma_min: f64, eps: f64) -> f64 {
    let g = gamma.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let s2 = sigma_min * sigma_min + eps;
    g * (1.0 + eps / s2) / s2.sqrt()
}

/// Samples pairs from `{x : std(x) ≥ sigma_min, |x| ≤ R}` and compares the
/// LayerNorm difference ratio with [`ln_lipschitz_bound`].
///
/// Half the pairs are small perturbations of a point near the `std = sigma_min`
/// boundary (where the bound is nearly tight), the rest are independent draws.
/// One row; extra columns are `bound`, `violations`, `max_norm`.
pub fn check_ln_lipschitz(
    d: usize,
    n_pairs: usize,
    sigma_min: f64,
    gamma: &[f64],
    eps: f64,
    seed_value: u64,
) -> Result<SweepResult> {
    if !(sigma_min > 0.0) {
        return Err(Error::invalid_arg("sigma_min must be positive"));
    }
    if d < 2 || gamma.len() != d {
        return Err(Error::invalid_arg(format!(
            "need d >= 2 and gamma of length d (d={d}, gamma {})",
            gamma.len()
        )));
    }
    if n_pairs < MIN_REPLICATES {
        return Err(Error::invalid_arg(format!("need at least {MIN_REPLICATES} pairs")));
    }
    let bound = ln_lipschitz_bound(gamma, sigma_min, eps);
    let beta = vec![0.0; d];
    let draw = |rng: &mut seed::Rng| -> Vec<f64> {
        loop {
            let mut z = gaussian_vec(rng, d);
            let s = population_std(&z);
            if s == 0.0 {
                continue;
            }
            let target = sigma_min * rng.random_range(1.0..3.0);
            let offset: f64 = rng.random_range(-1.0..1.0);
            let m = z.iter().sum::<f64>() / d as f64;
            for v in &mut z {
                *v = (*v - m) / s * target + offset;
            }
            return z;
        }
    };
    let chunks = n_pairs.div_ceil(PAIRS_PER_CHUNK);
    let per_chunk: Vec<(Vec<f64>, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seed::rng(seed::derive_indexed(seed_value, c as u64));
            let count = PAIRS_PER_CHUNK.min(n_pairs - c * PAIRS_PER_CHUNK);
            let mut ratios = Vec::with_capacity(count);
            let mut max_norm = 0.0f64;
            while ratios.len() < count {
                let u = draw(&mut rng);
                let v = if ratios.len() % 2 == 0 {
                    let dir = gaussian_vec(&mut rng, d);
                    let t = 10f64.powf(rng.random_range(-3.0..0.0)) * sigma_min / norm(&dir);
                    let v: Vec<f64> = u.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
                    if population_std(&v) < sigma_min {
                        continue;
                    }
                    v
                } else {
                    draw(&mut rng)
                };
                max_norm = max_norm.max(norm(&u)).max(norm(&v));
                ratios.push(ln_difference_ratio(&u, &v, gamma, &beta, eps));
            }
            (ratios, max_norm)
        })
        .collect();
    let max_norm = per_chunk.iter().fold(0.0f64, |m, c| m.max(c.1));
    let ratios: Vec<f64> = per_chunk.into_iter().flat_map(|c| c.0).collect();
    // relative slack for rounding in the two LayerNorm evaluations
    let violations = ratios.iter().filter(|&&r| r > bound * (1.0 + 1e-9)).count();
    let (mean, variance, max) = summarize(&ratios);
    let mut out = SweepResult::new(
        "lipschitz",
        "d",
        "ln_ratio",
        &["bound", "violations", "max_norm", "sigma_min"],
        seed_value,
    );
    out.rows.push(SweepRow {
        x: d as f64,
        replicates: ratios.len(),
        mean,
        variance,
        max,
        extra: vec![bound, violations as f64, max_norm, sigma_min],
    });
    Ok(out)
}

/// `|LN(u) − LN(v)| / |u − v|`, defined as 0 when `u == v`.
pub fn ln_difference_ratio(u: &[f64], v: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> f64 {
    let den = diff_norm(u, v);
    if den == 0.0 {
        return 0.0;
    }
    diff_norm(&layer_norm(u, gamma, beta, eps), &layer_norm(v, gamma, beta, eps)) / den
}

/// Uniform unit vector in `R^d` (Gaussian, then normalized).
pub fn random_unit_vector<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d);
        let n = norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Dot products of independent uniform unit vectors, one row per dimension.
///
/// `mean`/`variance`/`max` summarize `u·v`; extra columns are
/// `expected_variance` (= 1/d) and `self_dot`, a control where `v = u`.
pub fn check_sphere_orthogonality(d_list: &[usize], n_pairs: usize, seed_value: u64) -> Result<SweepResult> {
    if n_pairs < MIN_REPLICATES {
        return Err(Error::invalid_arg(format!("need at least {MIN_REPLICATES} pairs")));
    }
    let mut out = SweepResult::new(
        "sphere",
        "d",
        "dot",
        &["expected_variance", "self_dot"],
        seed_value,
    );
    for &d in d_list {
        if d < 2 {
            return Err(Error::invalid_arg(format!("dimension {d} < 2")));
        }
        let mut rng = seed::rng(seed::derive_indexed(seed_value, d as u64));
        let mut dots = Vec::with_capacity(n_pairs);
        let mut self_dot = f64::NAN;
        for i in 0..n_pairs {
            let u = random_unit_vector(&mut rng, d);
            let v = random_unit_vector(&mut rng, d);
            if i == 0 {
                self_dot = dot(&u, &u);
            }
            dots.push(dot(&u, &v));
        }
        let (mean, variance, max) = summarize(&dots);
        out.rows.push(SweepRow {
            x: d as f64,
            replicates: n_pairs,
            mean,
            variance,
            max,
            extra: vec![1.0 / d as f64, self_dot],
        });
    }
    Ok(out)
}

/// Mean over heads, samples and entries of `|A_ij − 1/n|` for the first
/// block, where `n` counts the CLS row.
fn first_block_deviation(embeddings: &[Matrix], weights: &ModelWeights) -> f64 {
    let block = &weights.blocks[0];
    let mut total = 0.0;
    let mut count = 0usize;
    for e in embeddings {
        let x = e.prepend_row(&weights.cls_token);
        let n = x.rows();
        let u = 1.0 / n as f64;
        for a in attention_forward(&x, block, &weights.config).attention {
            total += a.as_slice().iter().map(|v| (v - u).abs()).sum::<f64>();
            count += a.as_slice().len();
        }
    }
    total / count as f64
}

/// Adds i.i.d. Gaussian noise of each scale to the (frozen-BN) token
/// embeddings of `clean_batch` and measures how far block-1 attention is from
/// uniform.
///
/// One row per scale over `replicates` noise draws. Extra column
/// `relative_to_first` divides by the first row's mean.
pub fn check_attention_uniformity(
    weights: &ModelWeights,
    clean_batch: &[TokenizedSample],
    noise_scales: &[f64],
    replicates: usize,
    seed_value: u64,
) -> Result<SweepResult> {
    if replicates < MIN_REPLICATES {
        return Err(Error::invalid_arg(format!("need at least {MIN_REPLICATES} replicates")));
    }
    if clean_batch.is_empty() || noise_scales.is_empty() {
        return Err(Error::invalid_arg("empty batch or scale list"));
    }
    if noise_scales.windows(2).any(|w| !(w[0] < w[1])) || noise_scales[0] < 0.0 {
        return Err(Error::invalid_arg("noise scales must be non-negative and ascending"));
    }
    let clean = embed_tokens(clean_batch, weights, BnMode::Frozen)?;
    let mut out = SweepResult::new(
        "uniformity",
        "noise_scale",
        "attention_deviation",
        &["relative_to_first"],
        seed_value,
    );
    for (si, &scale) in noise_scales.iter().enumerate() {
        let scale_seed = seed::derive_indexed(seed_value, si as u64);
        let devs: Vec<f64> = (0..replicates)
            .into_par_iter()
            .map(|r| {
                let mut rng = seed::rng(seed::derive_indexed(scale_seed, r as u64));
                let noisy: Vec<Matrix> = clean
                    .iter()
                    .map(|e| {
                        let data = e
                            .as_slice()
                            .iter()
                            .map(|v| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                v + scale * z
                            })
                            .collect();
                        Matrix::from_vec(e.rows(), e.cols(), data)
                    })
                    .collect();
                first_block_deviation(&noisy, weights)
            })
            .collect();
        let (mean, variance, max) = summarize(&devs);
        out.rows.push(SweepRow {
            x: scale,
            replicates,
            mean,
            variance,
            max,
            extra: vec![f64::NAN],
        });
    }
    let first = out.rows[0].mean;
    for r in &mut out.rows {
        r.extra[0] = r.mean / first;
    }
    Ok(out)
}

/// Whether each value is at most the previous one times `1 + jitter`.
pub fn is_non_increasing(values: &[f64], jitter: f64) -> bool {
    values.windows(2).all(|w| w[1] <= w[0] * (1.0 + jitter))
}

/// Accuracy and mean entropy of every fixed purge size over a stream.
///
/// The stream must already be corrupted (see
/// [`crate::corruptions::corrupt_stream`]). `mean`/`variance`/`max` summarize
/// per-sample entropy; extra column `accuracy`.
pub fn purge_size_sweep(
    weights: &ModelWeights,
    prototype: &SourcePrototype,
    samples: &[TokenizedSample],
    l_range: &[usize],
    bn_mode: BnMode,
    batch_size: usize,
) -> Result<SweepResult> {
    if l_range.is_empty() {
        return Err(Error::invalid_arg("empty purge-size range"));
    }
    if samples.len() < MIN_REPLICATES {
        return Err(Error::invalid_arg(format!("need at least {MIN_REPLICATES} samples")));
    }
    if samples.iter().any(|s| s.label.is_none()) {
        return Err(Error::invalid_arg("sweep needs labelled samples"));
    }
    let mut cands: Vec<usize> = l_range.to_vec();
    cands.push(0);
    cands.sort_unstable();
    cands.dedup();
    let variant = match prototype {
        SourcePrototype::Stats(_) => Variant::PgSp,
        SourcePrototype::Cls(_) => Variant::PgSf,
    };
    let mut options = TtaOptions::new(variant, PurgeCandidateSet::new(cands.clone(), weights.config.num_tokens)?);
    options.bn_mode = bn_mode;
    options.batch_size = batch_size;
    options.selection = SelectionMode::PerSample;
    let report = tta_evaluate_tokenized(weights, Some(prototype), samples, &options)?;
    let mut out = SweepResult::new("sweep", "l_pg", "entropy", &["accuracy"], 0);
    for &l in l_range {
        let i = cands.iter().position(|&c| c == l).unwrap();
        let ent: Vec<f64> = report.records.iter().map(|r| r.entropies[i]).collect();
        let (mean, variance, max) = summarize(&ent);
        out.rows.push(SweepRow {
            x: l as f64,
            replicates: ent.len(),
            mean,
            variance,
            max,
            extra: vec![report.candidate_accuracy(l)?],
        });
    }
    Ok(out)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties). NaN when either side
/// is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs equal lengths");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}

/// Centered 3-point moving average; the end points average two values.
pub fn smooth3(values: &[f64]) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 2).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Up-then-down check on the 3-window smoothed profile: the peak is strictly
/// inside the range and the curve rises to it and falls after it, each step
/// allowed to move the wrong way by at most `tolerance`.
pub fn is_unimodal_up_down(values: &[f64], tolerance: f64) -> bool {
    let s = smooth3(values);
    if s.len() < 3 {
        return false;
    }
    let peak = (0..s.len()).fold(0, |best, i| if s[i] > s[best] { i } else { best });
    if peak == 0 || peak == s.len() - 1 || s[peak] <= s[0] {
        return false;
    }
    let rising = s[..=peak].windows(2).all(|w| w[1] >= w[0] - tolerance);
    let falling = s[peak..].windows(2).all(|w| w[1] <= w[0] + tolerance);
    rising && falling
}
