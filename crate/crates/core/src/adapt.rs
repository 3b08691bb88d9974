//! Test-time adaptation: one forward per purge-size candidate, then per-sample
//! selection of the candidate whose prediction has the lowest entropy.
//!
//! Nothing here writes to the weights. BatchNorm reset is realised as
//! per-call batch statistics, so every arm is a pure function of its inputs.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::corruptions::{CorruptionKind, CorruptionSpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{embed_tokens, forward_embedded, reset_batchnorm, BnMode, Logits, ModelConfig, ModelWeights};
use crate::purge::{FixedPurge, SourcePrototype};
use crate::tokenizer::{tokenize, TokenizedSample};

/// Shannon entropy (nats) of the softmax of `logits`.
pub fn entropy(logits: &Logits) -> f64 {
    let z = logits.as_slice();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
    let log_sum = sum.ln();
    // H = log Z - sum p_i (z_i - m)
    let h: f64 = z
        .iter()
        .map(|v| {
            let p = (v - m).exp() / sum;
            if p > 0.0 {
                -p * ((v - m) - log_sum)
            } else {
                0.0
            }
        })
        .sum();
    h.max(0.0)
}

/// Picks the candidate with the lowest entropy; ties go to the smaller purge size.
pub fn select_purge_size(per_candidate: &[(usize, Logits)]) -> Result<(usize, Logits)> {
    let mut best: Option<(usize, f64, &Logits)> = None;
    for (l, logits) in per_candidate {
        let h = entropy(logits);
        let better = match best {
            None => true,
            Some((bl, bh, _)) => h < bh || (h == bh && *l < bl),
        };
        if better {
            best = Some((*l, h, logits));
        }
    }
    best.map(|(l, _, z)| (l, z.clone()))
        .ok_or_else(|| Error::invalid_arg("no purge-size candidates"))
}

/// Sorted, distinct purge sizes, always including 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurgeCandidateSet(Vec<usize>);

impl PurgeCandidateSet {
    pub fn new(mut candidates: Vec<usize>, num_tokens: usize) -> Result<Self> {
        candidates.sort_unstable();
        if candidates.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid_arg("purge-size candidates must be distinct"));
        }
        if candidates.first() != Some(&0) {
            return Err(Error::invalid_arg("purge-size candidates must include 0"));
        }
        if let Some(&c) = candidates.iter().find(|&&c| c >= num_tokens) {
            return Err(Error::invalid_arg(format!(
                "purge size {c} must be smaller than the token count {num_tokens}"
            )));
        }
        Ok(Self(candidates))
    }

    /// `{0, 2, 4, 8, 16, 32}` restricted to sizes below `num_tokens`.
    pub fn default_for(num_tokens: usize) -> Self {
        Self(
            [0, 2, 4, 8, 16, 32]
                .into_iter()
                .filter(|&c| c < num_tokens)
                .collect(),
        )
    }

    pub fn only_zero() -> Self {
        Self(vec![0])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Parses `"0,2,4"`.
    pub fn parse(s: &str, num_tokens: usize) -> Result<Self> {
        let c = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid_arg(format!("bad purge size `{p}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(c, num_tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Ord, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SourceOnly,
    PgSp,
    PgSf,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::PgSp => "pg_sp",
            Variant::PgSf => "pg_sf",
        }
    }

    /// BatchNorm mode used when none is given explicitly.
    pub fn default_bn_mode(self) -> BnMode {
        match self {
            Variant::SourceOnly => BnMode::Frozen,
            Variant::PgSp | Variant::PgSf => BnMode::PerBatchReset,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "source_only" | "source-only" => Ok(Variant::SourceOnly),
            "sp" | "pg_sp" | "pg-sp" => Ok(Variant::PgSp),
            "sf" | "pg_sf" | "pg-sf" => Ok(Variant::PgSf),
            _ => Err(Error::invalid_arg(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    PerSample,
    /// One purge size for the whole batch, by mean entropy.
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaOptions {
    pub variant: Variant,
    pub candidates: PurgeCandidateSet,
    pub batch_size: usize,
    pub bn_mode: BnMode,
    pub selection: SelectionMode,
    pub concurrent_arms: bool,
    /// Only used to label the report; the stream must already be corrupted.
    pub corruption: CorruptionSpec,
}

impl TtaOptions {
    pub fn new(variant: Variant, candidates: PurgeCandidateSet) -> Self {
        Self {
            variant,
            candidates,
            batch_size: 32,
            bn_mode: variant.default_bn_mode(),
            selection: SelectionMode::PerSample,
            concurrent_arms: false,
            corruption: CorruptionSpec::none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaRecord {
    pub sample_id: usize,
    pub label: Option<usize>,
    /// Entropy per candidate, in candidate order.
    pub entropies: Vec<f64>,
    /// Predicted class per candidate, in candidate order.
    pub predictions: Vec<usize>,
    pub selected: usize,
    pub selected_prediction: usize,
}

impl TtaRecord {
    pub fn correct(&self) -> Option<bool> {
        self.label.map(|y| y == self.selected_prediction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaReport {
    pub variant: Variant,
    pub corruption: CorruptionKind,
    pub severity: u8,
    pub bn_mode: BnMode,
    pub candidates: Vec<usize>,
    pub records: Vec<TtaRecord>,
    pub weights_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaSummary {
    pub variant: Variant,
    pub corruption: CorruptionKind,
    pub severity: u8,
    pub bn_mode: BnMode,
    pub samples: usize,
    pub accuracy: f64,
    pub candidates: Vec<usize>,
    pub candidate_accuracy: Vec<f64>,
    pub candidate_mean_entropy: Vec<f64>,
    pub oracle_accuracy: f64,
    pub mean_selected: f64,
    pub weights_checksum: String,
}

impl TtaReport {
    fn labeled(&self) -> impl Iterator<Item = &TtaRecord> {
        self.records.iter().filter(|r| r.label.is_some())
    }

    /// Fraction of labeled samples whose selected prediction is correct.
    pub fn accuracy(&self) -> f64 {
        let n = self.labeled().count();
        if n == 0 {
            return f64::NAN;
        }
        self.labeled().filter(|r| r.correct() == Some(true)).count() as f64 / n as f64
    }

    fn position(&self, l: usize) -> Result<usize> {
        self.candidates
            .iter()
            .position(|&c| c == l)
            .ok_or_else(|| Error::invalid_arg(format!("{l} is not a candidate")))
    }

    /// Accuracy if every sample had used purge size `l`.
    pub fn candidate_accuracy(&self, l: usize) -> Result<f64> {
        let i = self.position(l)?;
        let n = self.labeled().count();
        Ok(self
            .labeled()
            .filter(|r| Some(r.predictions[i]) == r.label)
            .count() as f64
            / n as f64)
    }

    pub fn candidate_mean_entropy(&self, l: usize) -> Result<f64> {
        let i = self.position(l)?;
        Ok(self.records.iter().map(|r| r.entropies[i]).sum::<f64>() / self.records.len() as f64)
    }

    /// Best single fixed purge size in hindsight.
    pub fn oracle_accuracy(&self) -> f64 {
        self.candidates
            .iter()
            .filter_map(|&l| self.candidate_accuracy(l).ok())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn summary(&self) -> TtaSummary {
        TtaSummary {
            variant: self.variant,
            corruption: self.corruption,
            severity: self.severity,
            bn_mode: self.bn_mode,
            samples: self.records.len(),
            accuracy: self.accuracy(),
            candidates: self.candidates.clone(),
            candidate_accuracy: self
                .candidates
                .iter()
                .map(|&l| self.candidate_accuracy(l).unwrap_or(f64::NAN))
                .collect(),
            candidate_mean_entropy: self
                .candidates
                .iter()
                .map(|&l| self.candidate_mean_entropy(l).unwrap_or(f64::NAN))
                .collect(),
            oracle_accuracy: self.oracle_accuracy(),
            mean_selected: self.records.iter().map(|r| r.selected as f64).sum::<f64>()
                / self.records.len().max(1) as f64,
            weights_checksum: self.weights_checksum.clone(),
        }
    }

    pub const CSV_HEADER: &'static str =
        "sample_id,label,variant,corruption,severity,candidate,entropy,pred,selected,correct";

    /// One row per (sample, candidate), preceded by a `# config_hash=` line.
    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut out = String::new();
        writeln!(out, "# config_hash={config_hash}").unwrap();
        writeln!(out, "{}", Self::CSV_HEADER).unwrap();
        let severity = if self.corruption == CorruptionKind::None { 0 } else { self.severity };
        for r in &self.records {
            let label = r.label.map(|l| l.to_string()).unwrap_or_default();
            for (i, &c) in self.candidates.iter().enumerate() {
                let correct = r
                    .label
                    .map(|y| ((y == r.predictions[i]) as u8).to_string())
                    .unwrap_or_default();
                writeln!(
                    out,
                    "{},{},{},{},{},{},{:.9},{},{},{}",
                    r.sample_id,
                    label,
                    self.variant,
                    self.corruption,
                    severity,
                    c,
                    r.entropies[i],
                    r.predictions[i],
                    (c == r.selected) as u8,
                    correct
                )
                .unwrap();
            }
        }
        out
    }
}

/// Splits `n` samples into batches of `size`; a trailing batch of one sample
/// is merged into the batch before it.
pub fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let size = size.max(1);
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(size)
        .map(|s| s..(s + size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

/// Tokenizes (seed index 0) and evaluates a corrupted stream.
pub fn tta_evaluate(
    weights: &ModelWeights,
    prototype: Option<&SourcePrototype>,
    dataset: &[PointCloud],
    options: &TtaOptions,
) -> Result<TtaReport> {
    let samples = tokenize_stream(dataset, &weights.config)?;
    tta_evaluate_tokenized(weights, prototype, &samples, options)
}

/// Tokenizes every cloud with FPS seeded at point 0.
pub fn tokenize_stream(dataset: &[PointCloud], config: &ModelConfig) -> Result<Vec<TokenizedSample>> {
    dataset
        .par_iter()
        .map(|c| tokenize(c, config.num_tokens, config.k, 0))
        .collect()
}

pub fn tta_evaluate_tokenized(
    weights: &ModelWeights,
    prototype: Option<&SourcePrototype>,
    samples: &[TokenizedSample],
    options: &TtaOptions,
) -> Result<TtaReport> {
    options.corruption.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid_arg("empty evaluation stream"));
    }
    let candidates: Vec<usize> = match options.variant {
        Variant::SourceOnly => vec![0],
        _ => options.candidates.as_slice().to_vec(),
    };
    PurgeCandidateSet::new(candidates.clone(), weights.config.num_tokens)?;
    let prototype = match options.variant {
        Variant::SourceOnly => None,
        v => {
            let p = prototype.ok_or_else(|| {
                Error::invalid_arg(format!("variant {v} needs source statistics or a prototype"))
            })?;
            match (v, p) {
                (Variant::PgSp, SourcePrototype::Stats(_)) | (Variant::PgSf, SourcePrototype::Cls(_)) => {}
                _ => {
                    return Err(Error::invalid_arg(format!(
                        "variant {v} does not match the supplied prototype"
                    )))
                }
            }
            Some(p)
        }
    };
    let ranges = batch_ranges(samples.len(), options.batch_size);
    for r in &ranges {
        reset_batchnorm(r.len(), options.bn_mode)?;
    }
    let checksum = weights.checksum();

    let mut records = Vec::with_capacity(samples.len());
    for range in ranges {
        let batch = &samples[range.clone()];
        let emb = embed_tokens(batch, weights, options.bn_mode)?;
        let divergences: Option<Vec<Vec<f64>>> = match prototype {
            Some(p) if candidates.iter().any(|&c| c > 0) => Some(
                emb.par_iter()
                    .map(|e| p.divergence(e))
                    .collect::<Result<_>>()?,
            ),
            _ => None,
        };
        let run_arm = |l: usize| -> Result<Vec<Logits>> {
            run_candidate(&emb, weights, divergences.as_deref(), l)
        };
        let arms: Vec<Vec<Logits>> = if options.concurrent_arms {
            candidates.par_iter().map(|&l| run_arm(l)).collect::<Result<_>>()?
        } else {
            candidates.iter().map(|&l| run_arm(l)).collect::<Result<_>>()?
        };
        if arms.iter().flatten().any(|z| !z.is_finite()) {
            return Err(Error::InvalidState("non-finite logits during evaluation".into()));
        }

        let entropies: Vec<Vec<f64>> = (0..batch.len())
            .map(|s| arms.iter().map(|a| entropy(&a[s])).collect())
            .collect();
        let batch_choice = match options.selection {
            SelectionMode::PerSample => None,
            SelectionMode::PerBatch => {
                // candidates are ascending, so a strict comparison keeps the smaller size on ties
                let mean = |i: usize| entropies.iter().map(|e| e[i]).sum::<f64>() / batch.len() as f64;
                let mut best = 0;
                for i in 1..candidates.len() {
                    if mean(i) < mean(best) {
                        best = i;
                    }
                }
                Some(best)
            }
        };
        for (s, sample_entropies) in entropies.into_iter().enumerate() {
            let pick = match batch_choice {
                Some(i) => i,
                None => {
                    let per: Vec<(usize, Logits)> = candidates
                        .iter()
                        .zip(&arms)
                        .map(|(&l, a)| (l, a[s].clone()))
                        .collect();
                    let (l, _) = select_purge_size(&per)?;
                    candidates.iter().position(|&c| c == l).unwrap()
                }
            };
            let predictions: Vec<usize> = arms.iter().map(|a| a[s].argmax()).collect();
            records.push(TtaRecord {
                sample_id: range.start + s,
                label: batch[s].label,
                entropies: sample_entropies,
                selected: candidates[pick],
                selected_prediction: predictions[pick],
                predictions,
            });
        }
    }

    debug_assert_eq!(checksum, weights.checksum());
    Ok(TtaReport {
        variant: options.variant,
        corruption: options.corruption.kind,
        severity: options.corruption.severity,
        bn_mode: options.bn_mode,
        candidates,
        records,
        weights_checksum: checksum,
    })
}

fn run_candidate(
    emb: &[Matrix],
    weights: &ModelWeights,
    divergences: Option<&[Vec<f64>]>,
    l_pg: usize,
) -> Result<Vec<Logits>> {
    match (l_pg, divergences) {
        (0, _) => forward_embedded(emb, weights, None),
        (_, Some(d)) => forward_embedded(emb, weights, Some(&FixedPurge { divergences: d, l_pg })),
        (_, None) => Err(Error::InvalidState("purge requested without divergences".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        assert!((entropy(&Logits(vec![0.0; 4])) - 4f64.ln()).abs() < 1e-12);
        assert!(entropy(&Logits(vec![1000.0, 0.0, 0.0, 0.0])) < 1e-12);
        let h = entropy(&Logits(vec![3f64.ln(), 0.0]));
        let expect = 0.75 * (4.0f64 / 3.0).ln() + 0.25 * 4f64.ln();
        assert!((h - expect).abs() < 1e-12, "{h} vs {expect}");
        assert!((expect - 0.5623).abs() < 1e-4);
        assert!(entropy(&Logits(vec![-1e308, 1e308])) >= 0.0);
    }

    #[test]
    fn selection_examples() {
        let z0 = Logits(vec![0.0; 4]);
        assert_eq!(select_purge_size(&[(0, z0.clone())]).unwrap().0, 0);
        let sharp = Logits(vec![20.0, 0.0, 0.0, 0.0]);
        let picked = select_purge_size(&[(0, z0.clone()), (4, sharp.clone()), (8, z0.clone())]).unwrap();
        assert_eq!(picked, (4, sharp));
        assert!(select_purge_size(&[]).is_err());
    }

    #[test]
    fn selection_ties_prefer_less_purging() {
        // build logits with entropies 0.9, 0.4, 0.4 by bisection on a two-class gap
        fn logits_with_entropy(target: f64) -> Logits {
            let (mut lo, mut hi) = (0.0, 50.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if entropy(&Logits(vec![mid, 0.0, 0.0])) > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Logits(vec![hi, 0.0, 0.0])
        }
        let a = logits_with_entropy(0.9);
        let b = logits_with_entropy(0.4);
        assert!((entropy(&a) - 0.9).abs() < 1e-9 && (entropy(&b) - 0.4).abs() < 1e-9);
        let map = vec![(16, b.clone()), (0, a), (8, b)];
        assert_eq!(select_purge_size(&map).unwrap().0, 8);
    }

    #[test]
    fn candidate_sets_are_validated() {
        assert!(PurgeCandidateSet::new(vec![0, 2, 4, 8, 16], 32).is_ok());
        assert!(PurgeCandidateSet::new(vec![2, 4], 32).is_err());
        assert!(PurgeCandidateSet::new(vec![0, 2, 2], 32).is_err());
        assert!(PurgeCandidateSet::new(vec![0, 32], 32).is_err());
        assert_eq!(PurgeCandidateSet::default_for(32).as_slice(), &[0, 2, 4, 8, 16]);
        assert_eq!(PurgeCandidateSet::parse("8, 0,2", 16).unwrap().as_slice(), &[0, 2, 8]);
        assert!(PurgeCandidateSet::parse("0,x", 16).is_err());
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        assert_eq!(batch_ranges(65, 32), vec![0..32, 32..65]);
        assert_eq!(batch_ranges(64, 32), vec![0..32, 32..64]);
        assert_eq!(batch_ranges(1, 32), vec![0..1]);
        assert_eq!(batch_ranges(34, 32), vec![0..32, 32..34]);
    }

    #[test]
    fn variant_names_parse() {
        for v in [Variant::SourceOnly, Variant::PgSp, Variant::PgSf] {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("sp".parse::<Variant>().unwrap(), Variant::PgSp);
        assert_eq!("none".parse::<Variant>().unwrap(), Variant::SourceOnly);
    }
}
