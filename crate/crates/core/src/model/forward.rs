use rayon::prelude::*;

use super::layers::{gelu, layer_norm_rows, LnCache};
use super::{reset_batchnorm, BlockWeights, BnMode, Logits, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::linalg::{softmax_in_place, Matrix};
use crate::tokenizer::TokenizedSample;

/// Chooses which tokens survive into the first attention layer.
///
/// Called once per sample with the block-1 LN input (token rows only; the CLS
/// row is never offered and never removed). Must return strictly increasing
/// indices into those rows.
pub trait PurgeHook: Sync {
    fn keep_indices(&self, sample: usize, tokens: &Matrix) -> Result<Vec<usize>>;
}

/// A hook that keeps every token.
pub struct KeepAll;

impl PurgeHook for KeepAll {
    fn keep_indices(&self, _sample: usize, tokens: &Matrix) -> Result<Vec<usize>> {
        Ok((0..tokens.rows()).collect())
    }
}

// ---------------------------------------------------------------------------
// Embedding

#[derive(Debug, Clone)]
pub(crate) struct EmbedSampleCache {
    pub neigh: Matrix,
    pub xhat: Matrix,
    pub bn_out: Matrix,
    pub act: Matrix,
    /// For each (token, channel): row of `act` that won the max-pool.
    pub argmax: Vec<usize>,
    pub centers: Matrix,
    pub pos_pre: Matrix,
    pub pos_act: Matrix,
}

#[derive(Debug, Clone)]
pub(crate) struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub rows: usize,
}

pub(crate) struct EmbedBatch {
    pub outputs: Vec<Matrix>,
    pub caches: Vec<EmbedSampleCache>,
    pub inv_std: Vec<f64>,
    pub stats: Option<BnBatchStats>,
}

fn check_sample(sample: &TokenizedSample, cfg: &ModelConfig) -> Result<()> {
    if sample.len() != cfg.num_tokens {
        return Err(Error::invalid_arg(format!(
            "sample has {} tokens, model expects {}",
            sample.len(),
            cfg.num_tokens
        )));
    }
    if let Some(t) = sample.tokens.iter().find(|t| t.neighborhood.len() != cfg.k) {
        return Err(Error::invalid_arg(format!(
            "token neighborhood has {} points, model expects {}",
            t.neighborhood.len(),
            cfg.k
        )));
    }
    Ok(())
}

pub(crate) fn embed_forward(
    batch: &[TokenizedSample],
    w: &ModelWeights,
    mode: BnMode,
) -> Result<EmbedBatch> {
    let cfg = &w.config;
    if batch.is_empty() {
        return Err(Error::invalid_arg("empty batch"));
    }
    reset_batchnorm(batch.len(), mode)?;
    for s in batch {
        check_sample(s, cfg)?;
    }
    let e = &w.embed;
    let hidden = cfg.embed_hidden;

    // fc1 over every neighborhood point
    let pre: Vec<(Matrix, Matrix)> = batch
        .par_iter()
        .map(|s| {
            let mut neigh = Matrix::zeros(cfg.num_tokens * cfg.k, 3);
            for (t, tok) in s.tokens.iter().enumerate() {
                for (j, p) in tok.neighborhood.iter().enumerate() {
                    neigh.row_mut(t * cfg.k + j).copy_from_slice(p);
                }
            }
            let h1 = e.fc1.forward(&neigh);
            (neigh, h1)
        })
        .collect();

    let (mean, var, stats) = match mode {
        BnMode::Frozen => (e.bn.running_mean.clone(), e.bn.running_var.clone(), None),
        BnMode::Training | BnMode::PerBatchReset => {
            let rows: usize = pre.iter().map(|(_, h)| h.rows()).sum();
            let mut mean = vec![0.0; hidden];
            for (_, h) in &pre {
                h.col_sums_into(&mut mean);
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; hidden];
            for (_, h) in &pre {
                for r in h.row_iter() {
                    for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                        *v += (x - m) * (x - m);
                    }
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            let stats = BnBatchStats {
                mean: mean.clone(),
                var: var.clone(),
                rows,
            };
            (mean, var, Some(stats))
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.bn_eps).sqrt()).collect();

    let results: Vec<(Matrix, EmbedSampleCache)> = batch
        .par_iter()
        .zip(pre.into_par_iter())
        .map(|(s, (neigh, h1))| {
            let mut xhat = h1;
            let mut bn_out = Matrix::zeros(xhat.rows(), hidden);
            for i in 0..xhat.rows() {
                let xr = xhat.row_mut(i);
                for c in 0..hidden {
                    xr[c] = (xr[c] - mean[c]) * inv_std[c];
                }
                let br = bn_out.row_mut(i);
                for c in 0..hidden {
                    br[c] = e.bn.gamma[c] * xr[c] + e.bn.beta[c];
                }
            }
            let act = bn_out.map(gelu);
            let h2 = e.fc2.forward(&act);

            let d = cfg.d;
            let mut out = Matrix::zeros(cfg.num_tokens, d);
            let mut argmax = vec![0; cfg.num_tokens * d];
            for t in 0..cfg.num_tokens {
                let o = out.row_mut(t);
                o.copy_from_slice(h2.row(t * cfg.k));
                let am = &mut argmax[t * d..(t + 1) * d];
                am.iter_mut().for_each(|a| *a = t * cfg.k);
                for j in 1..cfg.k {
                    let r = h2.row(t * cfg.k + j);
                    for c in 0..d {
                        if r[c] > o[c] {
                            o[c] = r[c];
                            am[c] = t * cfg.k + j;
                        }
                    }
                }
            }

            let centers = Matrix::from_rows(
                &s.tokens.iter().map(|t| t.center).collect::<Vec<_>>(),
            );
            let pos_pre = e.pos1.forward(&centers);
            let pos_act = pos_pre.map(gelu);
            let pos = e.pos2.forward(&pos_act);
            out.add_assign(&pos);

            let cache = EmbedSampleCache {
                neigh,
                xhat,
                bn_out,
                act,
                argmax,
                centers,
                pos_pre,
                pos_act,
            };
            (out, cache)
        })
        .collect();

    let (outputs, caches) = results.into_iter().unzip();
    Ok(EmbedBatch {
        outputs,
        caches,
        inv_std,
        stats,
    })
}

/// Token embeddings (`L_t × d` per sample) for a batch.
///
/// In `Training` and `PerBatchReset` modes the BatchNorm uses statistics of
/// this batch; `Frozen` uses the stored running statistics. Running statistics
/// are never modified here.
pub fn embed_tokens(
    batch: &[TokenizedSample],
    weights: &ModelWeights,
    mode: BnMode,
) -> Result<Vec<Matrix>> {
    Ok(embed_forward(batch, weights, mode)?.outputs)
}

// ---------------------------------------------------------------------------
// Transformer blocks

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    pub ln1: LnCache,
    pub y1: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub attn: Vec<Matrix>,
    pub o: Matrix,
    pub ln2: LnCache,
    pub y2: Matrix,
    pub f_pre: Matrix,
    pub f_act: Matrix,
}

/// Output of one transformer block plus its per-head attention.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub output: Matrix,
    /// Softmax attention per head, `(n × n)` with row 0 the CLS query.
    pub attention: Vec<Matrix>,
    /// Raw scores `Q·Kᵀ` per head (before the `1/sqrt(d)` scaling).
    pub scores: Vec<Matrix>,
}

pub(crate) fn block_forward(
    x: &Matrix,
    b: &BlockWeights,
    cfg: &ModelConfig,
) -> (Matrix, BlockCache, Vec<Matrix>) {
    let (y1, ln1) = layer_norm_rows(x, &b.ln1, cfg.ln_eps);
    let q = y1.matmul(&b.wq);
    let k = y1.matmul(&b.wk);
    let v = y1.matmul(&b.wv);
    let dh = cfg.head_dim();
    let scale = cfg.attention_scale();
    let n = x.rows();
    let mut o = Matrix::zeros(n, cfg.d);
    let mut attn = Vec::with_capacity(cfg.n_heads);
    let mut scores = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = q.col_block(h * dh, dh);
        let kh = k.col_block(h * dh, dh);
        let vh = v.col_block(h * dh, dh);
        let s = qh.matmul_t(&kh);
        let mut a = s.map(|v| v * scale);
        for i in 0..n {
            softmax_in_place(a.row_mut(i));
        }
        o.set_col_block(h * dh, &a.matmul(&vh));
        attn.push(a);
        scores.push(s);
    }
    let mut x_mid = b.wo.forward(&o);
    x_mid.add_assign(x);
    let (y2, ln2) = layer_norm_rows(&x_mid, &b.ln2, cfg.ln_eps);
    let f_pre = b.ff1.forward(&y2);
    let f_act = f_pre.map(gelu);
    let mut out = b.ff2.forward(&f_act);
    out.add_assign(&x_mid);
    let cache = BlockCache {
        ln1,
        y1,
        q,
        k,
        v,
        attn,
        o,
        ln2,
        y2,
        f_pre,
        f_act,
    };
    (out, cache, scores)
}

/// One pre-LN block: `x + MHA(LN1(x))`, then `+ FFN(LN2(·))`.
pub fn attention_forward(tokens_in: &Matrix, block: &BlockWeights, config: &ModelConfig) -> BlockOutput {
    let (output, cache, scores) = block_forward(tokens_in, block, config);
    BlockOutput {
        output,
        attention: cache.attn,
        scores,
    }
}

#[derive(Debug, Clone)]
pub(crate) struct HeadCache {
    pub ln: LnCache,
    pub y: Vec<f64>,
}

pub(crate) struct SampleCache {
    pub keep: Vec<usize>,
    pub blocks: Vec<BlockCache>,
    pub head: HeadCache,
}

fn validate_keep(keep: &[usize], n: usize) -> Result<()> {
    if keep.is_empty() {
        return Err(Error::InvalidState(
            "purge hook removed every token".into(),
        ));
    }
    if keep.windows(2).any(|w| w[0] >= w[1]) || keep.last().is_some_and(|&i| i >= n) {
        return Err(Error::InvalidState(format!(
            "purge hook returned invalid keep indices for {n} tokens"
        )));
    }
    Ok(())
}

pub(crate) fn sample_forward(
    embedding: &Matrix,
    w: &ModelWeights,
    keep: Option<Vec<usize>>,
) -> Result<(Logits, SampleCache)> {
    let cfg = &w.config;
    let keep = keep.unwrap_or_else(|| (0..embedding.rows()).collect());
    validate_keep(&keep, embedding.rows())?;
    let tokens = if keep.len() == embedding.rows() {
        embedding.clone()
    } else {
        embedding.select_rows(&keep)
    };
    let mut x = tokens.prepend_row(&w.cls_token);
    let mut blocks = Vec::with_capacity(w.blocks.len());
    for b in &w.blocks {
        let (next, cache, _) = block_forward(&x, b, cfg);
        blocks.push(cache);
        x = next;
    }
    let cls = Matrix::from_vec(1, cfg.d, x.row(0).to_vec());
    let (y, ln) = layer_norm_rows(&cls, &w.head.ln, cfg.ln_eps);
    let logits = w.head.fc.forward(&y);
    let logits = Logits(logits.into_vec());
    let head = HeadCache {
        ln,
        y: y.into_vec(),
    };
    Ok((logits, SampleCache { keep, blocks, head }))
}

fn keep_for(
    hook: Option<&dyn PurgeHook>,
    sample: usize,
    embedding: &Matrix,
) -> Result<Option<Vec<usize>>> {
    hook.map(|h| h.keep_indices(sample, embedding)).transpose()
}

/// Runs the transformer and head on precomputed token embeddings.
pub fn forward_embedded(
    embeddings: &[Matrix],
    weights: &ModelWeights,
    hook: Option<&dyn PurgeHook>,
) -> Result<Vec<Logits>> {
    embeddings
        .par_iter()
        .enumerate()
        .map(|(i, emb)| {
            let keep = keep_for(hook, i, emb)?;
            Ok(sample_forward(emb, weights, keep)?.0)
        })
        .collect()
}

/// Full forward pass: embed, optionally purge at the block-1 input, classify.
pub fn forward(
    batch: &[TokenizedSample],
    weights: &ModelWeights,
    bn_mode: BnMode,
    hook: Option<&dyn PurgeHook>,
) -> Result<Vec<Logits>> {
    let emb = embed_tokens(batch, weights, bn_mode)?;
    forward_embedded(&emb, weights, hook)
}

/// What a forward pass actually computed, for inspection.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Logits,
    pub kept: Vec<usize>,
    /// `attention[block][head]`, each `(kept + 1)²`.
    pub attention: Vec<Vec<Matrix>>,
}

pub fn forward_traced(
    batch: &[TokenizedSample],
    weights: &ModelWeights,
    bn_mode: BnMode,
    hook: Option<&dyn PurgeHook>,
) -> Result<Vec<ForwardTrace>> {
    let emb = embed_tokens(batch, weights, bn_mode)?;
    emb.iter()
        .enumerate()
        .map(|(i, e)| {
            let keep = keep_for(hook, i, e)?;
            let (logits, cache) = sample_forward(e, weights, keep)?;
            Ok(ForwardTrace {
                logits,
                kept: cache.keep,
                attention: cache.blocks.into_iter().map(|b| b.attn).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointCloud;
    use crate::seed;
    use crate::tokenizer::tokenize;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn small() -> ModelConfig {
        ModelConfig {
            d: 16,
            n_blocks: 2,
            n_heads: 4,
            num_tokens: 8,
            k: 4,
            n_classes: 4,
            ..ModelConfig::default()
        }
    }

    fn sample(cfg: &ModelConfig, seed_: u64) -> TokenizedSample {
        let mut rng = seed::rng(seed_);
        let pts = (0..48)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        tokenize(&PointCloud::new(pts, Some(0)).unwrap(), cfg.num_tokens, cfg.k, 0).unwrap()
    }

    struct Keep(Vec<usize>);

    impl PurgeHook for Keep {
        fn keep_indices(&self, _: usize, _: &Matrix) -> Result<Vec<usize>> {
            Ok(self.0.clone())
        }
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn identical_tokens_give_uniform_attention() {
        let cfg = small();
        let w = ModelWeights::init(&cfg, 1);
        let row: Vec<f64> = (0..cfg.d).map(|i| i as f64 * 0.1).collect();
        let x = Matrix::from_rows(&vec![row; cfg.num_tokens + 1]);
        let out = attention_forward(&x, &w.blocks[0], &cfg);
        for a in &out.attention {
            for v in a.as_slice() {
                assert!((v - 1.0 / 9.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_row_attention_is_one() {
        let cfg = small();
        let w = ModelWeights::init(&cfg, 1);
        let x = Matrix::from_vec(1, cfg.d, (0..cfg.d).map(|i| (i as f64).sin()).collect());
        let out = attention_forward(&x, &w.blocks[0], &cfg);
        for a in &out.attention {
            assert_eq!(a.as_slice(), &[1.0]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = small();
        let w = ModelWeights::init(&cfg, 2);
        let mut rng = seed::rng(3);
        let x = Matrix::from_vec(9, cfg.d, (0..9 * cfg.d).map(|_| rng.random_range(-5.0..5.0)).collect());
        for a in attention_forward(&x, &w.blocks[0], &cfg).attention {
            for r in a.row_iter() {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn large_noise_attention_stays_near_uniform() {
        let cfg = ModelConfig::default();
        let n = cfg.num_tokens + 1;
        let mut total = 0.0;
        for s in 0..100u64 {
            let w = ModelWeights::init(&cfg, s);
            let mut rng = seed::rng(1000 + s);
            let mut x = Matrix::from_vec(
                n,
                cfg.d,
                (0..n * cfg.d).map(|_| 100.0 * rng.sample::<f64, _>(StandardNormal)).collect(),
            );
            x.row_mut(0).copy_from_slice(&w.cls_token);
            let out = attention_forward(&x, &w.blocks[0], &cfg);
            let dev = out
                .attention
                .iter()
                .flat_map(|a| a.as_slice().iter())
                .map(|v| (v - 1.0 / n as f64).abs())
                .fold(0.0, f64::max);
            total += dev;
        }
        let mean = total / 100.0;
        assert!(mean < 5.0 / n as f64, "mean max deviation {mean}");
    }

    #[test]
    fn zero_weights_give_bias_only_embedding() {
        let cfg = small();
        let mut w = ModelWeights::zeros(&cfg);
        w.embed.bn.running_var.iter_mut().for_each(|v| *v = 1.0);
        w.embed.fc2.bias.iter_mut().enumerate().for_each(|(i, b)| *b = i as f64);
        w.embed.pos2.bias.iter_mut().for_each(|b| *b = 0.5);
        let mut s = sample(&cfg, 1);
        for t in &mut s.tokens {
            t.neighborhood.iter_mut().for_each(|p| *p = [0.0; 3]);
        }
        let emb = embed_tokens(&[s], &w, BnMode::Frozen).unwrap();
        for r in emb[0].row_iter() {
            let expect: Vec<f64> = (0..cfg.d).map(|i| i as f64 + 0.5).collect();
            assert_eq!(r, expect.as_slice());
        }
    }

    #[test]
    fn embedding_ignores_neighbor_order() {
        let cfg = small();
        let mut w = ModelWeights::init(&cfg, 4);
        w.embed.bn.running_var.iter_mut().for_each(|v| *v = 2.0);
        let s = sample(&cfg, 2);
        let mut p = s.clone();
        p.tokens[3].neighborhood.reverse();
        p.tokens[3].neighborhood.swap(0, 2);
        let a = embed_tokens(&[s], &w, BnMode::Frozen).unwrap();
        let b = embed_tokens(&[p], &w, BnMode::Frozen).unwrap();
        assert!(max_abs_diff(a[0].as_slice(), b[0].as_slice()) < 1e-12);
    }

    #[test]
    fn keep_all_hook_is_bit_identical_to_no_hook() {
        let cfg = small();
        let w = ModelWeights::init(&cfg, 5);
        let batch = vec![sample(&cfg, 1), sample(&cfg, 2)];
        let a = forward(&batch, &w, BnMode::PerBatchReset, None).unwrap();
        let b = forward(&batch, &w, BnMode::PerBatchReset, Some(&KeepAll)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_or_unsorted_keep_sets_are_invalid_state() {
        let cfg = small();
        let w = ModelWeights::init(&cfg, 5);
        let batch = vec![sample(&cfg, 1)];
        for keep in [vec![], vec![3, 1], vec![0, 99]] {
            let r = forward(&batch, &w, BnMode::Frozen, Some(&Keep(keep)));
            assert!(matches!(r, Err(Error::InvalidState(_))));
        }
    }

    #[test]
    fn purged_forward_materializes_smaller_attention() {
        let cfg = small();
        let w = ModelWeights::init(&cfg, 5);
        let batch = vec![sample(&cfg, 1)];
        let tr = forward_traced(&batch, &w, BnMode::Frozen, Some(&Keep(vec![0, 2, 5]))).unwrap();
        for block in &tr[0].attention {
            for a in block {
                assert_eq!((a.rows(), a.cols()), (4, 4));
            }
        }
    }

    #[test]
    fn removing_a_duplicate_renormalizes_first_block_attention() {
        let cfg = ModelConfig::default();
        let w = ModelWeights::init(&cfg, 6);
        let mut rng = seed::rng(3);
        let pts = (0..256)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let mut s = tokenize(&PointCloud::new(pts, None).unwrap(), cfg.num_tokens, cfg.k, 0).unwrap();
        s.tokens[5] = s.tokens[4].clone();
        let batch = vec![s];
        let full = forward_traced(&batch, &w, BnMode::Frozen, None).unwrap();
        let keep: Vec<usize> = (0..cfg.num_tokens).filter(|&i| i != 5).collect();
        let purged = forward_traced(&batch, &w, BnMode::Frozen, Some(&Keep(keep))).unwrap();
        // token t sits at sequence row t + 1; row 0 is CLS
        for (a, p) in full[0].attention[0].iter().zip(&purged[0].attention[0]) {
            for i in 0..a.rows() {
                if i == 6 {
                    continue;
                }
                let pi = if i > 6 { i - 1 } else { i };
                let dup = a.get(i, 6);
                assert!((a.get(i, 5) - dup).abs() < 1e-15);
                let expect = a.get(i, 5) / (1.0 - dup);
                assert!((p.get(pi, 5) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_forward_is_repeatable() {
        let cfg = small();
        let w = ModelWeights::init(&cfg, 7);
        let batch = vec![sample(&cfg, 1), sample(&cfg, 2)];
        assert_eq!(
            forward(&batch, &w, BnMode::Frozen, None).unwrap(),
            forward(&batch, &w, BnMode::Frozen, None).unwrap()
        );
    }

    #[test]
    fn per_batch_reset_ignores_running_stats() {
        let cfg = small();
        let w = ModelWeights::init(&cfg, 8);
        let mut other = w.clone();
        other.embed.bn.running_mean.iter_mut().for_each(|m| *m = 3.0);
        other.embed.bn.running_var.iter_mut().for_each(|v| *v = 9.0);
        let batch = vec![sample(&cfg, 1), sample(&cfg, 2)];
        assert_eq!(
            forward(&batch, &w, BnMode::PerBatchReset, None).unwrap(),
            forward(&batch, &other, BnMode::PerBatchReset, None).unwrap()
        );
        assert!(forward(&batch[..1], &w, BnMode::PerBatchReset, None).is_err());
    }

    #[test]
    fn per_batch_reset_differs_from_frozen_on_shifted_batch() {
        let cfg = small();
        let w = ModelWeights::init(&cfg, 9);
        let mut batch = vec![sample(&cfg, 1), sample(&cfg, 2)];
        for s in &mut batch {
            for t in &mut s.tokens {
                t.neighborhood.iter_mut().for_each(|p| *p = p.map(|c| 3.0 * c + 0.5));
            }
        }
        let a = forward(&batch, &w, BnMode::PerBatchReset, None).unwrap();
        let b = forward(&batch, &w, BnMode::Frozen, None).unwrap();
        let l2: f64 = a
            .iter()
            .zip(&b)
            .flat_map(|(x, y)| x.0.iter().zip(&y.0).map(|(p, q)| (p - q) * (p - q)))
            .sum();
        assert!(l2 > 0.0);
    }

    #[test]
    fn wrong_token_count_is_rejected() {
        let cfg = small();
        let w = ModelWeights::init(&cfg, 1);
        let mut s = sample(&cfg, 1);
        s.tokens.pop();
        s.source_indices.pop();
        assert!(embed_tokens(&[s], &w, BnMode::Frozen).is_err());
    }
}
