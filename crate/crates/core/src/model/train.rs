//! Reverse-mode gradients for the fixed architecture and the source trainer.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{embed_forward, sample_forward, BlockCache, EmbedSampleCache, SampleCache};
use super::layers::{gelu_grad, layer_norm_rows_backward};
use super::{BlockWeights, BnMode, ModelConfig, ModelWeights};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::linalg::{softmax, Matrix};
use crate::seed::{self, Stream};
use crate::tokenizer::{tokenize, TokenizedSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
    pub steps: usize,
    pub seconds: f64,
}

fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    // f64::max would swallow a NaN probability
    let loss = if p[label].is_nan() { f64::NAN } else { -(p[label].max(f64::MIN_POSITIVE)).ln() };
    let mut grad = p;
    grad[label] -= 1.0;
    (loss, grad)
}

fn acc_linear_grads(x: &Matrix, dy: &Matrix, dw: &mut Matrix, db: &mut [f64]) {
    x.t_matmul_acc(dy, dw);
    dy.col_sums_into(db);
}

fn block_backward(
    d_out: &Matrix,
    c: &BlockCache,
    b: &BlockWeights,
    g: &mut BlockWeights,
    cfg: &ModelConfig,
) -> Matrix {
    // feed-forward branch
    let d_fact = d_out.matmul_t(&b.ff2.weight);
    acc_linear_grads(&c.f_act, d_out, &mut g.ff2.weight, &mut g.ff2.bias);
    let mut d_fpre = d_fact;
    for (dv, x) in d_fpre.as_mut_slice().iter_mut().zip(c.f_pre.as_slice()) {
        *dv *= gelu_grad(*x);
    }
    acc_linear_grads(&c.y2, &d_fpre, &mut g.ff1.weight, &mut g.ff1.bias);
    let dy2 = d_fpre.matmul_t(&b.ff1.weight);
    let mut d_mid = layer_norm_rows_backward(&dy2, &c.ln2, &b.ln2, &mut g.ln2.gamma, &mut g.ln2.beta);
    d_mid.add_assign(d_out);

    // attention branch
    acc_linear_grads(&c.o, &d_mid, &mut g.wo.weight, &mut g.wo.bias);
    let d_o = d_mid.matmul_t(&b.wo.weight);
    let n = d_o.rows();
    let dh = cfg.head_dim();
    let scale = cfg.attention_scale();
    let mut dq = Matrix::zeros(n, cfg.d);
    let mut dk = Matrix::zeros(n, cfg.d);
    let mut dv = Matrix::zeros(n, cfg.d);
    for h in 0..cfg.n_heads {
        let a = &c.attn[h];
        let d_oh = d_o.col_block(h * dh, dh);
        let qh = c.q.col_block(h * dh, dh);
        let kh = c.k.col_block(h * dh, dh);
        let vh = c.v.col_block(h * dh, dh);
        let da = d_oh.matmul_t(&vh);
        let mut dvh = Matrix::zeros(n, dh);
        a.t_matmul_acc(&d_oh, &mut dvh);
        let mut ds = Matrix::zeros(n, n);
        for i in 0..n {
            let ar = a.row(i);
            let dar = da.row(i);
            let inner: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
            let out = ds.row_mut(i);
            for j in 0..n {
                out[j] = ar[j] * (dar[j] - inner) * scale;
            }
        }
        let dqh = ds.matmul(&kh);
        let mut dkh = Matrix::zeros(n, dh);
        ds.t_matmul_acc(&qh, &mut dkh);
        dq.set_col_block(h * dh, &dqh);
        dk.set_col_block(h * dh, &dkh);
        dv.set_col_block(h * dh, &dvh);
    }
    c.y1.t_matmul_acc(&dq, &mut g.wq);
    c.y1.t_matmul_acc(&dk, &mut g.wk);
    c.y1.t_matmul_acc(&dv, &mut g.wv);
    let mut dy1 = dq.matmul_t(&b.wq);
    dy1.add_assign(&dk.matmul_t(&b.wk));
    dy1.add_assign(&dv.matmul_t(&b.wv));
    let mut dx = layer_norm_rows_backward(&dy1, &c.ln1, &b.ln1, &mut g.ln1.gamma, &mut g.ln1.beta);
    dx.add_assign(&d_mid);
    dx
}

/// Backward from `dlogits` down to the BatchNorm output of the embedding.
/// Returns the BN-output gradient for the batch-coupled second phase.
fn sample_backward_upper(
    dlogits: &[f64],
    sc: &SampleCache,
    ec: &EmbedSampleCache,
    w: &ModelWeights,
    g: &mut ModelWeights,
) -> Matrix {
    let cfg = &w.config;
    let d = cfg.d;

    // head
    let dl = Matrix::from_vec(1, dlogits.len(), dlogits.to_vec());
    let y = Matrix::from_vec(1, d, sc.head.y.clone());
    acc_linear_grads(&y, &dl, &mut g.head.fc.weight, &mut g.head.fc.bias);
    let dy = dl.matmul_t(&w.head.fc.weight);
    let dcls = layer_norm_rows_backward(&dy, &sc.head.ln, &w.head.ln, &mut g.head.ln.gamma, &mut g.head.ln.beta);

    let n = sc.keep.len() + 1;
    let mut dx = Matrix::zeros(n, d);
    dx.row_mut(0).copy_from_slice(dcls.row(0));
    for (bi, cache) in sc.blocks.iter().enumerate().rev() {
        dx = block_backward(&dx, cache, &w.blocks[bi], &mut g.blocks[bi], cfg);
    }
    for (gv, v) in g.cls_token.iter_mut().zip(dx.row(0)) {
        *gv += v;
    }
    let mut dtok = Matrix::zeros(cfg.num_tokens, d);
    for (r, &t) in sc.keep.iter().enumerate() {
        dtok.row_mut(t).copy_from_slice(dx.row(r + 1));
    }

    // positional MLP
    let e = &w.embed;
    let ge = &mut g.embed;
    acc_linear_grads(&ec.pos_act, &dtok, &mut ge.pos2.weight, &mut ge.pos2.bias);
    let mut dpre = dtok.matmul_t(&e.pos2.weight);
    for (dv, x) in dpre.as_mut_slice().iter_mut().zip(ec.pos_pre.as_slice()) {
        *dv *= gelu_grad(*x);
    }
    acc_linear_grads(&ec.centers, &dpre, &mut ge.pos1.weight, &mut ge.pos1.bias);

    // max-pool routes each gradient to its winning point
    let mut dh2 = Matrix::zeros(ec.act.rows(), d);
    for t in 0..cfg.num_tokens {
        let src = dtok.row(t);
        for c in 0..d {
            let r = ec.argmax[t * d + c];
            let cur = dh2.get(r, c);
            dh2.set(r, c, cur + src[c]);
        }
    }
    acc_linear_grads(&ec.act, &dh2, &mut ge.fc2.weight, &mut ge.fc2.bias);
    let mut dbn = dh2.matmul_t(&e.fc2.weight);
    for (dv, x) in dbn.as_mut_slice().iter_mut().zip(ec.bn_out.as_slice()) {
        *dv *= gelu_grad(*x);
    }
    for i in 0..dbn.rows() {
        let gr = dbn.row(i);
        let hr = ec.xhat.row(i);
        for c in 0..gr.len() {
            ge.bn.gamma[c] += gr[c] * hr[c];
            ge.bn.beta[c] += gr[c];
        }
    }
    dbn
}

fn add_into(acc: &mut ModelWeights, other: &ModelWeights) {
    for (a, b) in acc.tensors_mut(false).into_iter().zip(other.tensors(false)) {
        for (x, y) in a.data.iter_mut().zip(b.data) {
            *x += y;
        }
    }
}

/// Mean cross-entropy of a batch with the BatchNorm in training mode.
pub fn batch_loss(batch: &[TokenizedSample], labels: &[usize], w: &ModelWeights) -> Result<f64> {
    let emb = embed_forward(batch, w, BnMode::Training)?;
    let mut total = 0.0;
    for (e, &y) in emb.outputs.iter().zip(labels) {
        let (logits, _) = sample_forward(e, w, None)?;
        total += cross_entropy(&logits.0, y).0;
    }
    Ok(total / batch.len() as f64)
}

pub(crate) struct BatchGradients {
    pub loss: f64,
    pub correct: usize,
    pub grads: ModelWeights,
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
    pub bn_rows: usize,
}

fn compute_batch_gradients(
    batch: &[TokenizedSample],
    labels: &[usize],
    w: &ModelWeights,
) -> Result<BatchGradients> {
    let cfg = &w.config;
    if batch.len() != labels.len() {
        return Err(Error::invalid_arg("batch and label counts differ"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= cfg.n_classes) {
        return Err(Error::invalid_arg(format!("label {y} >= n_classes {}", cfg.n_classes)));
    }
    let emb = embed_forward(batch, w, BnMode::Training)?;
    let bsz = batch.len() as f64;

    let per_sample: Vec<(f64, bool, ModelWeights, Matrix)> = emb
        .outputs
        .par_iter()
        .zip(emb.caches.par_iter())
        .zip(labels.par_iter())
        .map(|((e, ec), &y)| {
            let (logits, sc) = sample_forward(e, w, None)?;
            let (loss, mut dl) = cross_entropy(&logits.0, y);
            dl.iter_mut().for_each(|v| *v /= bsz);
            let mut g = ModelWeights::zeros(cfg);
            let dbn = sample_backward_upper(&dl, &sc, ec, w, &mut g);
            Ok((loss, logits.argmax() == y, g, dbn))
        })
        .collect::<Result<_>>()?;

    let mut grads = ModelWeights::zeros(cfg);
    let mut loss = 0.0;
    let mut correct = 0;
    for (l, ok, g, _) in &per_sample {
        loss += l;
        correct += *ok as usize;
        add_into(&mut grads, g);
    }

    // BatchNorm couples samples: its input gradient needs batch-wide sums.
    let stats = emb.stats.expect("training mode yields batch stats");
    let rows = stats.rows as f64;
    let gamma = &w.embed.bn.gamma;
    let sum_dxhat: Vec<f64> = gamma.iter().zip(&grads.embed.bn.beta).map(|(g, b)| g * b).collect();
    let sum_dxhat_xhat: Vec<f64> =
        gamma.iter().zip(&grads.embed.bn.gamma).map(|(g, s)| g * s).collect();
    let hidden = cfg.embed_hidden;
    let lower: Vec<ModelWeights> = per_sample
        .par_iter()
        .zip(emb.caches.par_iter())
        .map(|((_, _, _, dbn), ec)| {
            let mut dh1 = Matrix::zeros(dbn.rows(), hidden);
            for i in 0..dbn.rows() {
                let gr = dbn.row(i);
                let hr = ec.xhat.row(i);
                let out = dh1.row_mut(i);
                for c in 0..hidden {
                    let dxhat = gr[c] * gamma[c];
                    out[c] = emb.inv_std[c] / rows
                        * (rows * dxhat - sum_dxhat[c] - hr[c] * sum_dxhat_xhat[c]);
                }
            }
            let mut g = ModelWeights::zeros(cfg);
            acc_linear_grads(&ec.neigh, &dh1, &mut g.embed.fc1.weight, &mut g.embed.fc1.bias);
            g
        })
        .collect();
    for g in &lower {
        for (a, b) in grads.embed.fc1.weight.as_mut_slice().iter_mut().zip(g.embed.fc1.weight.as_slice()) {
            *a += b;
        }
        for (a, b) in grads.embed.fc1.bias.iter_mut().zip(&g.embed.fc1.bias) {
            *a += b;
        }
    }

    Ok(BatchGradients {
        loss: loss / bsz,
        correct,
        grads,
        bn_mean: stats.mean,
        bn_var: stats.var,
        bn_rows: stats.rows,
    })
}

/// Mean cross-entropy and its exact gradient with respect to every learnable
/// tensor (BatchNorm in training mode, statistics of this batch).
pub fn batch_loss_and_gradients(
    batch: &[TokenizedSample],
    labels: &[usize],
    weights: &ModelWeights,
) -> Result<(f64, ModelWeights)> {
    let bg = compute_batch_gradients(batch, labels, weights)?;
    Ok((bg.loss, bg.grads))
}

fn grad_norm(g: &ModelWeights) -> f64 {
    g.tensors(false)
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Trains the classifier on labeled clean clouds with SGD + momentum and a
/// cosine-decayed step size. Deterministic given `hp.seed`.
pub fn train_source(
    dataset: &[PointCloud],
    config: &ModelConfig,
    hp: &TrainerConfig,
) -> Result<(ModelWeights, TrainReport)> {
    config.validate()?;
    if hp.batch_size == 0 || hp.epochs == 0 {
        return Err(Error::invalid_arg("epochs and batch_size must be positive"));
    }
    let labels: Vec<usize> = dataset
        .iter()
        .map(|c| c.label.ok_or_else(|| Error::invalid_arg("training cloud without a label")))
        .collect::<Result<_>>()?;
    let mut classes = labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 && dataset.len() > 1 {
        return Err(Error::invalid_arg("training data must contain at least 2 classes"));
    }
    let samples: Vec<TokenizedSample> = dataset
        .par_iter()
        .map(|c| tokenize(c, config.num_tokens, config.k, 0))
        .collect::<Result<_>>()?;

    let start = Instant::now();
    let mut w = ModelWeights::init(config, seed::derive(hp.seed, Stream::Init));
    let mut velocity = ModelWeights::zeros(config);
    let mut rng = seed::stream_rng(hp.seed, Stream::Train);
    let steps_per_epoch = samples.len().div_ceil(hp.batch_size);
    let total_steps = steps_per_epoch * hp.epochs;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = TrainReport {
        epoch_loss: Vec::new(),
        epoch_accuracy: Vec::new(),
        steps: 0,
        seconds: 0.0,
    };

    let mut step = 0;
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(hp.batch_size) {
            let batch: Vec<TokenizedSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let bg = compute_batch_gradients(&batch, &ys, &w)?;
            if !bg.loss.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    step,
                    loss: bg.loss,
                    diagnostics: format!(
                        "grad norm {:.3e}, weights finite: {}",
                        grad_norm(&bg.grads),
                        w.all_finite()
                    ),
                });
            }
            loss_sum += bg.loss * chunk.len() as f64;
            correct += bg.correct;

            let lr = 0.5 * hp.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
            for ((p, gr), v) in w
                .tensors_mut(false)
                .into_iter()
                .zip(bg.grads.tensors(false))
                .zip(velocity.tensors_mut(false))
            {
                for ((pv, gv), vv) in p.data.iter_mut().zip(gr.data).zip(v.data.iter_mut()) {
                    let g = gv + hp.weight_decay * *pv;
                    *vv = hp.momentum * *vv + g;
                    *pv -= lr * *vv;
                }
            }

            if !w.all_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    step,
                    loss: bg.loss,
                    diagnostics: format!(
                        "non-finite weights after update, lr {lr:.3e}, grad norm {:.3e}",
                        grad_norm(&bg.grads)
                    ),
                });
            }

            let m = w.embed.bn.momentum;
            let n = bg.bn_rows as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for c in 0..config.embed_hidden {
                let rm = &mut w.embed.bn.running_mean[c];
                *rm = (1.0 - m) * *rm + m * bg.bn_mean[c];
                let rv = &mut w.embed.bn.running_var[c];
                *rv = (1.0 - m) * *rv + m * bg.bn_var[c] * unbias;
            }
            step += 1;
        }
        let epoch_loss = loss_sum / samples.len() as f64;
        let epoch_acc = correct as f64 / samples.len() as f64;
        log::info!("epoch {epoch}: loss {epoch_loss:.4} train acc {epoch_acc:.3}");
        report.epoch_loss.push(epoch_loss);
        report.epoch_accuracy.push(epoch_acc);
    }
    w.round_to_f32();
    report.steps = step;
    report.seconds = start.elapsed().as_secs_f64();
    Ok((w, report))
}

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
}

/// Central-difference check of [`batch_loss_and_gradients`] over every
/// learnable scalar. Pairs where both gradients are below `abs_floor` are
/// compared absolutely against the floor instead of relatively.
pub fn finite_difference_check(
    batch: &[TokenizedSample],
    labels: &[usize],
    weights: &ModelWeights,
    h: f64,
    abs_floor: f64,
) -> Result<GradCheck> {
    let (_, grads) = batch_loss_and_gradients(batch, labels, weights)?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors(false)
        .into_iter()
        .map(|t| (t.name, t.data.to_vec()))
        .collect();
    let mut probe = weights.clone();
    let mut out = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
    };
    for (ti, (name, ga)) in analytic.iter().enumerate() {
        for (i, &a) in ga.iter().enumerate() {
            let orig = probe.tensors(false)[ti].data[i];
            probe.tensors_mut(false)[ti].data[i] = orig + h;
            let lp = batch_loss(batch, labels, &probe)?;
            probe.tensors_mut(false)[ti].data[i] = orig - h;
            let lm = batch_loss(batch, labels, &probe)?;
            probe.tensors_mut(false)[ti].data[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(abs_floor);
            out.checked += 1;
            if err > out.max_rel_error {
                out.max_rel_error = err;
                out.worst_tensor = name.clone();
                out.worst_index = i;
            }
        }
    }
    Ok(out)
}
