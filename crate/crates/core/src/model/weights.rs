use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::linalg::Matrix;
use crate::seed;

/// `y = x·W + b` with `W` stored input-major (`in × out`).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Matrix::from_vec(fan_in, fan_out, data),
            bias: vec![0.0; fan_out],
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight);
        y.add_row_vector(&self.bias);
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BatchNorm {
    fn new(c: usize, momentum: f64) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedWeights {
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
    pub pos1: Linear,
    pub pos2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNormParams,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Linear,
    pub ln2: LayerNormParams,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub ln: LayerNormParams,
    pub fc: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embed: EmbedWeights,
    pub cls_token: Vec<f64>,
    pub blocks: Vec<BlockWeights>,
    pub head: HeadWeights,
}

pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

fn mat_shape(m: &Matrix) -> Vec<usize> {
    vec![m.rows(), m.cols()]
}

impl ModelWeights {
    /// Random initialization from `init_seed`.
    pub fn init(config: &ModelConfig, init_seed: u64) -> Self {
        let mut rng = seed::rng(init_seed);
        let c = config;
        let d = c.d;
        let embed = EmbedWeights {
            fc1: Linear::init(&mut rng, 3, c.embed_hidden),
            bn: BatchNorm::new(c.embed_hidden, c.bn_momentum),
            fc2: Linear::init(&mut rng, c.embed_hidden, d),
            pos1: Linear::init(&mut rng, 3, c.pos_hidden),
            pos2: Linear::init(&mut rng, c.pos_hidden, d),
        };
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let cls_token = (0..d).map(|_| normal.sample(&mut rng)).collect();
        let blocks = (0..c.n_blocks)
            .map(|_| BlockWeights {
                ln1: LayerNormParams::identity(d),
                wq: Linear::init(&mut rng, d, d).weight,
                wk: Linear::init(&mut rng, d, d).weight,
                wv: Linear::init(&mut rng, d, d).weight,
                wo: Linear::init(&mut rng, d, d),
                ln2: LayerNormParams::identity(d),
                ff1: Linear::init(&mut rng, d, c.ffn_hidden),
                ff2: Linear::init(&mut rng, c.ffn_hidden, d),
            })
            .collect();
        let head = HeadWeights {
            ln: LayerNormParams::identity(d),
            fc: Linear::init(&mut rng, d, c.n_classes),
        };
        Self {
            config: config.clone(),
            embed,
            cls_token,
            blocks,
            head,
        }
    }

    /// All tensors set to zero (including LN/BN scales); used as a gradient
    /// accumulator and as the skeleton filled by the loader.
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config;
        let d = c.d;
        let zero_ln = || LayerNormParams {
            gamma: vec![0.0; d],
            beta: vec![0.0; d],
        };
        Self {
            config: config.clone(),
            embed: EmbedWeights {
                fc1: Linear::zeros(3, c.embed_hidden),
                bn: BatchNorm {
                    gamma: vec![0.0; c.embed_hidden],
                    beta: vec![0.0; c.embed_hidden],
                    running_mean: vec![0.0; c.embed_hidden],
                    running_var: vec![0.0; c.embed_hidden],
                    momentum: 0.0,
                },
                fc2: Linear::zeros(c.embed_hidden, d),
                pos1: Linear::zeros(3, c.pos_hidden),
                pos2: Linear::zeros(c.pos_hidden, d),
            },
            cls_token: vec![0.0; d],
            blocks: (0..c.n_blocks)
                .map(|_| BlockWeights {
                    ln1: zero_ln(),
                    wq: Matrix::zeros(d, d),
                    wk: Matrix::zeros(d, d),
                    wv: Matrix::zeros(d, d),
                    wo: Linear::zeros(d, d),
                    ln2: zero_ln(),
                    ff1: Linear::zeros(d, c.ffn_hidden),
                    ff2: Linear::zeros(c.ffn_hidden, d),
                })
                .collect(),
            head: HeadWeights {
                ln: zero_ln(),
                fc: Linear::zeros(d, c.n_classes),
            },
        }
    }

    /// Every stored tensor in canonical order. Learnable parameters only when
    /// `include_buffers` is false.
    pub fn tensors(&self, include_buffers: bool) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        macro_rules! push {
            ($name:expr, $shape:expr, $data:expr) => {
                out.push(TensorRef {
                    name: $name,
                    shape: $shape,
                    data: $data,
                })
            };
        }
        let e = &self.embed;
        push!("embed.fc1.weight".into(), mat_shape(&e.fc1.weight), e.fc1.weight.as_slice());
        push!("embed.fc1.bias".into(), vec![e.fc1.bias.len()], &e.fc1.bias);
        push!("embed.bn.gamma".into(), vec![e.bn.gamma.len()], &e.bn.gamma);
        push!("embed.bn.beta".into(), vec![e.bn.beta.len()], &e.bn.beta);
        push!("embed.fc2.weight".into(), mat_shape(&e.fc2.weight), e.fc2.weight.as_slice());
        push!("embed.fc2.bias".into(), vec![e.fc2.bias.len()], &e.fc2.bias);
        push!("pos.fc1.weight".into(), mat_shape(&e.pos1.weight), e.pos1.weight.as_slice());
        push!("pos.fc1.bias".into(), vec![e.pos1.bias.len()], &e.pos1.bias);
        push!("pos.fc2.weight".into(), mat_shape(&e.pos2.weight), e.pos2.weight.as_slice());
        push!("pos.fc2.bias".into(), vec![e.pos2.bias.len()], &e.pos2.bias);
        push!("cls_token".into(), vec![self.cls_token.len()], &self.cls_token);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            push!(p("ln1.gamma"), vec![b.ln1.gamma.len()], &b.ln1.gamma);
            push!(p("ln1.beta"), vec![b.ln1.beta.len()], &b.ln1.beta);
            push!(p("attn.wq"), mat_shape(&b.wq), b.wq.as_slice());
            push!(p("attn.wk"), mat_shape(&b.wk), b.wk.as_slice());
            push!(p("attn.wv"), mat_shape(&b.wv), b.wv.as_slice());
            push!(p("attn.wo.weight"), mat_shape(&b.wo.weight), b.wo.weight.as_slice());
            push!(p("attn.wo.bias"), vec![b.wo.bias.len()], &b.wo.bias);
            push!(p("ln2.gamma"), vec![b.ln2.gamma.len()], &b.ln2.gamma);
            push!(p("ln2.beta"), vec![b.ln2.beta.len()], &b.ln2.beta);
            push!(p("ffn.fc1.weight"), mat_shape(&b.ff1.weight), b.ff1.weight.as_slice());
            push!(p("ffn.fc1.bias"), vec![b.ff1.bias.len()], &b.ff1.bias);
            push!(p("ffn.fc2.weight"), mat_shape(&b.ff2.weight), b.ff2.weight.as_slice());
            push!(p("ffn.fc2.bias"), vec![b.ff2.bias.len()], &b.ff2.bias);
        }
        let h = &self.head;
        push!("head.ln.gamma".into(), vec![h.ln.gamma.len()], &h.ln.gamma);
        push!("head.ln.beta".into(), vec![h.ln.beta.len()], &h.ln.beta);
        push!("head.fc.weight".into(), mat_shape(&h.fc.weight), h.fc.weight.as_slice());
        push!("head.fc.bias".into(), vec![h.fc.bias.len()], &h.fc.bias);
        if include_buffers {
            push!("embed.bn.running_mean".into(), vec![e.bn.running_mean.len()], &e.bn.running_mean);
            push!("embed.bn.running_var".into(), vec![e.bn.running_var.len()], &e.bn.running_var);
            push!("embed.bn.momentum".into(), vec![1], std::slice::from_ref(&e.bn.momentum));
        }
        out
    }

    /// Mutable counterpart of [`ModelWeights::tensors`], same order.
    pub fn tensors_mut(&mut self, include_buffers: bool) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        let EmbedWeights { fc1, bn, fc2, pos1, pos2 } = &mut self.embed;
        let BatchNorm { gamma, beta, running_mean, running_var, momentum } = bn;
        macro_rules! push {
            ($name:expr, $shape:expr, $data:expr) => {
                out.push(TensorMut {
                    name: $name,
                    shape: $shape,
                    data: $data,
                })
            };
        }
        push!("embed.fc1.weight".into(), mat_shape(&fc1.weight), fc1.weight.as_mut_slice());
        push!("embed.fc1.bias".into(), vec![fc1.bias.len()], &mut fc1.bias);
        push!("embed.bn.gamma".into(), vec![gamma.len()], gamma);
        push!("embed.bn.beta".into(), vec![beta.len()], beta);
        push!("embed.fc2.weight".into(), mat_shape(&fc2.weight), fc2.weight.as_mut_slice());
        push!("embed.fc2.bias".into(), vec![fc2.bias.len()], &mut fc2.bias);
        push!("pos.fc1.weight".into(), mat_shape(&pos1.weight), pos1.weight.as_mut_slice());
        push!("pos.fc1.bias".into(), vec![pos1.bias.len()], &mut pos1.bias);
        push!("pos.fc2.weight".into(), mat_shape(&pos2.weight), pos2.weight.as_mut_slice());
        push!("pos.fc2.bias".into(), vec![pos2.bias.len()], &mut pos2.bias);
        push!("cls_token".into(), vec![self.cls_token.len()], &mut self.cls_token);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            push!(p("ln1.gamma"), vec![b.ln1.gamma.len()], &mut b.ln1.gamma);
            push!(p("ln1.beta"), vec![b.ln1.beta.len()], &mut b.ln1.beta);
            push!(p("attn.wq"), mat_shape(&b.wq), b.wq.as_mut_slice());
            push!(p("attn.wk"), mat_shape(&b.wk), b.wk.as_mut_slice());
            push!(p("attn.wv"), mat_shape(&b.wv), b.wv.as_mut_slice());
            push!(p("attn.wo.weight"), mat_shape(&b.wo.weight), b.wo.weight.as_mut_slice());
            push!(p("attn.wo.bias"), vec![b.wo.bias.len()], &mut b.wo.bias);
            push!(p("ln2.gamma"), vec![b.ln2.gamma.len()], &mut b.ln2.gamma);
            push!(p("ln2.beta"), vec![b.ln2.beta.len()], &mut b.ln2.beta);
            push!(p("ffn.fc1.weight"), mat_shape(&b.ff1.weight), b.ff1.weight.as_mut_slice());
            push!(p("ffn.fc1.bias"), vec![b.ff1.bias.len()], &mut b.ff1.bias);
            push!(p("ffn.fc2.weight"), mat_shape(&b.ff2.weight), b.ff2.weight.as_mut_slice());
            push!(p("ffn.fc2.bias"), vec![b.ff2.bias.len()], &mut b.ff2.bias);
        }
        let h = &mut self.head;
        push!("head.ln.gamma".into(), vec![h.ln.gamma.len()], &mut h.ln.gamma);
        push!("head.ln.beta".into(), vec![h.ln.beta.len()], &mut h.ln.beta);
        push!("head.fc.weight".into(), mat_shape(&h.fc.weight), h.fc.weight.as_mut_slice());
        push!("head.fc.bias".into(), vec![h.fc.bias.len()], &mut h.fc.bias);
        if include_buffers {
            push!("embed.bn.running_mean".into(), vec![running_mean.len()], running_mean);
            push!("embed.bn.running_var".into(), vec![running_var.len()], running_var);
            push!("embed.bn.momentum".into(), vec![1], std::slice::from_mut(momentum));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors(false).iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors(true)
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Rounds every tensor to `f32` precision, the precision of the weights
    /// file, so that an in-memory model and its saved copy agree exactly.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut(true) {
            for v in t.data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all tensors.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors(true) {
            h.update(t.name.as_bytes());
            for s in &t.shape {
                h.update((*s as u64).to_le_bytes());
            }
            for v in t.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
