use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;

/// A named dense parameter tensor. Values are kept in f64 for accumulation;
/// the training loop rounds them onto the f32 grid after every update so that
/// checkpoints (stored as f32) reload exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, value: f64) -> Self {
        let mut t = Self::zeros(name, shape);
        t.data.fill(value);
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mat(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data).expect("2-d tensor")
    }

    pub fn mat_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.data)
            .expect("2-d tensor")
    }

    pub fn vec(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[..])
    }

    pub fn vec_mut(&mut self) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.data[..])
    }
}

/// Positions of each parameter inside [`Params::tensors`].
#[derive(Debug, Clone, Copy)]
pub struct LayerSlots {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_ff1: usize,
    pub b_ff1: usize,
    pub w_ff2: usize,
    pub b_ff2: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    /// Output projection; equal to `tok_emb` when embeddings are tied.
    pub out_proj: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut next = 0usize;
        let mut take = || {
            let i = next;
            next += 1;
            i
        };
        let tok_emb = take();
        let pos_emb = take();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerSlots {
                ln1_g: take(),
                ln1_b: take(),
                w_qkv: take(),
                b_qkv: take(),
                w_o: take(),
                b_o: take(),
                ln2_g: take(),
                ln2_b: take(),
                w_ff1: take(),
                b_ff1: take(),
                w_ff2: take(),
                b_ff2: take(),
            })
            .collect();
        let lnf_g = take();
        let lnf_b = take();
        let out_proj = if cfg.tie_embeddings { tok_emb } else { take() };
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            out_proj,
        }
    }
}

/// All trainable tensors of a model, in a fixed order determined by [`Layout`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

impl Params {
    /// Shapes and names for `cfg`, all zero.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut tensors = vec![
            Tensor::zeros("tok_emb", vec![cfg.vocab_size, d]),
            Tensor::zeros("pos_emb", vec![cfg.context_len, d]),
        ];
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            tensors.extend([
                Tensor::zeros(p("ln1.gain"), vec![d]),
                Tensor::zeros(p("ln1.bias"), vec![d]),
                Tensor::zeros(p("attn.w_qkv"), vec![d, 3 * d]),
                Tensor::zeros(p("attn.b_qkv"), vec![3 * d]),
                Tensor::zeros(p("attn.w_out"), vec![d, d]),
                Tensor::zeros(p("attn.b_out"), vec![d]),
                Tensor::zeros(p("ln2.gain"), vec![d]),
                Tensor::zeros(p("ln2.bias"), vec![d]),
                Tensor::zeros(p("ff.w1"), vec![d, cfg.d_ff]),
                Tensor::zeros(p("ff.b1"), vec![cfg.d_ff]),
                Tensor::zeros(p("ff.w2"), vec![cfg.d_ff, d]),
                Tensor::zeros(p("ff.b2"), vec![d]),
            ]);
        }
        tensors.push(Tensor::zeros("ln_f.gain", vec![d]));
        tensors.push(Tensor::zeros("ln_f.bias", vec![d]));
        if !cfg.tie_embeddings {
            tensors.push(Tensor::zeros("out_proj", vec![cfg.vocab_size, d]));
        }
        Self { tensors }
    }

    /// Seeded initialization: N(0, 0.02) weights, residual-output projections
    /// scaled by 1/sqrt(2·layers), unit layer-norm gains, zero biases.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut params = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        for t in &mut params.tensors {
            let name = t.name.as_str();
            if name.ends_with("gain") {
                t.data.fill(1.0);
            } else if t.shape.len() == 2 {
                let s = if name.ends_with("w_out") || name.ends_with("ff.w2") {
                    resid_std
                } else {
                    std
                };
                let normal = Normal::new(0.0, s).expect("valid std");
                for x in &mut t.data {
                    *x = normal.sample(&mut rng);
                }
            }
        }
        params.round_to_f32();
        params
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn same_shapes(&self, other: &Params) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape)
    }
}
