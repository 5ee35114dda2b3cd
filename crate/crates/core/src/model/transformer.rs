//! Pre-LN decoder-only transformer with an explicit reverse pass.
//!
//! Row layout: a batch of `B` sequences of length `T` is flattened to
//! `N = B·T` rows; row `b·T + t` is position `t` of lane `b`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};

use super::params::{Layout, Params};
use super::ModelConfig;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Next-token logits (`B×T×V`) and the final-layer context vectors
/// (`B×T×d`), taken after the last layer norm and before the output
/// projection. The latter are the retrieval keys and the regularized
/// activations.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Array3<f64>,
    pub reprs: Array3<f64>,
}

struct LayerCache {
    xhat1: Array2<f64>,
    rstd1: Array1<f64>,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    att: Array2<f64>,
    xhat2: Array2<f64>,
    rstd2: Array1<f64>,
    h2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

/// Activations retained by [`Transformer::forward_cached`] for the reverse pass.
pub struct ForwardCache {
    batch: usize,
    seq: usize,
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    xhat_f: Array2<f64>,
    rstd_f: Array1<f64>,
    /// `N×d` final-layer context vectors.
    pub reprs: Array2<f64>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    pub params: Params,
}

impl Transformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        if !Params::zeros(&config).same_shapes(&params) {
            return Err(Error::Config(
                "parameter shapes do not match model config".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    fn check_input(&self, inputs: &[u32], batch: usize, seq: usize) -> Result<()> {
        if batch == 0 || seq == 0 || inputs.len() != batch * seq {
            return Err(Error::InvalidArgument(format!(
                "input of length {} is not batch {batch} x seq {seq}",
                inputs.len()
            )));
        }
        if seq > self.config.context_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {seq} exceeds context length {}",
                self.config.context_len
            )));
        }
        if let Some(&id) = inputs
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::IdOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &[u32], batch: usize, seq: usize) -> Result<ForwardOutput> {
        let (logits, cache) = self.forward_cached(inputs, batch, seq)?;
        let v = self.config.vocab_size;
        let d = self.config.d_model;
        Ok(ForwardOutput {
            logits: logits
                .into_shape_with_order((batch, seq, v))
                .expect("logits shape"),
            reprs: cache
                .reprs
                .into_shape_with_order((batch, seq, d))
                .expect("reprs shape"),
        })
    }

    /// Forward pass returning flat `N×V` logits and the activation cache.
    pub fn forward_cached(
        &self,
        inputs: &[u32],
        batch: usize,
        seq: usize,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(inputs, batch, seq)?;
        let cfg = &self.config;
        let lay = self.layout();
        let p = &self.params.tensors;
        let d = cfg.d_model;
        let n = batch * seq;

        let tok = p[lay.tok_emb].mat();
        let pos = p[lay.pos_emb].mat();
        let mut x = Array2::<f64>::zeros((n, d));
        for (row, mut xr) in x.axis_iter_mut(Axis(0)).enumerate() {
            let t = row % seq;
            Zip::from(&mut xr)
                .and(tok.row(inputs[row] as usize))
                .and(pos.row(t))
                .for_each(|o, &a, &b| *o = a + b);
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for slots in &lay.layers {
            let (h1, xhat1, rstd1) =
                layer_norm(&x, p[slots.ln1_g].vec(), p[slots.ln1_b].vec());
            let qkv = affine(&h1, p[slots.w_qkv].mat(), p[slots.b_qkv].vec());
            let (att, probs) = attention_forward(&qkv, batch, seq, cfg.n_heads, d);
            let a = affine(&att, p[slots.w_o].mat(), p[slots.b_o].vec());
            let x1 = &x + &a;
            let (h2, xhat2, rstd2) =
                layer_norm(&x1, p[slots.ln2_g].vec(), p[slots.ln2_b].vec());
            let u = affine(&h2, p[slots.w_ff1].mat(), p[slots.b_ff1].vec());
            let g = u.mapv(gelu);
            let f = affine(&g, p[slots.w_ff2].mat(), p[slots.b_ff2].vec());
            let x2 = &x1 + &f;
            layers.push(LayerCache {
                xhat1,
                rstd1,
                h1,
                qkv,
                probs,
                att,
                xhat2,
                rstd2,
                h2,
                u,
                g,
            });
            x = x2;
        }

        let (reprs, xhat_f, rstd_f) = layer_norm(&x, p[lay.lnf_g].vec(), p[lay.lnf_b].vec());
        let logits = reprs.dot(&p[lay.out_proj].mat().t());
        Ok((
            logits,
            ForwardCache {
                batch,
                seq,
                ids: inputs.to_vec(),
                layers,
                xhat_f,
                rstd_f,
                reprs,
            },
        ))
    }

    /// Reverse pass. `d_logits` is the loss gradient w.r.t. the flat logits;
    /// `d_reprs`, when given, is an extra gradient injected directly at the
    /// context vectors (used by the activation regularizers).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &Array2<f64>,
        d_reprs: Option<&Array2<f64>>,
    ) -> Params {
        let cfg = &self.config;
        let lay = self.layout();
        let p = &self.params.tensors;
        let mut grads = self.params.zeros_like();
        let d = cfg.d_model;

        // logits = r · Wᵀ
        let w_out = p[lay.out_proj].mat();
        let mut dr = d_logits.dot(&w_out);
        if let Some(extra) = d_reprs {
            dr += extra;
        }
        general_mat_mul(
            1.0,
            &d_logits.t(),
            &cache.reprs,
            1.0,
            &mut grads.tensors[lay.out_proj].mat_mut(),
        );

        let mut dx = layer_norm_backward(
            &dr,
            &cache.xhat_f,
            &cache.rstd_f,
            p[lay.lnf_g].vec(),
            &mut grads,
            lay.lnf_g,
            lay.lnf_b,
        );

        for (slots, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // x2 = x1 + W2·gelu(W1·LN2(x1))
            let dg = dx.dot(&p[slots.w_ff2].mat().t());
            accum_affine_grads(&lc.g, &dx, &mut grads, slots.w_ff2, slots.b_ff2);
            let mut du = dg;
            Zip::from(&mut du).and(&lc.u).for_each(|g, &u| *g *= gelu_grad(u));
            let dh2 = du.dot(&p[slots.w_ff1].mat().t());
            accum_affine_grads(&lc.h2, &du, &mut grads, slots.w_ff1, slots.b_ff1);
            let dx1 = dx
                + layer_norm_backward(
                    &dh2,
                    &lc.xhat2,
                    &lc.rstd2,
                    p[slots.ln2_g].vec(),
                    &mut grads,
                    slots.ln2_g,
                    slots.ln2_b,
                );

            // x1 = x + Wo·attn(Wqkv·LN1(x))
            let datt = dx1.dot(&p[slots.w_o].mat().t());
            accum_affine_grads(&lc.att, &dx1, &mut grads, slots.w_o, slots.b_o);
            let dqkv = attention_backward(
                &datt,
                &lc.qkv,
                &lc.probs,
                cache.batch,
                cache.seq,
                cfg.n_heads,
                d,
            );
            let dh1 = dqkv.dot(&p[slots.w_qkv].mat().t());
            accum_affine_grads(&lc.h1, &dqkv, &mut grads, slots.w_qkv, slots.b_qkv);
            dx = dx1
                + layer_norm_backward(
                    &dh1,
                    &lc.xhat1,
                    &lc.rstd1,
                    p[slots.ln1_g].vec(),
                    &mut grads,
                    slots.ln1_g,
                    slots.ln1_b,
                );
        }

        for (row, dxr) in dx.axis_iter(Axis(0)).enumerate() {
            let t = row % cache.seq;
            let id = cache.ids[row] as usize;
            {
                let mut tok = grads.tensors[lay.tok_emb].mat_mut();
                let mut r = tok.row_mut(id);
                r += &dxr;
            }
            let mut pos = grads.tensors[lay.pos_emb].mat_mut();
            let mut r = pos.row_mut(t);
            r += &dxr;
        }
        grads
    }
}

fn affine(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

fn accum_affine_grads(x: &Array2<f64>, dy: &Array2<f64>, grads: &mut Params, w: usize, b: usize) {
    general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grads.tensors[w].mat_mut());
    let mut gb = grads.tensors[b].vec_mut();
    gb += &dy.sum_axis(Axis(0));
}

fn layer_norm(
    x: &Array2<f64>,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = rs;
        Zip::from(xhat.row_mut(i))
            .and(row)
            .for_each(|o, &v| *o = (v - mean) * rs);
    }
    let mut y = &xhat * &gain;
    y += &bias;
    (y, xhat, rstd)
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    rstd: &Array1<f64>,
    gain: ArrayView1<f64>,
    grads: &mut Params,
    g_slot: usize,
    b_slot: usize,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    {
        let mut gg = grads.tensors[g_slot].vec_mut();
        gg += &(dy * xhat).sum_axis(Axis(0));
    }
    {
        let mut gb = grads.tensors[b_slot].vec_mut();
        gb += &dy.sum_axis(Axis(0));
    }
    let dxhat = dy * &gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = xhat.row(i);
        let mean_dh = dh.sum() / d;
        let mean_dh_xh = dh.dot(&xh) / d;
        let rs = rstd[i];
        Zip::from(dx.row_mut(i))
            .and(dh)
            .and(xh)
            .for_each(|o, &a, &b| *o = rs * (a - mean_dh - b * mean_dh_xh));
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn attention_forward(
    qkv: &Array2<f64>,
    batch: usize,
    seq: usize,
    heads: usize,
    d: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((batch * seq, d));
    let mut probs = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        let rows = b * seq..(b + 1) * seq;
        for h in 0..heads {
            let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut p = q.dot(&k.t());
            for i in 0..seq {
                let mut row = p.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    row[j] *= scale;
                    max = max.max(row[j]);
                }
                let mut sum = 0.0;
                for j in 0..=i {
                    row[j] = (row[j] - max).exp();
                    sum += row[j];
                }
                for j in 0..seq {
                    row[j] = if j <= i { row[j] / sum } else { 0.0 };
                }
            }
            out.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh])
                .assign(&p.dot(&v));
            probs.push(p);
        }
    }
    (out, probs)
}

fn attention_backward(
    dout: &Array2<f64>,
    qkv: &Array2<f64>,
    probs: &[Array2<f64>],
    batch: usize,
    seq: usize,
    heads: usize,
    d: usize,
) -> Array2<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = Array2::zeros(qkv.raw_dim());
    for b in 0..batch {
        let rows = b * seq..(b + 1) * seq;
        for h in 0..heads {
            let p = &probs[b * heads + h];
            let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let d_o = dout.slice(s![rows.clone(), h * dh..(h + 1) * dh]);

            let dv = p.t().dot(&d_o);
            let dp = d_o.dot(&v.t());
            let mut ds = Array2::zeros((seq, seq));
            for i in 0..seq {
                let pr = p.row(i);
                let dpr = dp.row(i);
                let inner = pr.dot(&dpr);
                for j in 0..=i {
                    ds[[i, j]] = pr[j] * (dpr[j] - inner) * scale;
                }
            }
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh])
                .assign(&dq);
            dqkv.slice_mut(s![rows.clone(), d + h * dh..d + (h + 1) * dh])
                .assign(&dk);
            dqkv.slice_mut(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh])
                .assign(&dv);
        }
    }
    dqkv
}
