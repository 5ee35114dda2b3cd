//! Diagonal-covariance Gaussian mixture fitted by EM.

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::kmeans_pp_init;

pub const VARIANCE_FLOOR: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    /// `m×d`
    pub means: Vec<Vec<f64>>,
    /// `m×d`, each entry ≥ [`VARIANCE_FLOOR`].
    pub variances: Vec<Vec<f64>>,
}

impl GmmModel {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// `ln w_c + ln N(x; μ_c, diag σ²_c)` for every component.
    fn component_log_densities(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for ((&xj, &mu), &var) in x.iter().zip(&self.means[c]).zip(&self.variances[c]) {
                let diff = xj - mu;
                acc += LN_2PI + var.ln() + diff * diff / var;
            }
            *o = self.weights[c].ln() - 0.5 * acc;
        }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-vector `ln Σ_c w_c N(x; μ_c, diag σ²_c)` via log-sum-exp.
pub fn gmm_loglik(model: &GmmModel, vectors: ArrayView2<f64>) -> Result<Vec<f64>> {
    if vectors.ncols() != model.dim() {
        return Err(Error::InvalidArgument(format!(
            "vector dimension {} != model dimension {}",
            vectors.ncols(),
            model.dim()
        )));
    }
    let mut buf = vec![0.0; model.components()];
    Ok(vectors
        .axis_iter(Axis(0))
        .map(|x| {
            let x = x.to_vec();
            model.component_log_densities(&x, &mut buf);
            log_sum_exp(&buf)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub components: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            components: 10,
            seed: 0,
            max_iter: 200,
            tol: 1e-6,
            restarts: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Average log-likelihood after initialization and after every EM step,
    /// for the selected restart.
    pub trace: Vec<f64>,
    pub restart_traces: Vec<Vec<f64>>,
    pub best_restart: usize,
}

/// E-step: average log-likelihood and responsibilities (`n×m`).
fn e_step(model: &GmmModel, data: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let (n, m) = (data.nrows(), model.components());
    let mut resp = Array2::zeros((n, m));
    let mut total = 0.0;
    let mut buf = vec![0.0; m];
    for (i, x) in data.axis_iter(Axis(0)).enumerate() {
        let x = x.to_vec();
        model.component_log_densities(&x, &mut buf);
        let ll = log_sum_exp(&buf);
        total += ll;
        for c in 0..m {
            resp[[i, c]] = (buf[c] - ll).exp();
        }
    }
    (total / n as f64, resp)
}

fn m_step(model: &mut GmmModel, data: ArrayView2<f64>, resp: &Array2<f64>) {
    let (n, d) = data.dim();
    for c in 0..model.components() {
        let rc = resp.column(c);
        let nc: f64 = rc.sum();
        model.weights[c] = nc / n as f64;
        if nc <= f64::MIN_POSITIVE {
            continue;
        }
        let mut mean = vec![0.0; d];
        for (x, &r) in data.axis_iter(Axis(0)).zip(rc) {
            for (m, &v) in mean.iter_mut().zip(x) {
                *m += r * v;
            }
        }
        for m in &mut mean {
            *m /= nc;
        }
        let mut var = vec![0.0; d];
        for (x, &r) in data.axis_iter(Axis(0)).zip(rc) {
            for ((s, &v), &mu) in var.iter_mut().zip(x).zip(&mean) {
                *s += r * (v - mu) * (v - mu);
            }
        }
        for s in &mut var {
            *s = (*s / nc).max(VARIANCE_FLOOR);
        }
        model.means[c] = mean;
        model.variances[c] = var;
    }
}

fn fit_once(data: ArrayView2<f64>, opts: &GmmOptions, seed: u64) -> (GmmModel, Vec<f64>) {
    let (n, d) = data.dim();
    let m = opts.components;
    let flat: Vec<f64> = data.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres = kmeans_pp_init(&flat, d, m, &mut rng);

    let mean_all = data.mean_axis(Axis(0)).expect("non-empty data");
    let global_var: Vec<f64> = (0..d)
        .map(|j| {
            let s: f64 = data.column(j).iter().map(|v| (v - mean_all[j]).powi(2)).sum();
            (s / n as f64).max(VARIANCE_FLOOR)
        })
        .collect();
    let mut model = GmmModel {
        weights: vec![1.0 / m as f64; m],
        means: centres.chunks_exact(d).map(<[f64]>::to_vec).collect(),
        variances: vec![global_var; m],
    };

    let (mut ll, mut resp) = e_step(&model, data);
    let mut trace = vec![ll];
    for _ in 0..opts.max_iter {
        m_step(&mut model, data, &resp);
        let (next, r) = e_step(&model, data);
        trace.push(next);
        resp = r;
        let improved = next - ll;
        ll = next;
        if improved < opts.tol {
            break;
        }
    }
    (model, trace)
}

/// Best of `opts.restarts` EM runs (k-means++ starts) by final average
/// log-likelihood; ties go to the lower restart index. Restarts run in
/// parallel and are merged by index.
pub fn gmm_fit(vectors: ArrayView2<f64>, opts: &GmmOptions) -> Result<GmmFit> {
    let n = vectors.nrows();
    if opts.components == 0 || n < opts.components {
        return Err(Error::InvalidArgument(format!(
            "need at least m={} vectors, got {n}",
            opts.components
        )));
    }
    if vectors.ncols() == 0 {
        return Err(Error::InvalidArgument("vectors have dimension 0".into()));
    }
    let restarts = opts.restarts.max(1);
    let runs: Vec<(GmmModel, Vec<f64>)> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let seed = opts
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(r as u64);
            fit_once(vectors, opts, seed)
        })
        .collect();
    let best = (0..restarts)
        .max_by(|&a, &b| {
            let la = *runs[a].1.last().expect("trace");
            let lb = *runs[b].1.last().expect("trace");
            la.total_cmp(&lb).then(b.cmp(&a))
        })
        .expect("at least one restart");
    let restart_traces = runs.iter().map(|(_, t)| t.clone()).collect();
    let (model, trace) = runs.into_iter().nth(best).expect("best run");
    Ok(GmmFit {
        model,
        trace,
        restart_traces,
        best_restart: best,
    })
}
