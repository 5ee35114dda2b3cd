//! Auxiliary losses on the final-layer context vectors.
//!
//! * [`l2_penalty`]: `ω · Σ_j ‖r_j‖²`.
//! * [`moco_penalty`]: `ω · Σ_j Σ_i ‖sg(Q_i^{w_j}) − r_j‖²`, where `Q^{w}` is a
//!   FIFO of the most recent context vectors for target word `w`, produced by
//!   a momentum copy of the model. Queue entries are constants: the penalty
//!   only returns a gradient for `r`.
//!
//! Both are plain sums over the batch (and queue), not means.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Params, Transformer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub omega: f64,
    pub queue_len: usize,
    pub momentum: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            omega: 0.0,
            queue_len: 4,
            momentum: 0.99,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::Config(format!("omega must be >= 0, got {}", self.omega)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1], got {}",
                self.momentum
            )));
        }
        if self.queue_len == 0 {
            return Err(Error::Config("queue_len must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn l2_penalty(reprs: ArrayView2<f64>, omega: f64) -> f64 {
    omega * reprs.iter().map(|v| v * v).sum::<f64>()
}

/// Penalty value and its gradient `2ω·r` w.r.t. `reprs`.
pub fn l2_penalty_grad(reprs: ArrayView2<f64>, omega: f64) -> (f64, Array2<f64>) {
    (l2_penalty(reprs, omega), reprs.mapv(|v| 2.0 * omega * v))
}

/// Per-word ring buffers of at most `capacity` vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueBank {
    capacity: usize,
    dim: usize,
    buffers: Vec<VecDeque<Vec<f64>>>,
}

impl QueueBank {
    pub fn new(vocab_size: usize, dim: usize, capacity: usize) -> Self {
        assert!(capacity >= 1, "queue capacity must be >= 1");
        Self {
            capacity,
            dim,
            buffers: vec![VecDeque::new(); vocab_size],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self, id: u32) -> usize {
        self.buffers[id as usize].len()
    }

    pub fn is_empty(&self, id: u32) -> bool {
        self.buffers[id as usize].is_empty()
    }

    pub fn entries(&self, id: u32) -> impl Iterator<Item = &[f64]> {
        self.buffers[id as usize].iter().map(Vec::as_slice)
    }

    /// Appends `v` to the queue of `id`, evicting the oldest entry when full.
    pub fn push(&mut self, id: u32, v: &[f64]) {
        assert_eq!(v.len(), self.dim, "queue vector dimension");
        debug_assert!(v.iter().all(|x| x.is_finite()));
        let buf = &mut self.buffers[id as usize];
        if buf.len() == self.capacity {
            buf.pop_front();
        }
        buf.push_back(v.to_vec());
    }

    /// Replaces every stored entry with the zero vector (fill counts kept).
    pub fn zero_entries(&mut self) {
        for buf in &mut self.buffers {
            for v in buf.iter_mut() {
                v.fill(0.0);
            }
        }
    }
}

/// Sum over positions `j` and the stored entries of `Q^{targets[j]}`.
/// Words with empty queues contribute nothing.
pub fn moco_penalty(
    queues: &QueueBank,
    targets: &[u32],
    reprs: ArrayView2<f64>,
    omega: f64,
) -> f64 {
    assert_eq!(targets.len(), reprs.nrows(), "targets/reprs length");
    let mut total = 0.0;
    for (r, &w) in reprs.axis_iter(Axis(0)).zip(targets) {
        for q in queues.entries(w) {
            total += q
                .iter()
                .zip(r.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    omega * total
}

/// Penalty value and its gradient w.r.t. `reprs`:
/// `2ω (n_j·r_j − Σ_i Q_i^{w_j})` with `n_j` the fill count of the queue.
pub fn moco_penalty_grad(
    queues: &QueueBank,
    targets: &[u32],
    reprs: ArrayView2<f64>,
    omega: f64,
) -> (f64, Array2<f64>) {
    let value = moco_penalty(queues, targets, reprs, omega);
    let mut grad = Array2::zeros(reprs.raw_dim());
    for ((mut g, r), &w) in grad
        .axis_iter_mut(Axis(0))
        .zip(reprs.axis_iter(Axis(0)))
        .zip(targets)
    {
        for q in queues.entries(w) {
            Zip::from(&mut g)
                .and(&r)
                .and(q)
                .for_each(|g, &r, &q| *g += 2.0 * omega * (r - q));
        }
    }
    (value, grad)
}

/// `θ_target ← m·θ_target + (1−m)·θ_online`, elementwise.
pub fn momentum_update(target: &mut Params, online: &Params, m: f64) {
    assert!(target.same_shapes(online), "momentum encoder shape mismatch");
    for (t, o) in target.tensors.iter_mut().zip(&online.tensors) {
        for (a, &b) in t.data.iter_mut().zip(&o.data) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
}

/// Slowly-updated copy of the LM whose outputs fill the queues.
#[derive(Debug, Clone)]
pub struct MomentumEncoder {
    pub model: Transformer,
    pub momentum: f64,
}

impl MomentumEncoder {
    /// Starts as an exact copy of `online`.
    pub fn new(online: &Transformer, momentum: f64) -> Self {
        Self {
            model: online.clone(),
            momentum,
        }
    }

    pub fn update(&mut self, online: &Params) {
        momentum_update(&mut self.model.params, online, self.momentum);
    }
}
