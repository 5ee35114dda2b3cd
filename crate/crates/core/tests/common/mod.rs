#![allow(dead_code)]

use knnlm::corpus::{EncodedSplit, SplitName, Vocab};
use knnlm::model::{
    ce_loss, ModelConfig, OptimConfig, Params, TrainConfig, Transformer, ObjectiveKind,
};
use knnlm::regularizers::{l2_penalty, moco_penalty, QueueBank, RegConfig};
use ndarray::Array2;

/// Small config used for finite-difference checks.
pub fn gradcheck_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        context_len: 6,
        vocab_size: vocab,
        tie_embeddings: true,
        seed: 3,
    }
}

pub enum Penalty<'a> {
    None,
    L2(f64),
    Moco(&'a QueueBank, f64),
}

/// Scalar objective evaluated by a plain forward pass.
pub fn objective(
    model: &Transformer,
    inputs: &[u32],
    targets: &[u32],
    batch: usize,
    seq: usize,
    penalty: &Penalty,
) -> f64 {
    let (logits, cache) = model.forward_cached(inputs, batch, seq).unwrap();
    let ce = ce_loss(logits.view(), targets);
    ce + match penalty {
        Penalty::None => 0.0,
        Penalty::L2(w) => l2_penalty(cache.reprs.view(), *w),
        Penalty::Moco(q, w) => moco_penalty(q, targets, cache.reprs.view(), *w),
    }
}

/// Fourth-order central differences for every scalar parameter:
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
pub fn numeric_grads(
    model: &Transformer,
    inputs: &[u32],
    targets: &[u32],
    batch: usize,
    seq: usize,
    penalty: &Penalty,
    eps: f64,
) -> Params {
    let mut probe = model.clone();
    let mut out = model.params.zeros_like();
    for ti in 0..probe.params.tensors.len() {
        for i in 0..probe.params.tensors[ti].data.len() {
            let orig = probe.params.tensors[ti].data[i];
            let mut at = |delta: f64| {
                probe.params.tensors[ti].data[i] = orig + delta;
                objective(&probe, inputs, targets, batch, seq, penalty)
            };
            let (p1, m1, p2, m2) = (at(eps), at(-eps), at(2.0 * eps), at(-2.0 * eps));
            probe.params.tensors[ti].data[i] = orig;
            out.tensors[ti].data[i] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
        }
    }
    out
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over all parameters, with the
/// name of the worst tensor.
pub fn max_rel_error(analytic: &Params, numeric: &Params, floor: f64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (a, n) in analytic.tensors.iter().zip(&numeric.tensors) {
        for (&x, &y) in a.data.iter().zip(&n.data) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, a.name.clone());
            }
        }
    }
    worst
}

pub fn add_params(a: &Params, b: &Params) -> Params {
    let mut out = a.clone();
    for (o, t) in out.tensors.iter_mut().zip(&b.tensors) {
        for (x, y) in o.data.iter_mut().zip(&t.data) {
            *x += y;
        }
    }
    out
}

pub fn zero_logit_grad(rows: usize, vocab: usize) -> Array2<f64> {
    Array2::zeros((rows, vocab))
}

/// Deterministic pseudo-random token ids.
pub fn lcg_ids(n: usize, vocab: u32, seed: u64) -> Vec<u32> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) % vocab as u64) as u32
        })
        .collect()
}

pub fn splits_from_text(train: &str, valid: &str) -> (Vocab, EncodedSplit, EncodedSplit) {
    let vocab = Vocab::build(train, 1).unwrap();
    let tr = vocab.encode_split(SplitName::Train, train);
    let va = vocab.encode_split(SplitName::Valid, valid);
    (vocab, tr, va)
}

pub fn toy_train_config(vocab: usize, context: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            context_len: context,
            vocab_size: vocab,
            tie_embeddings: true,
            seed: 0,
        },
        objective: ObjectiveKind::Ce,
        reg: RegConfig::default(),
        optim: OptimConfig {
            lr: 1e-2,
            warmup_steps: 2,
            ..Default::default()
        },
        batch_size: 2,
        epochs: 2,
        seed: 11,
    }
}

/// Uniform keys in `[-1, 1)^dim` from a seeded ChaCha stream.
pub fn uniform_keys(n: usize, dim: usize, seed: u64) -> Vec<f32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Keys drawn around `centres` random centres with isotropic noise `spread`.
pub fn clustered_keys(n: usize, dim: usize, centres: usize, spread: f32, seed: u64) -> Vec<f32> {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mu: Vec<f32> = (0..centres * dim).map(|_| rng.random_range(-4.0f32..4.0)).collect();
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let c = rng.random_range(0..centres);
        for j in 0..dim {
            let z: f32 = StandardNormal.sample(&mut rng);
            out.push(mu[c * dim + j] + spread * z);
        }
    }
    out
}

/// Full-sort brute force: every key's distance in f64, sorted by
/// `(distance, index)`, first `k` indices.
pub fn brute_force(keys: &[f32], dim: usize, query: &[f32], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = keys
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, key)| {
            let d = key
                .iter()
                .zip(query)
                .fold(0.0f64, |acc, (&a, &b)| acc + (a as f64 - b as f64).powi(2));
            (i, d)
        })
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Synthetic Wiki-like splits plus a vocabulary built on the train split.
pub fn synth_splits(train_tokens: usize, valid_tokens: usize, seed: u64) -> (Vocab, EncodedSplit, EncodedSplit) {
    let c = knnlm::synth::generate(&knnlm::synth::SynthConfig {
        train_tokens,
        valid_tokens,
        seed,
        ..Default::default()
    })
    .unwrap();
    splits_from_text(&c.train, &c.valid)
}

/// Config for the small pipelines used by the datastore/knn/analysis tests.
pub fn small_train_config(vocab: usize, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 32,
            d_ff: 64,
            context_len: 16,
            vocab_size: vocab,
            tie_embeddings: true,
            seed: 0,
        },
        objective: ObjectiveKind::Ce,
        reg: RegConfig::default(),
        optim: OptimConfig {
            lr: 3e-3,
            warmup_steps: 20,
            ..Default::default()
        },
        batch_size: 8,
        epochs,
        seed,
    }
}

pub fn train(config: &TrainConfig, vocab: &Vocab, train: &EncodedSplit) -> knnlm::model::Checkpoint {
    knnlm::model::train_run(config, vocab.content_hash(), train, None, |_, _| Ok(())).unwrap()
}

/// Tokens following a fixed random cycle over `period` words, so every
/// token determines its successor.
pub fn cycle_text(period: usize, len: usize, seed: u64) -> String {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..period).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    (0..len)
        .map(|i| format!("t{}", order[i % period]))
        .collect::<Vec<_>>()
        .join(" ")
}
