//! kNN-LM inference: neighbour weighting, label distributions, interpolation
//! with the LM, and perplexity evaluation / λ sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::EncodedSplit;
use crate::datastore::{NeighborSearch, NeighborSet};
use crate::error::{Error, Result};
use crate::model::{score_tokens, Checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub lambda: f64,
    pub tau: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 16,
            lambda: 0.3,
            tau: 1.0,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        check_lambda(self.lambda)?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )))
    }
}

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution(Vec<f64>);

impl TokenDistribution {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidArgument("negative or NaN probability".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, id: u32) -> f64 {
        self.0[id as usize]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `w_i ∝ exp(−d_i/τ)`, normalized, with the minimum distance subtracted
/// first so the largest exponent is zero.
pub fn neighbor_weights(distances: &[f64], tau: f64) -> Vec<f64> {
    assert!(!distances.is_empty(), "need at least one neighbour");
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = distances.iter().map(|&d| (-(d - min) / tau).exp()).collect();
    let sum: f64 = w.iter().sum();
    for x in &mut w {
        *x /= sum;
    }
    w
}

/// Unsquared L2 distances of a neighbour set.
fn l2_distances(neighbors: &NeighborSet) -> Vec<f64> {
    neighbors.entries.iter().map(|n| n.distance.sqrt()).collect()
}

/// Probability of `target` under the neighbour label distribution, without
/// materializing the full vector.
fn knn_prob_of(neighbors: &NeighborSet, tau: f64, target: u32) -> f64 {
    let w = neighbor_weights(&l2_distances(neighbors), tau);
    neighbors
        .entries
        .iter()
        .zip(&w)
        .filter(|(n, _)| n.value == target)
        .map(|(_, &w)| w)
        .sum()
}

/// Weighted average of the neighbours' one-hot labels.
pub fn knn_distribution(neighbors: &NeighborSet, tau: f64, vocab: usize) -> TokenDistribution {
    assert!(!neighbors.is_empty(), "need at least one neighbour");
    let w = neighbor_weights(&l2_distances(neighbors), tau);
    let mut p = vec![0.0; vocab];
    for (n, w) in neighbors.entries.iter().zip(w) {
        p[n.value as usize] += w;
    }
    TokenDistribution(p)
}

/// `λ·p_knn + (1−λ)·p_lm`.
pub fn interpolate(
    p_lm: &TokenDistribution,
    p_knn: &TokenDistribution,
    lambda: f64,
) -> Result<TokenDistribution> {
    check_lambda(lambda)?;
    if p_lm.len() != p_knn.len() {
        return Err(Error::InvalidArgument("distribution sizes differ".into()));
    }
    Ok(TokenDistribution(
        p_lm.0
            .iter()
            .zip(&p_knn.0)
            .map(|(&a, &b)| mix(a, b, lambda))
            .collect(),
    ))
}

fn mix(p_lm: f64, p_knn: f64, lambda: f64) -> f64 {
    lambda * p_knn + (1.0 - lambda) * p_lm
}

/// Per-position ingredients for interpolated evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalScore {
    pub position: usize,
    pub target: u32,
    /// `-ln p_lm(target)`.
    pub nll_lm: f64,
    /// `p_knn(target)`.
    pub p_knn: f64,
    pub repr: Vec<f64>,
}

impl RetrievalScore {
    /// NLL of the target under the λ-interpolated distribution. At λ = 0 this
    /// is the LM NLL itself, bit for bit.
    pub fn nll_at(&self, lambda: f64) -> f64 {
        if lambda == 0.0 {
            self.nll_lm
        } else {
            -mix((-self.nll_lm).exp(), self.p_knn, lambda).ln()
        }
    }
}

fn check_hashes(
    checkpoint: &Checkpoint,
    search: &dyn NeighborSearch,
    split: &EncodedSplit,
) -> Result<()> {
    if checkpoint.vocab_hash != split.vocab_hash {
        return Err(Error::HashMismatch(format!(
            "{} split and checkpoint use different vocabularies",
            split.name
        )));
    }
    if search.checkpoint_hash() != checkpoint.content_hash()? {
        return Err(Error::HashMismatch(
            "datastore was built from a different checkpoint".into(),
        ));
    }
    if search.dim() != checkpoint.model.config.d_model {
        return Err(Error::InvalidArgument("datastore dimension mismatch".into()));
    }
    Ok(())
}

/// Runs the LM over `split` and retrieves `k` neighbours per position.
/// Queries run in parallel; output is in corpus order.
pub fn retrieval_scores(
    checkpoint: &Checkpoint,
    search: &dyn NeighborSearch,
    split: &EncodedSplit,
    k: usize,
    tau: f64,
) -> Result<Vec<RetrievalScore>> {
    check_hashes(checkpoint, search, split)?;
    let scores = score_tokens(&checkpoint.model, split)?;
    scores
        .into_par_iter()
        .map(|s| {
            let q: Vec<f32> = s.repr.iter().map(|&v| v as f32).collect();
            let nn = search.search(&q, k)?;
            Ok(RetrievalScore {
                position: s.position,
                target: s.target,
                nll_lm: s.nll,
                p_knn: knn_prob_of(&nn, tau, s.target),
                repr: s.repr,
            })
        })
        .collect()
}

fn ppl_from(nlls: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = nlls.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (sum / n as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnEval {
    pub ppl_lm: f64,
    pub ppl_knn_lm: f64,
    pub tokens: usize,
}

pub fn eval_knn_lm(
    checkpoint: &Checkpoint,
    search: &dyn NeighborSearch,
    split: &EncodedSplit,
    cfg: &KnnConfig,
) -> Result<KnnEval> {
    cfg.validate()?;
    let scores = retrieval_scores(checkpoint, search, split, cfg.k, cfg.tau)?;
    Ok(KnnEval {
        ppl_lm: ppl_from(scores.iter().map(|s| s.nll_lm)),
        ppl_knn_lm: ppl_from(scores.iter().map(|s| s.nll_at(cfg.lambda))),
        tokens: scores.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweep {
    pub rows: Vec<(f64, f64)>,
    pub best_lambda: f64,
    pub best_ppl: f64,
    pub ppl_lm: f64,
}

impl LambdaSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,ppl\n");
        for (l, p) in &self.rows {
            out.push_str(&format!("{l},{p}\n"));
        }
        out
    }
}

/// `ppl(λ)` over a grid computed from precomputed retrieval scores. The grid
/// must contain 0 and lie in [0, 1]; ties in the argmin go to the smaller λ.
pub fn sweep_from_scores(scores: &[RetrievalScore], grid: &[f64]) -> Result<LambdaSweep> {
    if grid.is_empty() || !grid.contains(&0.0) {
        return Err(Error::InvalidArgument("lambda grid must contain 0".into()));
    }
    for &l in grid {
        check_lambda(l)?;
    }
    let rows: Vec<(f64, f64)> = grid
        .iter()
        .map(|&l| (l, ppl_from(scores.iter().map(|s| s.nll_at(l)))))
        .collect();
    let (best_lambda, best_ppl) = rows
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .expect("non-empty grid");
    Ok(LambdaSweep {
        ppl_lm: ppl_from(scores.iter().map(|s| s.nll_lm)),
        rows,
        best_lambda,
        best_ppl,
    })
}

pub fn sweep_lambda(
    checkpoint: &Checkpoint,
    search: &dyn NeighborSearch,
    split: &EncodedSplit,
    k: usize,
    tau: f64,
    grid: &[f64],
) -> Result<LambdaSweep> {
    KnnConfig { k, lambda: 0.0, tau }.validate()?;
    let scores = retrieval_scores(checkpoint, search, split, k, tau)?;
    sweep_from_scores(&scores, grid)
}

/// Evenly spaced grid `lo, lo+step, …` up to `hi` inclusive (within rounding).
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn lambda_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || hi < lo {
        return Err(Error::InvalidArgument(format!(
            "bad grid {lo}:{hi}:{step}"
        )));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| {
            let v = lo + i as f64 * step;
            // snap to a short decimal so 0.15000000000000002 prints as 0.15
            let snapped = (v * 1e9).round() / 1e9;
            snapped.min(hi)
        })
        .collect())
}

/// Parses `lo:hi:step` or a comma-separated list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("cannot parse grid {text:?}"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() == 3 {
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        return lambda_grid(nums[0], nums[1], nums[2]);
    }
    text.split(',')
        .map(|p| p.trim().parse().map_err(|_| bad()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::Neighbor;
    use proptest::prelude::*;

    fn nset(pairs: &[(f64, u32)]) -> NeighborSet {
        NeighborSet {
            entries: pairs
                .iter()
                .enumerate()
                .map(|(i, &(d, v))| Neighbor {
                    index: i,
                    distance: d,
                    value: v,
                })
                .collect(),
        }
    }

    #[test]
    fn equal_distances_equal_weights() {
        let w = neighbor_weights(&[0.0, 0.0, 0.0], 1.0);
        for x in w {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ln3_gives_three_to_one() {
        let w = neighbor_weights(&[0.0, 3f64.ln()], 1.0);
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn huge_distances_stay_finite() {
        assert_eq!(neighbor_weights(&[1000.0, 1000.0], 1.0), vec![0.5, 0.5]);
        let w = neighbor_weights(&[1e6, 2e6, 1e6 + 1.0], 1.0);
        assert!(w.iter().all(|x| x.is_finite()));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn label_distribution_examples() {
        let p = knn_distribution(&nset(&[(1.0, 0), (1.0, 0), (1.0, 1)]), 1.0, 3);
        assert!((p.get(0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.get(1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.get(2), 0.0);
        let p = knn_distribution(&nset(&[(4.0, 2)]), 1.0, 3);
        assert_eq!(p.probs(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn interpolation_examples() {
        let lm = TokenDistribution::new(vec![0.5, 0.5]).unwrap();
        let kn = TokenDistribution::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(interpolate(&lm, &kn, 0.0).unwrap(), lm);
        assert_eq!(interpolate(&lm, &kn, 1.0).unwrap(), kn);
        let mid = interpolate(&lm, &kn, 0.3).unwrap();
        assert!((mid.get(0) - 0.65).abs() < 1e-15 && (mid.get(1) - 0.35).abs() < 1e-15);
        assert!(interpolate(&lm, &kn, 1.5).is_err());
        assert!(interpolate(&lm, &kn, -0.1).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(TokenDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(TokenDistribution::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn grid_arithmetic() {
        let g = lambda_grid(0.0, 1.0, 0.05).unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g[3], 0.15);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert_eq!(parse_grid("0:1:0.05").unwrap(), g);
        assert_eq!(parse_grid("0,0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_grid("a:b").is_err());
    }

    #[test]
    fn sweep_argmin_prefers_smaller_lambda() {
        // p_knn == p_lm makes every λ tie
        let s = RetrievalScore {
            position: 1,
            target: 0,
            nll_lm: 0.5f64,
            p_knn: (-0.5f64).exp(),
            repr: vec![],
        };
        let sw = sweep_from_scores(&[s], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(sw.best_lambda, 0.0);
        assert!(sweep_from_scores(&[], &[0.5]).is_err());
    }

    proptest! {
        #[test]
        fn weights_shift_invariant(d in proptest::collection::vec(0.0f64..50.0, 1..10), c in 0.0f64..1e3, tau in 0.1f64..10.0) {
            let a = neighbor_weights(&d, tau);
            let shifted: Vec<f64> = d.iter().map(|x| x + c).collect();
            let b = neighbor_weights(&shifted, tau);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn label_distribution_matches_accumulation(
            pairs in proptest::collection::vec((0.0f64..20.0, 0u32..6), 1..12),
            tau in 0.2f64..5.0,
        ) {
            let ns = nset(&pairs);
            let p = knn_distribution(&ns, tau, 6);
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // independent oracle: unnormalized exp weights per label
            let mut acc = [0.0f64; 6];
            let mut total = 0.0;
            let dmin = pairs.iter().map(|p| p.0.sqrt()).fold(f64::INFINITY, f64::min);
            for &(d, v) in &pairs {
                let w = (-(d.sqrt() - dmin) / tau).exp();
                acc[v as usize] += w;
                total += w;
            }
            for v in 0..6u32 {
                prop_assert!((p.get(v) - acc[v as usize] / total).abs() < 1e-12);
                if !pairs.iter().any(|&(_, l)| l == v) {
                    prop_assert_eq!(p.get(v), 0.0);
                }
                prop_assert!((knn_prob_of(&ns, tau, v) - p.get(v)).abs() < 1e-15);
            }
        }
    }
}
