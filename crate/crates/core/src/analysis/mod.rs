//! Representation diagnostics: frequency/loss histograms, median score
//! splits over frequent words, and GMM clustering of context vectors.

mod gmm;
mod report;

pub use gmm::{gmm_fit, gmm_loglik, GmmFit, GmmModel, GmmOptions, VARIANCE_FLOOR};
pub use report::{clustering_report, ClusteringReport, LoglikHistogram, ModelReport, ReportOptions, ReportRow};

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{freq_rank, EncodedSplit};
use crate::datastore::NeighborSearch;
use crate::error::{Error, Result};
use crate::knn::{retrieval_scores, KnnConfig};
use crate::model::{score_tokens, Checkpoint};

#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub position: usize,
    pub target: u32,
    pub rank: usize,
    pub nll: f64,
    pub repr: Vec<f64>,
}

#[derive(Clone, Copy)]
pub enum RecordMode<'a> {
    Lm,
    KnnLm {
        search: &'a dyn NeighborSearch,
        config: KnnConfig,
    },
}

/// One record per evaluated position of `split`, in corpus order.
pub fn collect_records(
    checkpoint: &Checkpoint,
    split: &EncodedSplit,
    mode: RecordMode<'_>,
) -> Result<Vec<TokenRecord>> {
    if checkpoint.vocab_hash != split.vocab_hash {
        return Err(Error::HashMismatch(format!(
            "{} split and checkpoint use different vocabularies",
            split.name
        )));
    }
    let vocab = checkpoint.model.config.vocab_size;
    match mode {
        RecordMode::Lm => Ok(score_tokens(&checkpoint.model, split)?
            .into_iter()
            .map(|s| TokenRecord {
                position: s.position,
                target: s.target,
                rank: freq_rank(s.target, vocab),
                nll: s.nll,
                repr: s.repr,
            })
            .collect()),
        RecordMode::KnnLm { search, config } => {
            config.validate()?;
            Ok(retrieval_scores(checkpoint, search, split, config.k, config.tau)?
                .into_iter()
                .map(|s| TokenRecord {
                    position: s.position,
                    target: s.target,
                    rank: freq_rank(s.target, vocab),
                    nll: s.nll_at(config.lambda),
                    repr: s.repr,
                })
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqLossHistogram {
    /// `n_buckets + 1` rank edges; bucket `b` covers `edges[b]..edges[b+1]`.
    pub edges: Vec<usize>,
    pub counts: Vec<usize>,
    pub loss: Vec<f64>,
}

impl FreqLossHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket_lo,bucket_hi,count,loss\n");
        for b in 0..self.counts.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.edges[b],
                self.edges[b + 1],
                self.counts[b],
                self.loss[b]
            );
        }
        out
    }
}

/// Equal-width buckets over frequency rank `0..vocab_size`, most frequent
/// words leftmost.
pub fn freq_loss_histogram(
    records: &[TokenRecord],
    n_buckets: usize,
    vocab_size: usize,
) -> Result<FreqLossHistogram> {
    if records.is_empty() || n_buckets == 0 || vocab_size == 0 {
        return Err(Error::InvalidArgument(
            "histogram needs records, buckets and a vocabulary".into(),
        ));
    }
    let edges: Vec<usize> = (0..=n_buckets).map(|b| b * vocab_size / n_buckets).collect();
    let mut counts = vec![0; n_buckets];
    let mut loss = vec![0.0; n_buckets];
    for r in records {
        if r.rank >= vocab_size {
            return Err(Error::InvalidArgument(format!(
                "rank {} outside vocabulary of {vocab_size}",
                r.rank
            )));
        }
        let b = edges.partition_point(|&e| e <= r.rank) - 1;
        counts[b] += 1;
        loss[b] += r.nll;
    }
    Ok(FreqLossHistogram { edges, counts, loss })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSplit {
    pub high: Vec<TokenRecord>,
    pub low: Vec<TokenRecord>,
    pub threshold: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Keeps records whose target rank is below `top_f` and splits them at the
/// median NLL: strictly above goes to `high`, the rest to `low`.
pub fn split_scores(records: &[TokenRecord], top_f: usize) -> Result<ScoreSplit> {
    let frequent: Vec<&TokenRecord> = records.iter().filter(|r| r.rank < top_f).collect();
    if frequent.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 records with rank < {top_f}, got {}",
            frequent.len()
        )));
    }
    let nlls: Vec<f64> = frequent.iter().map(|r| r.nll).collect();
    let threshold = median(&nlls);
    let (high, low) = frequent
        .into_iter()
        .cloned()
        .partition(|r| r.nll > threshold);
    Ok(ScoreSplit { high, low, threshold })
}

pub(crate) fn reprs_matrix(records: &[&TokenRecord]) -> Result<Array2<f64>> {
    let d = records.first().map_or(0, |r| r.repr.len());
    let flat: Vec<f64> = records.iter().flat_map(|r| r.repr.iter().copied()).collect();
    Array2::from_shape_vec((records.len(), d), flat)
        .map_err(|e| Error::InvalidArgument(format!("ragged representations: {e}")))
}
