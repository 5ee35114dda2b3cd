//! Side-by-side GMM clustering report for two checkpoints.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::gmm::{gmm_fit, gmm_loglik, GmmOptions};
use super::{collect_records, reprs_matrix, split_scores, RecordMode, TokenRecord};
use crate::corpus::EncodedSplit;
use crate::datastore::NeighborSearch;
use crate::error::{Error, Result};
use crate::knn::KnnConfig;
use crate::model::Checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub knn: KnnConfig,
    pub top_f: usize,
    pub gmm: GmmOptions,
    pub hist_bins: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            knn: KnnConfig::default(),
            top_f: 100,
            gmm: GmmOptions::default(),
            hist_bins: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub position: usize,
    pub rank: usize,
    pub nll: f64,
    pub high: bool,
    pub loglik: f64,
}

/// Shared-edge log-likelihood histograms for the two score groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoglikHistogram {
    pub edges: Vec<f64>,
    pub high: Vec<usize>,
    pub low: Vec<usize>,
}

impl LoglikHistogram {
    fn build(rows: &[ReportRow], bins: usize) -> Self {
        let lo = rows.iter().map(|r| r.loglik).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r.loglik).fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|b| lo + b as f64 * width).collect();
        let mut high = vec![0; bins];
        let mut low = vec![0; bins];
        for r in rows {
            let b = (((r.loglik - lo) / width) as usize).min(bins - 1);
            if r.high {
                high[b] += 1;
            } else {
                low[b] += 1;
            }
        }
        Self { edges, high, low }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,high,low\n");
        for b in 0..self.high.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.edges[b],
                self.edges[b + 1],
                self.high[b],
                self.low[b]
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub threshold: f64,
    pub n_high: usize,
    pub n_low: usize,
    pub mean_loglik_high: f64,
    pub mean_loglik_low: f64,
    /// `mean_loglik_low − mean_loglik_high`
    pub gap: f64,
    pub gmm_avg_loglik: f64,
    pub gmm_iterations: usize,
    pub histogram: LoglikHistogram,
    #[serde(skip)]
    pub rows: Vec<ReportRow>,
}

impl ModelReport {
    /// Per-record CSV: `rank,nll,group,loglik`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,nll,group,loglik\n");
        for r in &self.rows {
            let group = if r.high { "high" } else { "low" };
            let _ = writeln!(out, "{},{},{group},{}", r.rank, r.nll, r.loglik);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub options: ReportOptions,
    pub models: Vec<ModelReport>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn model_report(
    name: &str,
    checkpoint: &Checkpoint,
    search: &dyn NeighborSearch,
    split: &EncodedSplit,
    opts: &ReportOptions,
) -> Result<ModelReport> {
    let records = collect_records(
        checkpoint,
        split,
        RecordMode::KnnLm {
            search,
            config: opts.knn,
        },
    )?;
    let scores = split_scores(&records, opts.top_f)?;
    let mut grouped: Vec<(&TokenRecord, bool)> = scores
        .high
        .iter()
        .map(|r| (r, true))
        .chain(scores.low.iter().map(|r| (r, false)))
        .collect();
    grouped.sort_by_key(|(r, _)| r.position);
    let refs: Vec<&TokenRecord> = grouped.iter().map(|(r, _)| *r).collect();
    let data = reprs_matrix(&refs)?;
    let fit = gmm_fit(data.view(), &opts.gmm)?;
    let ll = gmm_loglik(&fit.model, data.view())?;
    let rows: Vec<ReportRow> = grouped
        .iter()
        .zip(&ll)
        .map(|((r, high), &loglik)| ReportRow {
            position: r.position,
            rank: r.rank,
            nll: r.nll,
            high: *high,
            loglik,
        })
        .collect();
    let mean_loglik_high = mean(rows.iter().filter(|r| r.high).map(|r| r.loglik));
    let mean_loglik_low = mean(rows.iter().filter(|r| !r.high).map(|r| r.loglik));
    Ok(ModelReport {
        name: name.to_string(),
        threshold: scores.threshold,
        n_high: scores.high.len(),
        n_low: scores.low.len(),
        mean_loglik_high,
        mean_loglik_low,
        gap: mean_loglik_low - mean_loglik_high,
        gmm_avg_loglik: *fit.trace.last().expect("trace"),
        gmm_iterations: fit.trace.len() - 1,
        histogram: LoglikHistogram::build(&rows, opts.hist_bins),
        rows,
    })
}

/// Fits a GMM per checkpoint on its own frequent-word representations and
/// compares log-likelihoods of the high- and low-score groups. Each
/// checkpoint is paired with the datastore built from it.
pub fn clustering_report(
    a: (&str, &Checkpoint, &dyn NeighborSearch),
    b: (&str, &Checkpoint, &dyn NeighborSearch),
    split: &EncodedSplit,
    opts: &ReportOptions,
) -> Result<ClusteringReport> {
    if a.1.vocab_hash != b.1.vocab_hash {
        return Err(Error::HashMismatch(
            "checkpoints were trained on different vocabularies".into(),
        ));
    }
    if opts.hist_bins == 0 {
        return Err(Error::InvalidArgument("hist_bins must be >= 1".into()));
    }
    let models = [a, b]
        .into_iter()
        .map(|(name, ckpt, search)| model_report(name, ckpt, search, split, opts))
        .collect::<Result<_>>()?;
    Ok(ClusteringReport {
        options: opts.clone(),
        models,
    })
}
