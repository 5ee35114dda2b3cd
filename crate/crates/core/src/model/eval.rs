use ndarray::Axis;
use rayon::prelude::*;

use super::loss::token_nll;
use super::Transformer;
use crate::corpus::{batch_iter_ids, EncodedSplit};
use crate::error::{Error, Result};

/// Per-position evaluation output under a model.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScore {
    /// Corpus position of the predicted token.
    pub position: usize,
    pub target: u32,
    /// `-ln p_lm(target)`.
    pub nll: f64,
    /// Context vector used to predict `target`.
    pub repr: Vec<f64>,
}

/// Window length for non-overlapping evaluation: the model context, shrunk
/// for splits shorter than one full window.
pub fn eval_window(split_len: usize, context_len: usize) -> Result<usize> {
    if split_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "split of {split_len} tokens has nothing to predict"
        )));
    }
    Ok(context_len.min(split_len - 1))
}

/// Scores every predictable position of `split` using non-overlapping
/// windows (a single lane of [`crate::corpus::batch_iter`]). Output is in
/// corpus order. Windows are evaluated in parallel; the result does not
/// depend on the thread count.
pub fn score_tokens(model: &Transformer, split: &EncodedSplit) -> Result<Vec<TokenScore>> {
    let bptt = eval_window(split.len(), model.config.context_len)?;
    let windows: Vec<_> = batch_iter_ids(&split.ids, 1, bptt)?.collect();
    let scored: Vec<Result<Vec<TokenScore>>> = windows
        .par_iter()
        .map(|b| {
            let (logits, cache) = model.forward_cached(&b.inputs, 1, bptt)?;
            Ok(logits
                .axis_iter(Axis(0))
                .zip(cache.reprs.axis_iter(Axis(0)))
                .enumerate()
                .map(|(t, (row, r))| TokenScore {
                    position: b.target_position(0, t),
                    target: b.targets[t],
                    nll: token_nll(row, b.targets[t]),
                    repr: r.to_vec(),
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(windows.len() * bptt);
    for s in scored {
        out.extend(s?);
    }
    Ok(out)
}

/// `exp(mean NLL)` over non-overlapping windows, summed sequentially.
pub fn perplexity(model: &Transformer, split: &EncodedSplit) -> Result<f64> {
    let scores = score_tokens(model, split)?;
    let total: f64 = scores.iter().map(|s| s.nll).sum();
    Ok((total / scores.len() as f64).exp())
}

/// Mean squared L2 norm of the context vectors over `split`.
pub fn mean_repr_sq_norm(model: &Transformer, split: &EncodedSplit) -> Result<f64> {
    let scores = score_tokens(model, split)?;
    let total: f64 = scores
        .iter()
        .map(|s| s.repr.iter().map(|v| v * v).sum::<f64>())
        .sum();
    Ok(total / scores.len() as f64)
}
