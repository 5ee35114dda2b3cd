//! Word-level vocabulary, split encoding, and contiguous-lane batching.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::digest::{sha256, Digest};
use crate::error::{Error, Result};

pub const UNK_ID: u32 = 0;
pub const UNK_TOKEN: &str = "<unk>";

/// Token/id mapping with training-set frequency counts.
///
/// Id 0 is always `<unk>`. Ids `1..V` are ordered by descending frequency,
/// ties broken lexicographically, so frequency rank is an id-prefix slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    freq: Vec<u64>,
}

impl Vocab {
    pub fn build(raw_text: &str, min_count: u64) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::InvalidArgument("min_count must be >= 1".into()));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut total = 0u64;
        for tok in raw_text.split_whitespace() {
            *counts.entry(tok).or_default() += 1;
            total += 1;
        }
        if total == 0 {
            return Err(Error::EmptyCorpus);
        }

        let mut unk_count = counts.remove(UNK_TOKEN).unwrap_or(0);
        let mut kept: Vec<(&str, u64)> = Vec::with_capacity(counts.len());
        for (tok, c) in counts {
            if c >= min_count {
                kept.push((tok, c));
            } else {
                unk_count += c;
            }
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens = Vec::with_capacity(kept.len() + 1);
        let mut freq = Vec::with_capacity(kept.len() + 1);
        tokens.push(UNK_TOKEN.to_string());
        freq.push(unk_count);
        for (tok, c) in kept {
            tokens.push(tok.to_string());
            freq.push(c);
        }
        Ok(Self::from_parts(tokens, freq))
    }

    fn from_parts(tokens: Vec<String>, freq: Vec<u64>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index, freq }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn freq(&self, id: u32) -> u64 {
        self.freq[id as usize]
    }

    pub fn freqs(&self) -> &[u64] {
        &self.freq
    }

    /// Frequency rank in `0..V`: rank 0 is the most frequent word. `<unk>` is
    /// placed last so that ranks form a bijection with ids.
    pub fn rank(&self, id: u32) -> usize {
        freq_rank(id, self.len())
    }

    pub fn encode(&self, raw_text: &str) -> Vec<u32> {
        raw_text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn encode_split(&self, name: SplitName, raw_text: &str) -> EncodedSplit {
        EncodedSplit {
            name,
            ids: self.encode(raw_text),
            vocab_hash: self.content_hash(),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `token<TAB>count` per line, line order = id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (tok, c) in self.tokens.iter().zip(&self.freq) {
            let _ = writeln!(out, "{tok}\t{c}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut freq = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::Corrupt(format!("vocab line {lineno}: missing tab")))?;
            let count: u64 = count
                .trim()
                .parse()
                .map_err(|_| Error::Corrupt(format!("vocab line {lineno}: bad count")))?;
            if lineno == 0 && tok != UNK_TOKEN {
                return Err(Error::Corrupt(format!("vocab line 0 must be {UNK_TOKEN}")));
            }
            tokens.push(tok.to_string());
            freq.push(count);
        }
        if tokens.is_empty() {
            return Err(Error::Corrupt("empty vocab file".into()));
        }
        Ok(Self::from_parts(tokens, freq))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn content_hash(&self) -> Digest {
        sha256(self.to_tsv().as_bytes())
    }
}

/// Frequency rank of `id` in a frequency-ordered vocabulary of `vocab_size`
/// ids: `id − 1` for words, `vocab_size − 1` for `<unk>`.
pub fn freq_rank(id: u32, vocab_size: usize) -> usize {
    if id == UNK_ID {
        vocab_size - 1
    } else {
        id as usize - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Valid,
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSplit {
    pub name: SplitName,
    pub ids: Vec<u32>,
    pub vocab_hash: Digest,
}

impl EncodedSplit {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One training step: `batch` lanes of `bptt` inputs and shifted targets,
/// stored row-major (lane-major).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub bptt: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    /// Corpus position of each lane's first input token.
    pub lane_starts: Vec<usize>,
}

impl Batch {
    /// Corpus position of the target at `(lane, t)`.
    pub fn target_position(&self, lane: usize, t: usize) -> usize {
        self.lane_starts[lane] + t + 1
    }
}

/// Deterministic contiguous-lane batching.
///
/// The split is cut into `batch` equal contiguous lanes of `len / batch`
/// tokens. Each lane advances `bptt` tokens per step; the trailing remainder
/// of each lane (and of the split) is dropped.
#[derive(Debug, Clone)]
pub struct BatchIter<'a> {
    ids: &'a [u32],
    batch: usize,
    bptt: usize,
    lane_len: usize,
    steps: usize,
    next: usize,
}

pub fn batch_iter(split: &EncodedSplit, batch: usize, bptt: usize) -> Result<BatchIter<'_>> {
    batch_iter_ids(&split.ids, batch, bptt)
}

pub fn batch_iter_ids(ids: &[u32], batch: usize, bptt: usize) -> Result<BatchIter<'_>> {
    if batch == 0 || bptt == 0 {
        return Err(Error::InvalidArgument("batch and bptt must be >= 1".into()));
    }
    let need = batch * (bptt + 1);
    if ids.len() < need {
        return Err(Error::SplitTooShort {
            len: ids.len(),
            need,
            batch,
            bptt,
        });
    }
    let lane_len = ids.len() / batch;
    let steps = (lane_len - 1) / bptt;
    Ok(BatchIter {
        ids,
        batch,
        bptt,
        lane_len,
        steps,
        next: 0,
    })
}

impl BatchIter<'_> {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn total_targets(&self) -> usize {
        self.steps * self.batch * self.bptt
    }

    /// Random access to step `s`; used for shuffled training order.
    pub fn batch_at(&self, s: usize) -> Batch {
        assert!(s < self.steps, "step {s} out of range");
        let n = self.batch * self.bptt;
        let mut inputs = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        let mut lane_starts = Vec::with_capacity(self.batch);
        for lane in 0..self.batch {
            let start = lane * self.lane_len + s * self.bptt;
            lane_starts.push(start);
            inputs.extend_from_slice(&self.ids[start..start + self.bptt]);
            targets.extend_from_slice(&self.ids[start + 1..start + 1 + self.bptt]);
        }
        Batch {
            batch: self.batch,
            bptt: self.bptt,
            inputs,
            targets,
            lane_starts,
        }
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.steps {
            return None;
        }
        let b = self.batch_at(self.next);
        self.next += 1;
        Some(b)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let rest = self.steps - self.next;
        (rest, Some(rest))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}
