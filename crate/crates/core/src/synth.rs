//! Seeded generator for small Wiki-like text: Zipfian unigram frequencies,
//! a sparse word-transition chain, and recurring multi-word phrases that
//! reappear across the train and valid splits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vocab: usize,
    pub train_tokens: usize,
    pub valid_tokens: usize,
    /// Successors per word in the transition chain.
    pub branching: usize,
    pub phrases: usize,
    pub phrase_len: (usize, usize),
    /// Probability of emitting a stored phrase instead of a chain step.
    pub phrase_prob: f64,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab: 500,
            train_tokens: 20_000,
            valid_tokens: 4_000,
            branching: 6,
            phrases: 80,
            phrase_len: (3, 8),
            phrase_prob: 0.15,
            zipf_exponent: 1.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthCorpus {
    pub train: String,
    pub valid: String,
}

fn word(i: usize) -> String {
    const ONSETS: [&str; 12] = ["b", "k", "d", "f", "g", "l", "m", "n", "p", "r", "s", "t"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut s = String::new();
    let mut n = i;
    loop {
        s.push_str(ONSETS[n % ONSETS.len()]);
        n /= ONSETS.len();
        s.push_str(VOWELS[n % VOWELS.len()]);
        n /= VOWELS.len();
        if n == 0 {
            break;
        }
        n -= 1;
    }
    s
}

struct Generator {
    words: Vec<String>,
    successors: Vec<Vec<usize>>,
    phrases: Vec<Vec<usize>>,
    unigram: Zipf<f64>,
    local: Zipf<f64>,
    phrase_pick: Zipf<f64>,
    phrase_prob: f64,
}

impl Generator {
    fn draw(z: &Zipf<f64>, rng: &mut ChaCha8Rng) -> usize {
        z.sample(rng) as usize - 1
    }

    fn emit(&self, rng: &mut ChaCha8Rng, n: usize) -> String {
        let mut out: Vec<&str> = Vec::with_capacity(n + 8);
        let mut cur = Self::draw(&self.unigram, rng);
        while out.len() < n {
            if rng.random_bool(self.phrase_prob) {
                let p = &self.phrases[Self::draw(&self.phrase_pick, rng)];
                out.extend(p.iter().map(|&w| self.words[w].as_str()));
                cur = *p.last().expect("non-empty phrase");
            } else {
                out.push(&self.words[cur]);
                let succ = &self.successors[cur];
                cur = succ[Self::draw(&self.local, rng)];
            }
        }
        out.truncate(n);
        let mut text = String::new();
        for (i, w) in out.iter().enumerate() {
            text.push_str(w);
            text.push(if (i + 1) % 24 == 0 { '\n' } else { ' ' });
        }
        text
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    let (lo, hi) = cfg.phrase_len;
    if cfg.vocab < 2
        || cfg.branching == 0
        || cfg.phrases == 0
        || lo == 0
        || lo > hi
        || !(0.0..=1.0).contains(&cfg.phrase_prob)
        || cfg.zipf_exponent <= 0.0
    {
        return Err(Error::Config("invalid synthetic corpus configuration".into()));
    }
    let zipf = |n: usize| {
        Zipf::new(n as f64, cfg.zipf_exponent).map_err(|e| Error::Config(e.to_string()))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unigram = zipf(cfg.vocab)?;
    let successors = (0..cfg.vocab)
        .map(|_| {
            (0..cfg.branching)
                .map(|_| Generator::draw(&unigram, &mut rng))
                .collect()
        })
        .collect();
    let phrases = (0..cfg.phrases)
        .map(|_| {
            let len = rng.random_range(lo..=hi);
            (0..len).map(|_| Generator::draw(&unigram, &mut rng)).collect()
        })
        .collect();
    let g = Generator {
        words: (0..cfg.vocab).map(word).collect(),
        successors,
        phrases,
        unigram,
        local: zipf(cfg.branching)?,
        phrase_pick: zipf(cfg.phrases)?,
        phrase_prob: cfg.phrase_prob,
    };
    let train = g.emit(&mut rng, cfg.train_tokens);
    let valid = g.emit(&mut rng, cfg.valid_tokens);
    Ok(SynthCorpus { train, valid })
}
