use std::path::Path;

use anyhow::{Context, Result};
use serde_json::json;

use knnlm::analysis::{clustering_report, collect_records, freq_loss_histogram, RecordMode};
use knnlm::corpus::{EncodedSplit, SplitName, Vocab};
use knnlm::datastore::{self, ivf_build, Datastore, IvfIndex, NeighborSearch};
use knnlm::digest::to_hex;
use knnlm::knn::{eval_knn_lm, parse_grid};
use knnlm::model::{train_run, Checkpoint};
use knnlm::synth::generate;

use crate::provenance::{read_input, Record};
use crate::settings::Settings;
use crate::Usage;

fn utf8(role: &str, bytes: Vec<u8>) -> Result<String> {
    String::from_utf8(bytes).with_context(|| format!("{role} is not valid UTF-8"))
}

fn load_vocab(s: &Settings, rec: &mut Record) -> Result<Vocab> {
    let bytes = read_input("vocab", &s.vocab_path())?;
    rec.input("vocab", &bytes);
    Ok(Vocab::from_tsv(&utf8("vocab", bytes)?)?)
}

fn load_split(role: &str, path: &Path, name: SplitName, vocab: &Vocab, rec: &mut Record) -> Result<EncodedSplit> {
    let bytes = read_input(role, path)?;
    rec.input(role, &bytes);
    Ok(vocab.encode_split(name, &utf8(role, bytes)?))
}

fn load_checkpoint(role: &str, path: &Path, vocab: &Vocab, rec: &mut Record) -> Result<Checkpoint> {
    let bytes = read_input(role, path)?;
    rec.input(role, &bytes);
    let ckpt = Checkpoint::from_bytes(&bytes).with_context(|| format!("reading {role}"))?;
    if ckpt.vocab_hash != vocab.content_hash() {
        return Err(knnlm::Error::HashMismatch(format!(
            "{role} {} was trained with a different vocabulary",
            path.display()
        ))
        .into());
    }
    Ok(ckpt)
}

fn load_datastore(role: &str, path: &Path, rec: &mut Record) -> Result<Datastore> {
    let bytes = read_input(role, path)?;
    rec.input(role, &bytes);
    Datastore::from_bytes(&bytes).with_context(|| format!("reading {role}"))
}

/// Exact search over the datastore, or IVF search when `--index` is given.
struct Retrieval {
    store: Datastore,
    index: Option<IvfIndex>,
    nprobe: Option<usize>,
}

impl Retrieval {
    fn load(s: &Settings, rec: &mut Record) -> Result<Self> {
        let store = load_datastore("datastore", &s.datastore_path(), rec)?;
        let index = match &s.index {
            Some(p) => {
                let bytes = read_input("index", p)?;
                rec.input("index", &bytes);
                Some(IvfIndex::from_bytes(&bytes).context("reading index")?)
            }
            None => None,
        };
        Ok(Self {
            store,
            index,
            nprobe: s.nprobe,
        })
    }

    fn searcher(&self) -> Result<Box<dyn NeighborSearch + '_>> {
        Ok(match &self.index {
            Some(index) => {
                let nprobe = self.nprobe.unwrap_or(index.nprobe);
                Box::new(index.searcher(&self.store, nprobe)?)
            }
            None => Box::new(&self.store),
        })
    }

    fn kind(&self) -> &'static str {
        if self.index.is_some() {
            "ivf"
        } else {
            "exact"
        }
    }
}

pub fn synth_corpus(s: &Settings) -> Result<()> {
    let cfg = s.synth_config();
    let corpus = generate(&cfg)?;
    let out = s.out_dir();
    let mut rec = Record::default();
    rec.write(&out, "train.txt", corpus.train.as_bytes())?;
    rec.write(&out, "valid.txt", corpus.valid.as_bytes())?;
    rec.finish(&out, "synth_metrics.json", "synth-corpus", s.seed(), json!({ "synth": cfg }))
}

pub fn train(s: &Settings) -> Result<()> {
    let out = s.out_dir();
    let mut rec = Record::default();
    let train_path = s.required(&s.train, "train")?;
    let train_text = utf8("train split", read_input("train split", train_path)?)?;
    rec.input("train", train_text.as_bytes());

    let vocab = match &s.vocab {
        Some(_) => load_vocab(s, &mut rec)?,
        None => {
            let v = Vocab::build(&train_text, s.min_count.unwrap_or(1))?;
            rec.write(&out, "vocab.tsv", v.to_tsv().as_bytes())?;
            v
        }
    };
    let train = vocab.encode_split(SplitName::Train, &train_text);
    let valid = match &s.valid {
        Some(p) => Some(load_split("valid", p, SplitName::Valid, &vocab, &mut rec)?),
        None => None,
    };

    let cfg = s.train_config(vocab.len());
    cfg.validate()?;
    let provenance = rec.inputs.clone();
    let ckpt_path = out.join("model.ckpt");
    let ckpt = train_run(&cfg, vocab.content_hash(), &train, valid.as_ref(), |ckpt, stats| {
        eprintln!(
            "epoch {} steps {} train_loss {:.4} train_ppl {:.3} valid_ppl {}",
            stats.epoch,
            stats.steps,
            stats.train_loss,
            stats.train_ppl,
            stats.valid_ppl.map_or("-".to_string(), |p| format!("{p:.3}"))
        );
        let mut ckpt = ckpt.clone();
        ckpt.provenance = provenance.clone();
        ckpt.save(&ckpt_path)?;
        Ok(())
    })?;
    let mut ckpt = ckpt;
    ckpt.provenance = provenance;
    rec.write(&out, "model.ckpt", &ckpt.to_bytes()?)?;
    rec.finish(
        &out,
        "train_metrics.json",
        "train",
        s.seed(),
        json!({ "config": cfg, "epochs": ckpt.trace, "vocab_size": vocab.len() }),
    )
}

pub fn build_datastore(s: &Settings) -> Result<()> {
    let out = s.out_dir();
    let mut rec = Record::default();
    let vocab = load_vocab(s, &mut rec)?;
    let ckpt = load_checkpoint("checkpoint", &s.checkpoint_path(), &vocab, &mut rec)?;
    let train = load_split("train", s.required(&s.train, "train")?, SplitName::Train, &vocab, &mut rec)?;
    let store = datastore::build_datastore(&ckpt, &train)?;
    rec.write(&out, "datastore.knds", &store.to_bytes())?;
    let cells = s.ivf_cells.unwrap_or(0);
    if cells > 0 {
        let mut index = ivf_build(&store, cells, s.seed())?;
        if let Some(p) = s.nprobe {
            if p == 0 || p > cells {
                return Err(Usage(format!("--nprobe must lie in 1..={cells}")).into());
            }
            index.nprobe = p;
        }
        rec.write(&out, "index.kniv", &index.to_bytes())?;
    }
    rec.finish(
        &out,
        "datastore_metrics.json",
        "build-datastore",
        s.seed(),
        json!({
            "n": store.len(),
            "dim": store.dim(),
            "checkpoint_hash": to_hex(&store.checkpoint_hash()),
            "ivf_cells": cells,
        }),
    )
}

pub fn eval(s: &Settings) -> Result<()> {
    let out = s.out_dir();
    let mut rec = Record::default();
    let vocab = load_vocab(s, &mut rec)?;
    let ckpt = load_checkpoint("checkpoint", &s.checkpoint_path(), &vocab, &mut rec)?;
    let valid = load_split("valid", s.required(&s.valid, "valid")?, SplitName::Valid, &vocab, &mut rec)?;
    let retrieval = Retrieval::load(s, &mut rec)?;
    let cfg = s.knn_config();
    let result = eval_knn_lm(&ckpt, retrieval.searcher()?.as_ref(), &valid, &cfg)?;
    println!("ppl_lm {}", result.ppl_lm);
    println!("ppl_knn_lm {}", result.ppl_knn_lm);
    rec.finish(
        &out,
        "eval_metrics.json",
        "eval",
        s.seed(),
        json!({
            "knn": cfg,
            "search": retrieval.kind(),
            "ppl_lm": result.ppl_lm,
            "ppl_knn_lm": result.ppl_knn_lm,
            "tokens": result.tokens,
        }),
    )
}

pub fn sweep_lambda(s: &Settings) -> Result<()> {
    let out = s.out_dir();
    let mut rec = Record::default();
    let grid = parse_grid(s.grid.as_deref().unwrap_or("0:1:0.05"))?;
    let vocab = load_vocab(s, &mut rec)?;
    let ckpt = load_checkpoint("checkpoint", &s.checkpoint_path(), &vocab, &mut rec)?;
    let valid = load_split("valid", s.required(&s.valid, "valid")?, SplitName::Valid, &vocab, &mut rec)?;
    let retrieval = Retrieval::load(s, &mut rec)?;
    let cfg = s.knn_config();
    let sweep = knnlm::knn::sweep_lambda(
        &ckpt,
        retrieval.searcher()?.as_ref(),
        &valid,
        cfg.k,
        cfg.tau,
        &grid,
    )?;
    rec.write(&out, "sweep.csv", sweep.to_csv().as_bytes())?;
    println!("best_lambda {} ppl_knn_lm {} ppl_lm {}", sweep.best_lambda, sweep.best_ppl, sweep.ppl_lm);
    rec.finish(
        &out,
        "sweep.json",
        "sweep-lambda",
        s.seed(),
        json!({
            "best_lambda": sweep.best_lambda,
            "ppl_lm": sweep.ppl_lm,
            "ppl_knn_lm": sweep.best_ppl,
            "k": cfg.k,
            "tau": cfg.tau,
            "search": retrieval.kind(),
            "grid": grid,
        }),
    )
}

pub fn analyze(s: &Settings) -> Result<()> {
    let out = s.out_dir();
    let mut rec = Record::default();
    let vocab = load_vocab(s, &mut rec)?;
    let valid = load_split("valid", s.required(&s.valid, "valid")?, SplitName::Valid, &vocab, &mut rec)?;
    let ckpt_a = load_checkpoint("checkpoint", &s.checkpoint_path(), &vocab, &mut rec)?;
    let store_a = load_datastore("datastore", &s.datastore_path(), &mut rec)?;
    let ckpt_b = load_checkpoint(
        "compare_checkpoint",
        s.required(&s.compare_checkpoint, "compare-checkpoint")?,
        &vocab,
        &mut rec,
    )?;
    let store_b = load_datastore(
        "compare_datastore",
        s.required(&s.compare_datastore, "compare-datastore")?,
        &mut rec,
    )?;
    let opts = s.report_options();
    let n_buckets = s.n_buckets.unwrap_or(20);

    let mut histograms = Vec::new();
    for (name, ckpt, store) in [("a", &ckpt_a, &store_a), ("b", &ckpt_b, &store_b)] {
        let mode = RecordMode::KnnLm {
            search: store,
            config: opts.knn,
        };
        let records = collect_records(ckpt, &valid, mode)?;
        let hist = freq_loss_histogram(&records, n_buckets, vocab.len())?;
        rec.write(&out, &format!("freq_loss_{name}.csv"), hist.to_csv().as_bytes())?;
        histograms.push(hist);
    }

    let report = clustering_report(("a", &ckpt_a, &store_a), ("b", &ckpt_b, &store_b), &valid, &opts)?;
    for m in &report.models {
        rec.write(&out, &format!("records_{}.csv", m.name), m.to_csv().as_bytes())?;
        rec.write(&out, &format!("loglik_hist_{}.csv", m.name), m.histogram.to_csv().as_bytes())?;
        println!(
            "{}: gap {:.4} (low {:.4}, high {:.4}; n_low {}, n_high {})",
            m.name, m.gap, m.mean_loglik_low, m.mean_loglik_high, m.n_low, m.n_high
        );
    }
    rec.finish(
        &out,
        "analysis.json",
        "analyze",
        s.seed(),
        json!({ "report": report, "freq_loss": histograms }),
    )
}
