//! Run settings: every key can come from the `--config` JSON file or a flag;
//! flags win.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::Deserialize;

use knnlm::analysis::{GmmOptions, ReportOptions};
use knnlm::knn::KnnConfig;
use knnlm::model::{ModelConfig, ObjectiveKind, OptimConfig, TrainConfig};
use knnlm::regularizers::RegConfig;
use knnlm::synth::SynthConfig;

macro_rules! settings {
    ($( $(#[$meta:meta])* $field:ident : $ty:ty ),* $(,)?) => {
        #[derive(Debug, Clone, Default, Args, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct Settings {
            $( $(#[$meta])* #[arg(long, global = true)] pub $field: Option<$ty>, )*
        }

        impl Settings {
            /// Field-wise `self` over `file`.
            pub fn over(self, file: Settings) -> Settings {
                Settings { $( $field: self.$field.or(file.$field), )* }
            }
        }
    };
}

settings! {
    /// Base seed for training, index building and GMM restarts
    seed: u64,
    /// Output directory (default: current directory)
    out: PathBuf,
    /// Training split (whitespace-tokenized text)
    train: PathBuf,
    /// Validation split
    valid: PathBuf,
    /// Vocabulary TSV (default: <out>/vocab.tsv)
    vocab: PathBuf,
    /// Checkpoint (default: <out>/model.ckpt)
    checkpoint: PathBuf,
    /// Datastore (default: <out>/datastore.knds)
    datastore: PathBuf,
    /// IVF index; exact search when absent
    index: PathBuf,
    /// Second checkpoint for `analyze`
    compare_checkpoint: PathBuf,
    /// Datastore of the second checkpoint for `analyze`
    compare_datastore: PathBuf,
    /// Minimum training count for a word to get its own id
    min_count: u64,
    /// Training objective: ce, ce+l2 or ce+moco
    objective: ObjectiveKind,
    omega: f64,
    queue_len: usize,
    momentum: f64,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    warmup_steps: u64,
    grad_clip: f64,
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    d_ff: usize,
    context_len: usize,
    /// Neighbours per query
    k: usize,
    /// Interpolation weight on the kNN distribution
    lambda: f64,
    /// Distance temperature
    tau: f64,
    /// IVF cells to build (0 = no index)
    ivf_cells: usize,
    /// IVF cells probed per query
    nprobe: usize,
    /// λ grid, `lo:hi:step` or comma-separated values
    grid: String,
    /// Frequent-word cutoff for score splits
    top_f: usize,
    /// GMM components
    components: usize,
    gmm_restarts: usize,
    gmm_max_iter: usize,
    gmm_tol: f64,
    /// Log-likelihood histogram bins
    hist_bins: usize,
    /// Frequency-rank buckets
    n_buckets: usize,
    /// Synthetic corpus: vocabulary size
    synth_vocab: usize,
    /// Synthetic corpus: training tokens
    synth_train_tokens: usize,
    /// Synthetic corpus: validation tokens
    synth_valid_tokens: usize,
}

impl Settings {
    pub fn load(flags: Settings, config: Option<&Path>) -> Result<Settings> {
        let file = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("missing config file {}", p.display()))?;
                serde_json::from_str(&text)
                    .map_err(|e| crate::Usage(format!("config {}: {e}", p.display())))?
            }
            None => Settings::default(),
        };
        Ok(flags.over(file))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    fn in_out(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out_dir().join(name))
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.in_out(&self.vocab, "vocab.tsv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.in_out(&self.checkpoint, "model.ckpt")
    }

    pub fn datastore_path(&self) -> PathBuf {
        self.in_out(&self.datastore, "datastore.knds")
    }

    pub fn required<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
        value
            .as_ref()
            .ok_or_else(|| crate::Usage(format!("--{flag} is required")).into())
    }

    pub fn train_config(&self, vocab_size: usize) -> TrainConfig {
        let dm = ModelConfig::default();
        let dreg = RegConfig::default();
        let dopt = OptimConfig::default();
        TrainConfig {
            model: ModelConfig {
                n_layers: self.n_layers.unwrap_or(dm.n_layers),
                n_heads: self.n_heads.unwrap_or(dm.n_heads),
                d_model: self.d_model.unwrap_or(dm.d_model),
                d_ff: self.d_ff.unwrap_or(dm.d_ff),
                context_len: self.context_len.unwrap_or(dm.context_len),
                vocab_size,
                tie_embeddings: dm.tie_embeddings,
                seed: dm.seed,
            },
            objective: self.objective.unwrap_or(ObjectiveKind::Ce),
            reg: RegConfig {
                omega: self.omega.unwrap_or(dreg.omega),
                queue_len: self.queue_len.unwrap_or(dreg.queue_len),
                momentum: self.momentum.unwrap_or(dreg.momentum),
            },
            optim: OptimConfig {
                lr: self.lr.unwrap_or(dopt.lr),
                warmup_steps: self.warmup_steps.unwrap_or(dopt.warmup_steps),
                grad_clip: match self.grad_clip {
                    Some(c) if c <= 0.0 => None,
                    Some(c) => Some(c),
                    None => dopt.grad_clip,
                },
                ..dopt
            },
            batch_size: self.batch_size.unwrap_or(16),
            epochs: self.epochs.unwrap_or(5),
            seed: self.seed(),
        }
    }

    pub fn knn_config(&self) -> KnnConfig {
        let d = KnnConfig::default();
        KnnConfig {
            k: self.k.unwrap_or(d.k),
            lambda: self.lambda.unwrap_or(d.lambda),
            tau: self.tau.unwrap_or(d.tau),
        }
    }

    pub fn report_options(&self) -> ReportOptions {
        let d = ReportOptions::default();
        let g = GmmOptions::default();
        ReportOptions {
            knn: self.knn_config(),
            top_f: self.top_f.unwrap_or(d.top_f),
            gmm: GmmOptions {
                components: self.components.unwrap_or(g.components),
                seed: self.seed(),
                max_iter: self.gmm_max_iter.unwrap_or(g.max_iter),
                tol: self.gmm_tol.unwrap_or(g.tol),
                restarts: self.gmm_restarts.unwrap_or(g.restarts),
            },
            hist_bins: self.hist_bins.unwrap_or(d.hist_bins),
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let d = SynthConfig::default();
        SynthConfig {
            vocab: self.synth_vocab.unwrap_or(d.vocab),
            train_tokens: self.synth_train_tokens.unwrap_or(d.train_tokens),
            valid_tokens: self.synth_valid_tokens.unwrap_or(d.valid_tokens),
            seed: self.seed(),
            ..d
        }
    }
}
