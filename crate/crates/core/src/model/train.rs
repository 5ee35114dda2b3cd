use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::eval::perplexity;
use super::loss::ce_loss_and_grad;
use super::optim::{Adam, OptimConfig};
use super::{ModelConfig, Transformer};
use crate::corpus::{batch_iter, Batch, EncodedSplit};
use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::regularizers::{
    l2_penalty_grad, moco_penalty_grad, MomentumEncoder, QueueBank, RegConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "ce+l2")]
    CeL2,
    #[serde(rename = "ce+moco")]
    CeMoco,
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Self::Ce),
            "ce+l2" => Ok(Self::CeL2),
            "ce+moco" => Ok(Self::CeMoco),
            other => Err(Error::Config(format!(
                "unknown objective {other:?} (expected ce, ce+l2 or ce+moco)"
            ))),
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ce => "ce",
            Self::CeL2 => "ce+l2",
            Self::CeMoco => "ce+moco",
        })
    }
}

/// Resolved training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Ce,
    CeL2 { omega: f64 },
    CeMoco {
        omega: f64,
        queue_len: usize,
        momentum: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveKind,
    #[serde(flatten)]
    pub reg: RegConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Drives parameter init and batch order.
    pub seed: u64,
}

impl TrainConfig {
    pub fn objective(&self) -> Objective {
        match self.objective {
            ObjectiveKind::Ce => Objective::Ce,
            ObjectiveKind::CeL2 => Objective::CeL2 {
                omega: self.reg.omega,
            },
            ObjectiveKind::CeMoco => Objective::CeMoco {
                omega: self.reg.omega,
                queue_len: self.reg.queue_len,
                momentum: self.reg.momentum,
            },
        }
    }

    /// Model config with the run seed applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.reg.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    /// Mean training objective (CE plus penalty) over the epoch's batches.
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_ppl: f64,
    pub valid_ppl: Option<f64>,
}

struct MocoState {
    encoder: MomentumEncoder,
    queues: QueueBank,
}

/// Mutable training state: online model, optimizer, queue machinery.
pub struct TrainState {
    pub model: Transformer,
    pub optimizer: Adam,
    moco: Option<MocoState>,
}

/// Step-level driver; [`train_run`] wraps it with epochs and checkpoints.
pub struct Trainer {
    pub config: TrainConfig,
    pub state: TrainState,
    order_rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub ce: f64,
    pub penalty: f64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Transformer::new(config.model_config())?;
        let optimizer = Adam::new(config.optim.clone(), &model.params);
        let moco = match config.objective() {
            Objective::CeMoco {
                omega,
                queue_len,
                momentum,
            } if omega > 0.0 => Some(MocoState {
                encoder: MomentumEncoder::new(&model, momentum),
                queues: QueueBank::new(config.model.vocab_size, config.model.d_model, queue_len),
            }),
            _ => None,
        };
        let order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0bd3_u64);
        Ok(Self {
            config,
            state: TrainState {
                model,
                optimizer,
                moco,
            },
            order_rng,
        })
    }

    pub fn step(&mut self, batch: &Batch) -> Result<StepStats> {
        let (b, t) = (batch.batch, batch.bptt);
        let st = &mut self.state;
        let (logits, cache) = st.model.forward_cached(&batch.inputs, b, t)?;
        let (ce, d_logits) = ce_loss_and_grad(logits.view(), &batch.targets);

        // ω = 0 skips the penalty path entirely so the update is bit-identical
        // to plain cross-entropy.
        let (penalty, d_reprs): (f64, Option<Array2<f64>>) = match self.config.objective() {
            Objective::CeL2 { omega } if omega > 0.0 => {
                let (p, g) = l2_penalty_grad(cache.reprs.view(), omega);
                (p, Some(g))
            }
            Objective::CeMoco { omega, .. } if omega > 0.0 => {
                let moco = st.moco.as_ref().expect("moco state");
                let (p, g) =
                    moco_penalty_grad(&moco.queues, &batch.targets, cache.reprs.view(), omega);
                (p, Some(g))
            }
            _ => (0.0, None),
        };
        let loss = ce + penalty;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss {loss} (ce {ce}, penalty {penalty}) at step {}",
                st.optimizer.step_count()
            )));
        }

        let grads = st.model.backward(&cache, &d_logits, d_reprs.as_ref());
        st.optimizer.step(&mut st.model.params, &grads);
        if !st.model.params.all_finite() {
            return Err(Error::Divergence(format!(
                "non-finite parameters after step {}",
                st.optimizer.step_count()
            )));
        }

        if let Some(moco) = st.moco.as_mut() {
            moco.encoder.update(&st.model.params);
            let (_, target_cache) = moco.encoder.model.forward_cached(&batch.inputs, b, t)?;
            for (row, &w) in target_cache.reprs.rows().into_iter().zip(&batch.targets) {
                moco.queues.push(w, row.as_slice().expect("contiguous row"));
            }
        }
        Ok(StepStats { loss, ce, penalty })
    }

    /// One pass over `train` in a seeded shuffled batch order.
    pub fn run_epoch(&mut self, train: &EncodedSplit, epoch: usize) -> Result<EpochStats> {
        let it = batch_iter(train, self.config.batch_size, self.config.model.context_len)?;
        let mut order: Vec<usize> = (0..it.steps()).collect();
        order.shuffle(&mut self.order_rng);
        let (mut loss, mut ce) = (0.0, 0.0);
        for &s in &order {
            let stats = self.step(&it.batch_at(s)).map_err(|e| match e {
                Error::Divergence(msg) => Error::Divergence(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
            loss += stats.loss;
            ce += stats.ce;
        }
        let n = order.len() as f64;
        Ok(EpochStats {
            epoch,
            steps: order.len(),
            train_loss: loss / n,
            train_ce: ce / n,
            train_ppl: (ce / n).exp(),
            valid_ppl: None,
        })
    }
}

/// Trains for `config.epochs` epochs. After every epoch the current
/// checkpoint and stats are handed to `on_epoch` (used to persist them).
pub fn train_run(
    config: &TrainConfig,
    vocab_hash: Digest,
    train: &EncodedSplit,
    valid: Option<&EncodedSplit>,
    mut on_epoch: impl FnMut(&Checkpoint, &EpochStats) -> Result<()>,
) -> Result<Checkpoint> {
    for split in std::iter::once(train).chain(valid) {
        if split.vocab_hash != vocab_hash {
            return Err(Error::HashMismatch(format!(
                "{} split was encoded with a different vocabulary",
                split.name
            )));
        }
    }
    let mut trainer = Trainer::new(config.clone())?;
    let mut trace = Vec::with_capacity(config.epochs);
    let mut ckpt = Checkpoint {
        config: config.clone(),
        model: trainer.state.model.clone(),
        vocab_hash,
        step: 0,
        trace: vec![],
        provenance: Default::default(),
    };
    for epoch in 1..=config.epochs {
        let mut stats = trainer.run_epoch(train, epoch)?;
        if let Some(v) = valid {
            stats.valid_ppl = Some(perplexity(&trainer.state.model, v)?);
        }
        trace.push(stats.clone());
        ckpt = Checkpoint {
            config: config.clone(),
            model: trainer.state.model.clone(),
            vocab_hash,
            step: trainer.state.optimizer.step_count(),
            trace: trace.clone(),
            provenance: Default::default(),
        };
        on_epoch(&ckpt, &stats)?;
    }
    Ok(ckpt)
}
