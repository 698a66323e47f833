//! Joint training of encoder, comparison layer and phoneme weights.
//!
//! Each step samples `K` speakers with two utterances each, scores every
//! enrollment crop against every test crop, and minimizes
//! `gamma * L_veri + L_pho` with plain SGD under an exponentially decaying
//! learning rate.

mod batch;
pub mod checkpoint;
mod loss;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{encode_on_tape, pool_traits_on_tape};
use crate::error::{Error, Result};
use crate::inventory::Utterance;
use crate::model::{Model, ModelConfig, ParamVars};
use crate::scoring::{normalize_weights_on_tape, score_on_tape};

pub use batch::{random_crop, sample_batch, Batch, Duration, SpeakerIndex};
pub use loss::{loss_pho, loss_pho_on_tape, loss_veri, loss_veri_floor, loss_veri_on_tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Speakers per batch.
    pub k: usize,
    pub duration: Duration,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub steps: usize,
    /// Batches that cannot be scored (a pair without shared phonemes) are
    /// redrawn up to this many times per step.
    pub max_resample: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 8,
            duration: Duration::Fixed(64),
            alpha: 0.001,
            beta: 0.0015,
            gamma: 0.5,
            lr_start: 0.05,
            lr_end: 1e-4,
            steps: 2000,
            max_resample: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k < 2 {
            return bad("k must be >= 2");
        }
        self.duration.validate()?;
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be >= 0");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be > 0");
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return bad("learning rates must satisfy lr_start >= lr_end > 0");
        }
        Ok(())
    }

    /// `lr_start * (lr_end / lr_start)^(step / steps)`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.steps == 0 {
            return self.lr_start;
        }
        self.lr_start * (self.lr_end / self.lr_start).powf(step as f64 / self.steps as f64)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Losses {
    pub l_veri: Var,
    pub l_pho: Var,
    pub l_all: Var,
}

/// Records the full forward pass of one batch.
pub fn batch_forward(
    tape: &Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    batch: &Batch,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<Losses> {
    let traits = |utts: &[Utterance]| -> Result<Vec<Vec<Option<Var>>>> {
        utts.iter()
            .map(|u| {
                let feats = encode_on_tape(tape, u, cfg.encoder.context, &vars.encoder)?;
                pool_traits_on_tape(tape, feats, u.alignment(), cfg.n_phonemes)
            })
            .collect()
    };
    let enroll = traits(&batch.enroll)?;
    let test = traits(&batch.test)?;
    let weights = normalize_weights_on_tape(tape, vars.w_hat, cfg.norm, cfg.epsilon)?;
    let y = enroll
        .iter()
        .map(|e| {
            test.iter()
                .map(|t| score_on_tape(tape, e, t, &vars.comparison, weights, cfg.epsilon))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let l_veri = loss_veri_on_tape(tape, &y)?;
    let l_pho = loss_pho_on_tape(tape, &enroll, &test, alpha, beta)?;
    let l_all = tape.add(tape.scale(l_veri, gamma)?, l_pho)?;
    Ok(Losses {
        l_veri,
        l_pho,
        l_all,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub l_veri: f64,
    pub l_pho: f64,
    pub l_all: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
    /// Batches redrawn because some pair could not be scored.
    pub resampled: usize,
}

pub fn log_to_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,l_veri,l_pho,l_all,lr\n");
    for r in log {
        let _ = writeln!(out, "{},{},{},{},{}", r.step, r.l_veri, r.l_pho, r.l_all, r.lr);
    }
    out
}

/// Trains a freshly initialized model. Deterministic in `train.seed`.
pub fn train(utterances: &[Utterance], model_cfg: &ModelConfig, train: &TrainConfig) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let model = Model::init(model_cfg.clone(), &mut rng)?;
    train_from(model, utterances, train, &mut rng)
}

/// Continues training `model` with the given random stream.
pub fn train_from(
    mut model: Model,
    utterances: &[Utterance],
    train: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    train.validate()?;
    if let Some(u) = utterances.iter().find(|u| u.dim() != model.config.encoder.input_dim) {
        return Err(Error::Shape(format!(
            "utterance {} has F = {}, model expects {}",
            u.id,
            u.dim(),
            model.config.encoder.input_dim
        )));
    }
    let index = SpeakerIndex::new(utterances);
    if index.len() < train.k {
        return Err(Error::Insufficient(format!(
            "training needs {} speakers with >= 2 utterances, corpus has {}",
            train.k,
            index.len()
        )));
    }
    let mut log = Vec::with_capacity(train.steps);
    let mut resampled = 0;
    for step in 0..train.steps {
        let lr = train.learning_rate(step);
        let mut attempt = 0;
        let (tape, vars, losses) = loop {
            let duration = train.duration.sample(rng);
            let batch = sample_batch(utterances, &index, train.k, duration, rng)?;
            let tape = Tape::new();
            let vars = ParamVars::record(&tape, &model.params);
            match batch_forward(&tape, &vars, &model.config, &batch, train.alpha, train.beta, train.gamma) {
                Ok(losses) => break (tape, vars, losses),
                Err(Error::NoSharedPhonemes | Error::DegenerateWeights(_)) if attempt < train.max_resample => {
                    attempt += 1;
                    resampled += 1;
                }
                Err(Error::NonFinite { op }) => {
                    return Err(diverged(step, &model, format!("non-finite value in {op}")))
                }
                Err(e) => return Err(e),
            }
        };
        let grads = tape.backward(losses.l_all)?;
        let mut tensors = model.params.tensors();
        for (t, v) in tensors.iter_mut().zip(vars.all()) {
            let g = grads.wrt(v);
            for (p, d) in t.data_mut().iter_mut().zip(g.data()) {
                *p -= lr * d;
            }
        }
        if tensors.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(diverged(step, &model, "non-finite parameter after update".into()));
        }
        model.params = crate::model::ModelParams::from_tensors(&model.config, tensors)?;
        log.push(StepLog {
            step,
            l_veri: tape.item(losses.l_veri),
            l_pho: tape.item(losses.l_pho),
            l_all: tape.item(losses.l_all),
            lr,
        });
    }
    Ok(TrainOutcome {
        model,
        log,
        resampled,
    })
}

fn diverged(step: usize, model: &Model, what: String) -> Error {
    let norms: Vec<String> = model
        .params
        .named_tensors()
        .iter()
        .map(|(name, t)| format!("{name}={:.4e}", t.norm()))
        .collect();
    Error::Diverged {
        step,
        detail: format!("{what}; parameter norms: {}", norms.join(", ")),
    }
}
