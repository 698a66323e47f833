//! Model configuration, parameters and tape-free inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::{extract_traits, DenseLayer, EncoderConfig, EncoderParams, TraitSet};
use crate::error::{Error, Result};
use crate::inventory::Utterance;
use crate::scoring::{
    normalize_weights, score_with_weights, ComparisonParams, ComparisonVars, NormFn,
    ScoreBreakdown, WeightParams, DEFAULT_EPSILON,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub n_phonemes: usize,
    /// Intermediate width `c` of the comparison layer.
    pub comparison_width: usize,
    pub norm: NormFn,
    pub epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            n_phonemes: 12,
            comparison_width: 2,
            norm: NormFn::MinMax,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.n_phonemes < 2 {
            return Err(Error::Config("n_phonemes must be >= 2".into()));
        }
        if self.comparison_width == 0 {
            return Err(Error::Config("comparison_width must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub comparison: ComparisonParams,
    pub weights: WeightParams,
}

/// Spread of the initial phoneme-weight jitter around 0.5.
pub const WEIGHT_INIT_JITTER: f64 = 0.05;

impl ModelParams {
    /// Encoder: uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    /// Comparison layers: uniform in `[0, 1]` for `f1` and `[0, 1/sqrt(c)]`
    /// for `f2`, so the initial phonetic score increases with the cosine.
    /// Phoneme weights: `0.5` plus a small uniform jitter, since an exactly
    /// constant vector has no defined min-max normalization.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let encoder = EncoderParams::init(&cfg.encoder, rng);
        let c = cfg.comparison_width;
        let f2_bound = 1.0 / (c as f64).sqrt();
        let f1_weight = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
        let f1_bias = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
        let f2_weight = (0..c).map(|_| rng.random_range(0.0..f2_bound)).collect();
        let w_hat = (0..cfg.n_phonemes)
            .map(|_| 0.5 + rng.random_range(-WEIGHT_INIT_JITTER..WEIGHT_INIT_JITTER))
            .collect();
        Self {
            encoder,
            comparison: ComparisonParams {
                f1_weight,
                f1_bias,
                f2_weight,
            },
            weights: WeightParams {
                w_hat,
                norm: cfg.norm,
                epsilon: cfg.epsilon,
            },
        }
    }

    /// Parameter tensors in a fixed order, with their names.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (k, layer) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.{k}.weight"), layer.weight.clone()));
            out.push((format!("encoder.{k}.bias"), layer.bias.clone()));
        }
        out.push(("f1.weight".into(), Tensor::vector(self.comparison.f1_weight.clone())));
        out.push(("f1.bias".into(), Tensor::vector(self.comparison.f1_bias.clone())));
        out.push(("f2.weight".into(), Tensor::vector(self.comparison.f2_weight.clone())));
        out.push(("w_hat".into(), Tensor::vector(self.weights.w_hat.clone())));
        out
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Rebuilds parameters from tensors in [`ModelParams::named_tensors`] order.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let n_layers = cfg.encoder.layer_dims().len();
        if tensors.len() != 2 * n_layers + 4 {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                2 * n_layers + 4,
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let layers = (0..n_layers)
            .map(|_| DenseLayer {
                weight: it.next().unwrap(),
                bias: it.next().unwrap(),
            })
            .collect();
        let encoder = EncoderParams { layers };
        encoder.check_shapes(&cfg.encoder)?;
        let mut vec_of = |len: usize, name: &str| -> Result<Vec<f64>> {
            let t = it.next().unwrap();
            if t.shape() != [len] {
                return Err(Error::Shape(format!("{name}: shape {:?}, expected [{len}]", t.shape())));
            }
            Ok(t.data().to_vec())
        };
        let c = cfg.comparison_width;
        let comparison = ComparisonParams::new(
            vec_of(c, "f1.weight")?,
            vec_of(c, "f1.bias")?,
            vec_of(c, "f2.weight")?,
        )?;
        let w_hat = vec_of(cfg.n_phonemes, "w_hat")?;
        Ok(Self {
            encoder,
            comparison,
            weights: WeightParams {
                w_hat,
                norm: cfg.norm,
                epsilon: cfg.epsilon,
            },
        })
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Parameters recorded as differentiable leaves of a tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub encoder: Vec<(Var, Var)>,
    pub comparison: ComparisonVars,
    pub w_hat: Var,
}

impl ParamVars {
    pub fn record(tape: &Tape, params: &ModelParams) -> Self {
        Self::from_vars(
            &params
                .tensors()
                .into_iter()
                .map(|t| tape.param(t))
                .collect::<Vec<_>>(),
        )
    }

    /// Groups vars given in [`ModelParams::named_tensors`] order.
    pub fn from_vars(vars: &[Var]) -> Self {
        let n = vars.len();
        let encoder = vars[..n - 4].chunks(2).map(|p| (p[0], p[1])).collect();
        Self {
            encoder,
            comparison: ComparisonVars {
                f1_weight: vars[n - 4],
                f1_bias: vars[n - 3],
                f2_weight: vars[n - 2],
            },
            w_hat: vars[n - 1],
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.encoder.iter().flat_map(|&(w, b)| [w, b]).collect();
        out.extend([
            self.comparison.f1_weight,
            self.comparison.f1_bias,
            self.comparison.f2_weight,
            self.w_hat,
        ]);
        out
    }
}

/// A configured model ready for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.encoder.check_shapes(&config.encoder)?;
        if params.weights.w_hat.len() != config.n_phonemes
            || params.comparison.width() != config.comparison_width
        {
            return Err(Error::Shape("parameters do not match model config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, rng);
        Ok(Self { config, params })
    }

    pub fn traits(&self, utt: &Utterance) -> Result<TraitSet> {
        extract_traits(utt, &self.config.encoder, &self.params.encoder, self.config.n_phonemes)
    }

    pub fn weights(&self) -> Vec<f64> {
        normalize_weights(&self.params.weights)
    }

    pub fn score_traits(&self, enroll: &TraitSet, test: &TraitSet) -> Result<ScoreBreakdown> {
        self.score_traits_with(enroll, test, &self.weights())
    }

    /// Scoring with precomputed normalized weights.
    pub fn score_traits_with(
        &self,
        enroll: &TraitSet,
        test: &TraitSet,
        weights: &[f64],
    ) -> Result<ScoreBreakdown> {
        score_with_weights(enroll, test, &self.params.comparison, weights, self.config.epsilon)
    }

    pub fn score(&self, enroll: &Utterance, test: &Utterance) -> Result<ScoreBreakdown> {
        self.score_traits(&self.traits(enroll)?, &self.traits(test)?)
    }
}
