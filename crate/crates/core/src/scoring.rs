//! Per-phoneme comparison and weighted decision.
//!
//! For every phoneme present in both utterances the cosine `d` of the two
//! traits is mapped through a small shared network to a signed phonetic
//! score `s = f2(tanh(f1(d))) * d`. Learned weights `w >= 0` then combine the
//! scores into `y = tanh(sum(w * s) / sum(w))`, with both sums running over
//! the shared phonemes only.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_value, logistic, Tape, Tensor, Var};
use crate::encoder::TraitSet;
use crate::error::{Error, Result};

/// Parameters of the comparison layer, shared by all phonemes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonParams {
    pub f1_weight: Vec<f64>,
    pub f1_bias: Vec<f64>,
    /// `f2` has no bias.
    pub f2_weight: Vec<f64>,
}

impl ComparisonParams {
    pub fn new(f1_weight: Vec<f64>, f1_bias: Vec<f64>, f2_weight: Vec<f64>) -> Result<Self> {
        let c = f1_weight.len();
        if c == 0 || f1_bias.len() != c || f2_weight.len() != c {
            return Err(Error::Shape(format!(
                "comparison layer widths {}/{}/{} must be equal and non-zero",
                c,
                f1_bias.len(),
                f2_weight.len()
            )));
        }
        Ok(Self {
            f1_weight,
            f1_bias,
            f2_weight,
        })
    }

    pub fn width(&self) -> usize {
        self.f1_weight.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormFn {
    MinMax,
    Sigmoid,
    MinShift,
    Relu,
}

impl std::str::FromStr for NormFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min_max" => Ok(Self::MinMax),
            "sigmoid" => Ok(Self::Sigmoid),
            "min_shift" => Ok(Self::MinShift),
            "relu" => Ok(Self::Relu),
            other => Err(Error::Config(format!("unknown weight normalization {other:?}"))),
        }
    }
}

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightParams {
    pub w_hat: Vec<f64>,
    pub norm: NormFn,
    pub epsilon: f64,
}

/// Per-phoneme evidence of one trial. `None` in `d`/`s` marks a phoneme
/// that is not shared and therefore has no similarity at all.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreBreakdown {
    pub d: Vec<Option<f64>>,
    pub s: Vec<Option<f64>>,
    pub w: Vec<f64>,
    pub mask: Vec<bool>,
    pub y: f64,
}

impl ScoreBreakdown {
    pub fn shared(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i)
    }
}

/// Cosine similarity of two nonnegative traits, in `[0, 1]`.
pub fn phonetic_cosine(e: &[f64], t: &[f64]) -> Result<f64> {
    cosine_value(e, t)
}

pub fn scale_score(d: f64, cmp: &ComparisonParams) -> f64 {
    let inner: f64 = cmp
        .f1_weight
        .iter()
        .zip(&cmp.f1_bias)
        .zip(&cmp.f2_weight)
        .map(|((w1, b1), w2)| w2 * (w1 * d + b1).tanh())
        .sum();
    inner * d
}

pub fn normalize_weights(wp: &WeightParams) -> Vec<f64> {
    let w = &wp.w_hat;
    match wp.norm {
        NormFn::MinMax => {
            let (mn, mx) = min_max(w);
            let range = (mx - mn) + wp.epsilon;
            w.iter().map(|v| (v - mn) / range).collect()
        }
        NormFn::MinShift => {
            let (mn, _) = min_max(w);
            w.iter().map(|v| v - mn).collect()
        }
        NormFn::Sigmoid => w.iter().map(|&v| logistic(v)).collect(),
        NormFn::Relu => w.iter().map(|&v| v.max(0.0)).collect(),
    }
}

fn min_max(w: &[f64]) -> (f64, f64) {
    w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Scores one enrollment/test pair.
pub fn score_trial(
    enroll: &TraitSet,
    test: &TraitSet,
    cmp: &ComparisonParams,
    wp: &WeightParams,
) -> Result<ScoreBreakdown> {
    if enroll.len() != test.len() || enroll.len() != wp.w_hat.len() {
        return Err(Error::Shape(format!(
            "trait sets over {} and {} phonemes with {} weights",
            enroll.len(),
            test.len(),
            wp.w_hat.len()
        )));
    }
    let w = normalize_weights(wp);
    score_with_weights(enroll, test, cmp, &w, wp.epsilon)
}

/// [`score_trial`] with weights already normalized.
pub fn score_with_weights(
    enroll: &TraitSet,
    test: &TraitSet,
    cmp: &ComparisonParams,
    w: &[f64],
    epsilon: f64,
) -> Result<ScoreBreakdown> {
    let n = enroll.len();
    let mask: Vec<bool> = (0..n)
        .map(|i| enroll.is_present(i) && test.is_present(i))
        .collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::NoSharedPhonemes);
    }
    let mut d = vec![None; n];
    let mut s = vec![None; n];
    for i in (0..n).filter(|&i| mask[i]) {
        let di = phonetic_cosine(enroll.get(i), test.get(i))?;
        d[i] = Some(di);
        s[i] = Some(scale_score(di, cmp));
    }
    let y = aggregate(
        (0..n).filter(|&i| mask[i]).map(|i| (w[i], s[i].unwrap())),
        epsilon,
    )?;
    Ok(ScoreBreakdown {
        d,
        s,
        w: w.to_vec(),
        mask,
        y,
    })
}

/// `tanh(sum(w * s) / sum(w))` over `(w, s)` pairs in phoneme order.
pub fn aggregate(pairs: impl Iterator<Item = (f64, f64)> + Clone, epsilon: f64) -> Result<f64> {
    let den: f64 = pairs.clone().map(|(w, _)| w).sum();
    if den < epsilon {
        return Err(Error::DegenerateWeights(den));
    }
    let num: f64 = pairs.map(|(w, s)| w * s).sum();
    Ok((num / den).tanh())
}

/// Differentiable comparison parameters on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ComparisonVars {
    pub f1_weight: Var,
    pub f1_bias: Var,
    pub f2_weight: Var,
}

impl ComparisonVars {
    pub fn record(tape: &Tape, cmp: &ComparisonParams) -> Self {
        Self {
            f1_weight: tape.param(Tensor::vector(cmp.f1_weight.clone())),
            f1_bias: tape.param(Tensor::vector(cmp.f1_bias.clone())),
            f2_weight: tape.param(Tensor::vector(cmp.f2_weight.clone())),
        }
    }
}

pub fn normalize_weights_on_tape(tape: &Tape, w_hat: Var, norm: NormFn, epsilon: f64) -> Result<Var> {
    let n = tape.shape(w_hat).iter().product();
    match norm {
        NormFn::MinMax => {
            let mn = tape.min(w_hat)?;
            let mx = tape.max(w_hat)?;
            let range = tape.sub(mx, mn)?;
            let range = tape.add(range, tape.constant(Tensor::scalar(epsilon)))?;
            let shifted = tape.sub(w_hat, tape.expand(mn, n)?)?;
            tape.div(shifted, tape.expand(range, n)?)
        }
        NormFn::MinShift => {
            let mn = tape.min(w_hat)?;
            tape.sub(w_hat, tape.expand(mn, n)?)
        }
        NormFn::Sigmoid => tape.sigmoid(w_hat),
        NormFn::Relu => tape.relu(w_hat),
    }
}

/// Records `s` for a scalar cosine `d`.
pub fn scale_score_on_tape(tape: &Tape, d: Var, cmp: &ComparisonVars) -> Result<Var> {
    let c = tape.shape(cmp.f1_weight)[0];
    let dv = tape.expand(d, c)?;
    let z = tape.mul(cmp.f1_weight, dv)?;
    let z = tape.add(z, cmp.f1_bias)?;
    let z = tape.tanh(z)?;
    let z = tape.mul(cmp.f2_weight, z)?;
    let inner = tape.sum(z)?;
    tape.mul(inner, d)
}

/// Records the final score `y` for two sets of tape traits (`None` = absent).
pub fn score_on_tape(
    tape: &Tape,
    enroll: &[Option<Var>],
    test: &[Option<Var>],
    cmp: &ComparisonVars,
    weights: Var,
    epsilon: f64,
) -> Result<Var> {
    let mut ws = Vec::new();
    let mut terms = Vec::new();
    for (i, (e, t)) in enroll.iter().zip(test).enumerate() {
        let (Some(e), Some(t)) = (e, t) else { continue };
        let d = tape.cosine(*e, *t)?;
        let s = scale_score_on_tape(tape, d, cmp)?;
        let w = tape.index(weights, i)?;
        terms.push(tape.mul(w, s)?);
        ws.push(w);
    }
    if ws.is_empty() {
        return Err(Error::NoSharedPhonemes);
    }
    let den = tape.sum(tape.stack(&ws)?)?;
    let den_value = tape.item(den);
    if den_value < epsilon {
        return Err(Error::DegenerateWeights(den_value));
    }
    let num = tape.sum(tape.stack(&terms)?)?;
    tape.tanh(tape.div(num, den)?)
}
