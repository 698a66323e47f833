//! Frame encoder and phoneme-boundary pooling.
//!
//! The encoder is a stack of affine layers with rectifier activations. Each
//! layer may look at `context` consecutive frames (zero-padded at the edges),
//! so a stack of `L` layers has a receptive field of `L * (context - 1) + 1`
//! frames. With `context = 1` every output frame depends only on its own
//! input frame, which is what makes phoneme removal and trait removal
//! interchangeable.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{context_forward, matmul_forward, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::inventory::{Alignment, Segment, Utterance};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    /// Temporal kernel width of every layer; odd.
    pub context: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            output_dim: 32,
            hidden: vec![32],
            context: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("encoder dimensions must be at least 1".into()));
        }
        if self.context == 0 || self.context.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "encoder context must be odd, got {}",
                self.context
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer, fan-in including context frames.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev * self.context, h));
            prev = h;
        }
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `fan_in x fan_out`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<DenseLayer>,
}

impl EncoderParams {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init(cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let layers = cfg
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                DenseLayer {
                    weight: Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out)).unwrap(),
                    bias: Tensor::vector(draw(fan_out)),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let layers = cfg
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| DenseLayer {
                weight: Tensor::zeros(vec![fan_in, fan_out]),
                bias: Tensor::zeros(vec![fan_out]),
            })
            .collect();
        Self { layers }
    }

    pub fn check_shapes(&self, cfg: &EncoderConfig) -> Result<()> {
        let dims = cfg.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "encoder has {} layers, config expects {}",
                self.layers.len(),
                dims.len()
            )));
        }
        for (k, ((fan_in, fan_out), layer)) in dims.iter().zip(&self.layers).enumerate() {
            if layer.weight.shape() != [*fan_in, *fan_out] || layer.bias.shape() != [*fan_out] {
                return Err(Error::Shape(format!(
                    "encoder layer {k}: weight {:?}, bias {:?}, expected [{fan_in}, {fan_out}] and [{fan_out}]",
                    layer.weight.shape(),
                    layer.bias.shape()
                )));
            }
        }
        Ok(())
    }
}

fn frames_f64(utt: &Utterance) -> Vec<f64> {
    utt.frames().iter().map(|&v| f64::from(v)).collect()
}

/// Frame-level features, `T x D`, all entries `>= 0`.
pub fn encode(utt: &Utterance, cfg: &EncoderConfig, params: &EncoderParams) -> Result<Tensor> {
    if utt.dim() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "utterance {} has F = {}, encoder expects {}",
            utt.id,
            utt.dim(),
            cfg.input_dim
        )));
    }
    params.check_shapes(cfg)?;
    let n = utt.n_frames();
    let mut x = frames_f64(utt);
    let mut width = cfg.input_dim;
    for layer in &params.layers {
        if cfg.context > 1 {
            x = context_forward(&x, n, width, cfg.context).data().to_vec();
        }
        let k = width * cfg.context;
        let m = layer.bias.len();
        let mut z = matmul_forward(&x, n, k, layer.weight.data(), m);
        for row in z.chunks_mut(m) {
            for (v, b) in row.iter_mut().zip(layer.bias.data()) {
                *v = (*v + b).max(0.0);
            }
        }
        x = z;
        width = m;
    }
    Tensor::matrix(n, width, x)
}

/// Records the encoder forward pass for `utt` on `tape`; `layers` holds the
/// `(weight, bias)` variables of each layer.
pub fn encode_on_tape(
    tape: &Tape,
    utt: &Utterance,
    context: usize,
    layers: &[(Var, Var)],
) -> Result<Var> {
    let frames = Tensor::matrix(utt.n_frames(), utt.dim(), frames_f64(utt))?;
    let mut x = tape.constant(frames);
    for &(w, b) in layers {
        if context > 1 {
            x = tape.context_stack(x, context)?;
        }
        let z = tape.matmul(x, w)?;
        let z = tape.add_row(z, b)?;
        x = tape.relu(z)?;
    }
    Ok(x)
}

/// One trait vector per phoneme plus a presence mask. Absent traits are
/// exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TraitSet {
    dim: usize,
    traits: Vec<f64>,
    present: Vec<bool>,
}

impl TraitSet {
    pub fn new(dim: usize, traits: Vec<Vec<f64>>, present: Vec<bool>) -> Result<Self> {
        if traits.len() != present.len() || traits.iter().any(|t| t.len() != dim) {
            return Err(Error::Shape("trait matrix does not match mask or dimension".into()));
        }
        let mut set = Self {
            dim,
            traits: traits.into_iter().flatten().collect(),
            present,
        };
        for i in 0..set.len() {
            let t = set.get(i);
            if t.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Shape(format!("trait {i} is negative or non-finite")));
            }
            let zero = t.iter().all(|&v| v == 0.0);
            if set.present[i] && zero {
                set.present[i] = false;
            } else if !set.present[i] && !zero {
                return Err(Error::Shape(format!("absent trait {i} is not zero")));
            }
        }
        Ok(set)
    }

    pub fn empty(n_phonemes: usize, dim: usize) -> Self {
        Self {
            dim,
            traits: vec![0.0; n_phonemes * dim],
            present: vec![false; n_phonemes],
        }
    }

    /// Number of phonemes `I`.
    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.traits[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_present(&self, i: usize) -> bool {
        self.present[i]
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    /// Marks phoneme `i` absent and zeroes its trait.
    pub fn clear(&mut self, i: usize) {
        self.present[i] = false;
        self.traits[i * self.dim..(i + 1) * self.dim].fill(0.0);
    }

    fn set(&mut self, i: usize, values: &[f64]) {
        self.traits[i * self.dim..(i + 1) * self.dim].copy_from_slice(values);
        self.present[i] = values.iter().any(|&v| v != 0.0);
    }
}

/// Averages the feature rows of every phoneme's segments. Frames outside
/// any segment belong to no trait; a pooled trait that is exactly zero is
/// treated as absent.
pub fn pool_traits(features: &Tensor, alignment: &Alignment, n_phonemes: usize) -> TraitSet {
    let dim = features.shape()[1];
    let data = features.data();
    let mut set = TraitSet::empty(n_phonemes, dim);
    let mut acc = vec![0.0; dim];
    for i in 0..n_phonemes {
        let rows = alignment.frames_of(i);
        if rows.is_empty() {
            continue;
        }
        acc.fill(0.0);
        for &r in &rows {
            for (a, v) in acc.iter_mut().zip(&data[r * dim..(r + 1) * dim]) {
                *a += v;
            }
        }
        let n = rows.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        set.set(i, &acc);
    }
    set
}

/// Encodes and pools in one step.
pub fn extract_traits(
    utt: &Utterance,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    n_phonemes: usize,
) -> Result<TraitSet> {
    let features = encode(utt, cfg, params)?;
    Ok(pool_traits(&features, utt.alignment(), n_phonemes))
}

/// Pooled traits recorded on a tape; `None` marks an absent phoneme.
pub fn pool_traits_on_tape(
    tape: &Tape,
    features: Var,
    alignment: &Alignment,
    n_phonemes: usize,
) -> Result<Vec<Option<Var>>> {
    (0..n_phonemes)
        .map(|i| {
            let rows = alignment.frames_of(i);
            if rows.is_empty() {
                return Ok(None);
            }
            let t = tape.mean_rows(features, &rows)?;
            let nonzero = tape.value(t).data().iter().any(|&v| v != 0.0);
            Ok(nonzero.then_some(t))
        })
        .collect()
}

/// Deletes every frame of phoneme `i` and shifts later segments left to the
/// compacted frame axis.
pub fn remove_phoneme_frames(utt: &Utterance, phoneme: usize) -> Result<Utterance> {
    if !utt.alignment().contains(phoneme) {
        return Ok(utt.clone());
    }
    let dim = utt.dim();
    let mut frames = Vec::with_capacity(utt.frames().len());
    let mut segments = Vec::new();
    let mut cursor = 0;
    let mut removed = 0;
    for seg in utt.alignment().segments() {
        frames.extend_from_slice(&utt.frames()[cursor * dim..seg.start * dim]);
        if seg.phoneme == phoneme {
            removed += seg.len();
        } else {
            frames.extend_from_slice(&utt.frames()[seg.start * dim..seg.end * dim]);
            segments.push(Segment::new(seg.phoneme, seg.start - removed, seg.end - removed));
        }
        cursor = seg.end;
    }
    frames.extend_from_slice(&utt.frames()[cursor * dim..]);
    if frames.is_empty() {
        return Err(Error::EmptyAfterRemoval);
    }
    Ok(utt.with_content(frames, Alignment::new(segments)))
}
