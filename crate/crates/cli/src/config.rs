use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use phinet::encoder::EncoderConfig;
use phinet::model::ModelConfig;
use phinet::scoring::NormFn;
use phinet::synth::{linspace, SynthConfig};
use phinet::training::{Duration, TrainConfig};
use serde::{Deserialize, Serialize};

/// Every tunable of a run in one flat table. Paths are relative to the
/// output directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    pub n_speakers: usize,
    pub test_speakers: usize,
    pub utts_per_speaker: usize,
    pub n_phonemes: usize,
    pub feature_dim: usize,
    pub frames_per_segment: [usize; 2],
    pub segments_per_utt: [usize; 2],
    /// Explicit per-phoneme spreads; empty means evenly spaced from
    /// `sigma_between_lo` to `sigma_between_hi`.
    pub sigma_between: Vec<f64>,
    pub sigma_between_lo: f64,
    pub sigma_between_hi: f64,
    pub sigma_within: f64,
    pub anchor_sigma: f64,
    pub noise_prob: f64,
    pub noise_sigma: f64,
    pub n_target: usize,
    pub n_nontarget: usize,

    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub context: usize,
    pub comparison_width: usize,
    pub norm: NormFn,
    pub epsilon: f64,

    pub k: usize,
    pub duration: Duration,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub steps: usize,
    pub max_resample: usize,

    pub p_target: f64,
    pub sweep: Vec<Duration>,

    pub corpus: PathBuf,
    pub test_corpus: PathBuf,
    pub trials: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let enc = EncoderConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            n_speakers: synth.n_speakers,
            test_speakers: 16,
            utts_per_speaker: synth.utts_per_speaker,
            n_phonemes: synth.n_phonemes,
            feature_dim: synth.feature_dim,
            frames_per_segment: [synth.frames_per_segment.0, synth.frames_per_segment.1],
            segments_per_utt: [synth.segments_per_utt.0, synth.segments_per_utt.1],
            sigma_between: Vec::new(),
            sigma_between_lo: 0.0,
            sigma_between_hi: 1.0,
            sigma_within: synth.sigma_within,
            anchor_sigma: synth.anchor_sigma,
            noise_prob: synth.noise_prob,
            noise_sigma: synth.noise_sigma,
            n_target: 1000,
            n_nontarget: 1000,
            output_dim: enc.output_dim,
            hidden: enc.hidden,
            context: enc.context,
            comparison_width: model.comparison_width,
            norm: model.norm,
            epsilon: model.epsilon,
            k: train.k,
            duration: train.duration,
            alpha: train.alpha,
            beta: train.beta,
            gamma: train.gamma,
            lr_start: train.lr_start,
            lr_end: train.lr_end,
            steps: train.steps,
            max_resample: train.max_resample,
            p_target: phinet::eval::DEFAULT_P_TARGET,
            sweep: vec![Duration::Fixed(40), Duration::Fixed(80), Duration::Fixed(160)],
            corpus: "corpus.phic".into(),
            test_corpus: "test.phic".into(),
            trials: "trials.txt".into(),
            checkpoint: "model.phim".into(),
        }
    }
}

/// Parses the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Defaults, then the config file, then `--set` overrides, then `--seed`.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table = toml::Table::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        }
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects key=value, got {item:?}"))?;
            table.insert(key.trim().to_string(), parse_value(value.trim()));
        }
        if let Some(seed) = seed {
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| anyhow!("invalid config: {}", e.message()))?;
        cfg.synth().validate()?;
        cfg.test_synth().validate()?;
        cfg.model().validate()?;
        cfg.train().validate()?;
        if cfg.sweep.is_empty() {
            bail!("sweep must list at least one duration");
        }
        for d in &cfg.sweep {
            d.validate()?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn synth(&self) -> SynthConfig {
        let sigma_between = if self.sigma_between.is_empty() {
            linspace(self.sigma_between_lo, self.sigma_between_hi, self.n_phonemes)
        } else {
            self.sigma_between.clone()
        };
        SynthConfig {
            n_speakers: self.n_speakers,
            utts_per_speaker: self.utts_per_speaker,
            n_phonemes: self.n_phonemes,
            feature_dim: self.feature_dim,
            frames_per_segment: (self.frames_per_segment[0], self.frames_per_segment[1]),
            segments_per_utt: (self.segments_per_utt[0], self.segments_per_utt[1]),
            sigma_between,
            sigma_within: self.sigma_within,
            anchor_sigma: self.anchor_sigma,
            noise_prob: self.noise_prob,
            noise_sigma: self.noise_sigma,
            first_speaker: 0,
            seed: self.seed,
        }
    }

    /// Held-out speakers that follow the training speakers.
    pub fn test_synth(&self) -> SynthConfig {
        SynthConfig {
            n_speakers: self.test_speakers,
            first_speaker: self.n_speakers,
            ..self.synth()
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_dim: self.feature_dim,
                output_dim: self.output_dim,
                hidden: self.hidden.clone(),
                context: self.context,
            },
            n_phonemes: self.n_phonemes,
            comparison_width: self.comparison_width,
            norm: self.norm,
            epsilon: self.epsilon,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            k: self.k,
            duration: self.duration,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            steps: self.steps,
            max_resample: self.max_resample,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "steps = 10\nseed = 3\nhidden = [8, 8]\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["steps=20".into(), "norm=sigmoid".into()], Some(9)).unwrap();
        assert_eq!(cfg.steps, 20);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.hidden, vec![8, 8]);
        assert_eq!(cfg.norm, NormFn::Sigmoid);
        assert_eq!(cfg.train().seed, 9);
    }

    #[test]
    fn unknown_keys_and_invalid_values_are_rejected() {
        assert!(RunConfig::resolve(None, &["stepz=3".into()], None).is_err());
        assert!(RunConfig::resolve(None, &["k=1".into()], None).is_err());
        assert!(RunConfig::resolve(None, &["context=2".into()], None).is_err());
        assert!(RunConfig::resolve(None, &["steps".into()], None).is_err());
    }

    #[test]
    fn dump_round_trips() {
        let cfg = RunConfig::resolve(None, &["duration=[16, 64]".into()], None).unwrap();
        assert_eq!(cfg.duration, Duration::Mix(16, 64));
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
