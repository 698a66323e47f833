//! Synthetic corpora with known per-phoneme speaker distinctiveness.
//!
//! Each phoneme `i` has a global anchor `g(i)`. Speaker `s` gets a prototype
//! `p(s, i) = g(i) + sigma_between[i] * N(0, I)` and every frame of an
//! `i`-segment is `p(s, i) + sigma_within * N(0, I)`. Phonemes with a larger
//! `sigma_between` separate speakers better, which gives a ground-truth
//! ranking to compare learned phoneme weights against.
//!
//! Anchors depend only on `seed`; a speaker depends on `seed` and its global
//! index; an utterance on `seed`, speaker and utterance index. Generating
//! speakers `32..48` with `first_speaker = 32` therefore yields a held-out
//! population that shares anchors with a training population `0..32`.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inventory::{Alignment, PhonemeInventory, Segment, Utterance};
use crate::trials::{Trial, TrialLabel, TrialList};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub n_phonemes: usize,
    pub feature_dim: usize,
    /// Inclusive range of segment lengths in frames.
    pub frames_per_segment: (usize, usize),
    /// Inclusive range of segment counts per utterance.
    pub segments_per_utt: (usize, usize),
    /// Per-phoneme spread of speaker prototypes around the anchor.
    pub sigma_between: Vec<f64>,
    pub sigma_within: f64,
    /// Spread of the phoneme anchors themselves.
    pub anchor_sigma: f64,
    /// Probability that an utterance receives additive corruption.
    pub noise_prob: f64,
    pub noise_sigma: f64,
    /// Global index of the first generated speaker.
    pub first_speaker: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let n_phonemes = 12;
        Self {
            n_speakers: 32,
            utts_per_speaker: 20,
            n_phonemes,
            feature_dim: 16,
            frames_per_segment: (3, 8),
            segments_per_utt: (16, 24),
            sigma_between: linspace(0.0, 1.0, n_phonemes),
            sigma_within: 0.5,
            anchor_sigma: 0.5,
            noise_prob: 0.0,
            noise_sigma: 0.0,
            first_speaker: 0,
            seed: 0,
        }
    }
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_speakers < 2 {
            return bad(format!("n_speakers must be >= 2, got {}", self.n_speakers));
        }
        if self.utts_per_speaker == 0 || self.feature_dim == 0 {
            return bad("utts_per_speaker and feature_dim must be >= 1".into());
        }
        if self.n_phonemes < 2 || self.n_phonemes > 40 {
            return bad(format!("n_phonemes must be in 2..=40, got {}", self.n_phonemes));
        }
        if self.sigma_between.len() != self.n_phonemes {
            return bad(format!(
                "sigma_between has {} entries, expected n_phonemes = {}",
                self.sigma_between.len(),
                self.n_phonemes
            ));
        }
        let sigmas = self
            .sigma_between
            .iter()
            .chain([&self.sigma_within, &self.anchor_sigma, &self.noise_sigma]);
        if sigmas.into_iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("all sigmas must be finite and >= 0".into());
        }
        let (fa, fb) = self.frames_per_segment;
        let (sa, sb) = self.segments_per_utt;
        if fa == 0 || fa > fb || sa == 0 || sa > sb {
            return bad("frames_per_segment and segments_per_utt must be non-empty ranges of positive values".into());
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return bad(format!("noise_prob must be in [0, 1], got {}", self.noise_prob));
        }
        Ok(())
    }

    /// Per-phoneme distinctiveness implied by this configuration.
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            distinctiveness: self
                .sigma_between
                .iter()
                .map(|s| s / (self.sigma_within + GROUND_TRUTH_EPS))
                .collect(),
        }
    }
}

const GROUND_TRUTH_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub distinctiveness: Vec<f64>,
}

impl GroundTruth {
    pub fn to_csv(&self, inventory: &PhonemeInventory) -> String {
        let mut out = String::from("phoneme,distinctiveness\n");
        for (label, d) in inventory.labels().iter().zip(&self.distinctiveness) {
            let _ = writeln!(out, "{label},{d}");
        }
        out
    }
}

fn sub_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect()
}

fn anchors(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(&[cfg.seed, 0]));
    (0..cfg.n_phonemes)
        .map(|_| normal_vec(&mut rng, cfg.feature_dim, cfg.anchor_sigma))
        .collect()
}

/// Offset that moves the anchors into the nonnegative orthant; prototypes
/// that still fall below zero are clamped. It depends only on the anchors, so
/// every speaker partition generated from the same seed shares it.
fn orthant_shift(anchors: &[Vec<f64>]) -> f64 {
    let lowest = anchors.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    (-lowest).max(0.0)
}

/// Prototypes `p(s, i)` of global speaker `speaker`, one row per phoneme.
pub fn speaker_prototypes(cfg: &SynthConfig, speaker: usize) -> Vec<Vec<f64>> {
    let g = anchors(cfg);
    prototypes_with(cfg, &g, orthant_shift(&g), speaker)
}

fn prototypes_with(cfg: &SynthConfig, anchors: &[Vec<f64>], shift: f64, speaker: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(&[cfg.seed, 1, speaker as u64]));
    anchors
        .iter()
        .zip(&cfg.sigma_between)
        .map(|(g, &sb)| {
            let offset = normal_vec(&mut rng, cfg.feature_dim, sb);
            g.iter()
                .zip(offset)
                .map(|(a, o)| (a + o + shift).max(0.0))
                .collect()
        })
        .collect()
}

pub fn speaker_id(speaker: usize) -> String {
    format!("spk{speaker:03}")
}

/// Generates inventory, utterances and ground truth. Deterministic in `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<(PhonemeInventory, Vec<Utterance>, GroundTruth)> {
    cfg.validate()?;
    let inventory = PhonemeInventory::cmu(cfg.n_phonemes)?;
    let g = anchors(cfg);
    let shift = orthant_shift(&g);
    let f = cfg.feature_dim;
    let mut utterances = Vec::with_capacity(cfg.n_speakers * cfg.utts_per_speaker);
    for speaker in cfg.first_speaker..cfg.first_speaker + cfg.n_speakers {
        let protos = prototypes_with(cfg, &g, shift, speaker);
        let spk = speaker_id(speaker);
        for u in 0..cfg.utts_per_speaker {
            let mut rng =
                ChaCha8Rng::seed_from_u64(sub_seed(&[cfg.seed, 2, speaker as u64, u as u64]));
            let n_segments = rng.random_range(cfg.segments_per_utt.0..=cfg.segments_per_utt.1);
            let mut frames: Vec<f32> = Vec::new();
            let mut segments = Vec::with_capacity(n_segments);
            let mut t = 0;
            for _ in 0..n_segments {
                let phoneme = rng.random_range(0..cfg.n_phonemes);
                let len = rng.random_range(cfg.frames_per_segment.0..=cfg.frames_per_segment.1);
                for _ in 0..len {
                    let noise = normal_vec(&mut rng, f, cfg.sigma_within);
                    frames.extend(protos[phoneme].iter().zip(noise).map(|(p, n)| (p + n) as f32));
                }
                segments.push(Segment::new(phoneme, t, t + len));
                t += len;
            }
            if cfg.noise_prob > 0.0 && rng.random_bool(cfg.noise_prob) {
                let corruption = normal_vec(&mut rng, frames.len(), cfg.noise_sigma);
                for (v, c) in frames.iter_mut().zip(corruption) {
                    *v = (f64::from(*v) + c) as f32;
                }
            }
            utterances.push(Utterance::new(
                format!("{spk}-u{u:03}"),
                spk.clone(),
                f,
                frames,
                Alignment::new(segments),
                inventory.len(),
            )?);
        }
    }
    Ok((inventory, utterances, cfg.ground_truth()))
}

/// Samples distinct labelled pairs: targets share a speaker, nontargets do not.
pub fn make_trials(
    utterances: &[Utterance],
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<TrialList> {
    let n = utterances.len();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(&[seed, 3]));
    let same = |a: usize, b: usize| utterances[a].speaker_id == utterances[b].speaker_id;

    let mut target_pool: Vec<(usize, usize)> = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if same(a, b) {
                target_pool.push((a, b));
            }
        }
    }
    let total_pairs = n * n.saturating_sub(1) / 2;
    let nontarget_total = total_pairs - target_pool.len();
    if n_target > target_pool.len() {
        return Err(Error::Insufficient(format!(
            "requested {n_target} target trials, only {} same-speaker pairs exist",
            target_pool.len()
        )));
    }
    if n_nontarget > nontarget_total {
        return Err(Error::Insufficient(format!(
            "requested {n_nontarget} nontarget trials, only {nontarget_total} cross-speaker pairs exist"
        )));
    }
    target_pool.shuffle(&mut rng);
    let targets = target_pool.into_iter().take(n_target);

    let nontargets: Vec<(usize, usize)> = if n_nontarget * 2 >= nontarget_total || nontarget_total <= 1 << 20 {
        let mut pool: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| !same(a, b))
            .collect();
        pool.shuffle(&mut rng);
        pool.truncate(n_nontarget);
        pool
    } else {
        let mut seen = HashSet::with_capacity(n_nontarget);
        let mut picked = Vec::with_capacity(n_nontarget);
        while picked.len() < n_nontarget {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            let key = (a.min(b), a.max(b));
            if a != b && !same(a, b) && seen.insert(key) {
                picked.push(key);
            }
        }
        picked
    };

    let mut entries: Vec<Trial> = targets
        .map(|p| (p, TrialLabel::Target))
        .chain(nontargets.into_iter().map(|p| (p, TrialLabel::Nontarget)))
        .map(|((a, b), label)| {
            let (e, t) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
            Trial {
                enroll: utterances[e].id.clone(),
                test: utterances[t].id.clone(),
                label,
            }
        })
        .collect();
    entries.shuffle(&mut rng);
    Ok(TrialList { entries })
}
