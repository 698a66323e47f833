use std::collections::BTreeMap;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inventory::Utterance;

/// Length of the training crops: fixed, or drawn per batch from an
/// inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Duration {
    Fixed(usize),
    Mix(usize, usize),
}

impl Duration {
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        match *self {
            Duration::Fixed(n) => n,
            Duration::Mix(lo, hi) => rng.random_range(lo..=hi),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Duration::Fixed(n) if n >= 1 => Ok(()),
            Duration::Mix(lo, hi) if lo >= 1 && lo <= hi => Ok(()),
            other => Err(Error::Config(format!("invalid duration {other:?}"))),
        }
    }
}

/// Utterance indices grouped by speaker, restricted to speakers with at
/// least two utterances. Speakers are kept in id order.
#[derive(Debug, Clone)]
pub struct SpeakerIndex {
    speakers: Vec<(String, Vec<usize>)>,
}

impl SpeakerIndex {
    pub fn new(utterances: &[Utterance]) -> Self {
        let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, u) in utterances.iter().enumerate() {
            by_speaker.entry(u.speaker_id.as_str()).or_default().push(i);
        }
        let speakers = by_speaker
            .into_iter()
            .filter(|(_, utts)| utts.len() >= 2)
            .map(|(s, utts)| (s.to_string(), utts))
            .collect();
        Self { speakers }
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }
}

/// One enrollment/test crop per sampled speaker.
#[derive(Debug, Clone)]
pub struct Batch {
    pub speakers: Vec<String>,
    pub enroll: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Batch {
    pub fn k(&self) -> usize {
        self.speakers.len()
    }
}

/// Random contiguous window of `len` frames, or the whole utterance when it
/// is not longer than `len`.
pub fn random_crop(utt: &Utterance, len: usize, rng: &mut impl Rng) -> Utterance {
    if len >= utt.n_frames() {
        return utt.clone();
    }
    let start = rng.random_range(0..=utt.n_frames() - len);
    utt.crop(start, len)
}

/// Samples `k` distinct speakers and two distinct utterances of each,
/// cropped to `duration` frames.
pub fn sample_batch(
    utterances: &[Utterance],
    index: &SpeakerIndex,
    k: usize,
    duration: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    if k < 2 || index.len() < k {
        return Err(Error::Insufficient(format!(
            "need {k} speakers with >= 2 utterances, corpus has {}",
            index.len()
        )));
    }
    let chosen = index::sample(rng, index.len(), k);
    let mut batch = Batch {
        speakers: Vec::with_capacity(k),
        enroll: Vec::with_capacity(k),
        test: Vec::with_capacity(k),
    };
    for s in chosen.iter() {
        let (speaker, utts) = &index.speakers[s];
        let pair: Vec<usize> = utts.choose_multiple(rng, 2).copied().collect();
        batch.speakers.push(speaker.clone());
        batch.enroll.push(random_crop(&utterances[pair[0]], duration, rng));
        batch.test.push(random_crop(&utterances[pair[1]], duration, rng));
    }
    Ok(batch)
}
