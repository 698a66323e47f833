//! Phoneme inventories, alignments and utterances.
//!
//! An [`Utterance`] is the only input the model sees: a `T x F` matrix of
//! frame features together with an [`Alignment`] that assigns contiguous,
//! non-overlapping frame ranges to phonemes of a shared [`PhonemeInventory`].
//! Frame features are kept as `f32`, which is also their on-disk width, so a
//! corpus survives a save/load cycle bit for bit.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

/// The CMU phoneme set used when building default inventories.
pub const CMU_PHONEMES: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH",
    "UW", "V", "W", "Y", "Z", "ZH",
];

/// Label of the non-verbal marker in default inventories.
pub const NON_VERBAL: &str = "[N-V]";

/// A closed, ordered set of phoneme labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeInventory {
    labels: Vec<String>,
    index: HashMap<String, usize>,
    non_verbal: usize,
}

impl PhonemeInventory {
    pub fn new(labels: Vec<String>, non_verbal: usize) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Inventory(format!(
                "at least 2 labels required, got {}",
                labels.len()
            )));
        }
        if non_verbal >= labels.len() {
            return Err(Error::Inventory(format!(
                "non-verbal marker index {non_verbal} out of range"
            )));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if label.is_empty() {
                return Err(Error::Inventory(format!("label {i} is empty")));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::Inventory(format!("duplicate label {label:?}")));
            }
        }
        Ok(Self {
            labels,
            index,
            non_verbal,
        })
    }

    /// The first `size - 1` CMU phonemes followed by the non-verbal marker.
    ///
    /// `size` must lie in `2..=40`.
    pub fn cmu(size: usize) -> Result<Self> {
        if !(2..=CMU_PHONEMES.len() + 1).contains(&size) {
            return Err(Error::Inventory(format!(
                "CMU inventory size must be in 2..=40, got {size}"
            )));
        }
        let mut labels: Vec<String> = CMU_PHONEMES[..size - 1]
            .iter()
            .map(|s| s.to_string())
            .collect();
        labels.push(NON_VERBAL.to_string());
        Self::new(labels, size - 1)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn non_verbal(&self) -> usize {
        self.non_verbal
    }
}

/// A labelled frame range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Segment {
    pub phoneme: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(phoneme: usize, start: usize, end: usize) -> Self {
        Self { phoneme, start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Phoneme boundaries for one utterance, sorted by start frame.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Alignment {
    segments: Vec<Segment>,
}

impl Alignment {
    /// Wraps segments without validation; see [`Alignment::validate`].
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Checks bounds, ordering and inventory membership against an utterance
    /// of `n_frames` frames.
    pub fn validate(&self, utterance: &str, n_frames: usize, inventory_size: usize) -> Result<()> {
        for (k, seg) in self.segments.iter().enumerate() {
            if seg.phoneme >= inventory_size {
                return Err(Error::IndexOutOfInventory {
                    utterance: utterance.to_string(),
                    segment: k,
                    phoneme: seg.phoneme,
                    inventory_size,
                });
            }
            if seg.start >= seg.end || seg.end > n_frames {
                return Err(Error::InvalidUtterance {
                    utterance: utterance.to_string(),
                    reason: format!(
                        "segment {k} [{}, {}) outside 0..{n_frames} or empty",
                        seg.start, seg.end
                    ),
                });
            }
            if k > 0 && self.segments[k - 1].end > seg.start {
                return Err(Error::OverlappingSegments {
                    utterance: utterance.to_string(),
                    first: k - 1,
                    second: k,
                });
            }
        }
        Ok(())
    }

    /// Phoneme indices with at least one segment.
    pub fn phonemes(&self) -> BTreeSet<usize> {
        self.segments.iter().map(|s| s.phoneme).collect()
    }

    pub fn contains(&self, phoneme: usize) -> bool {
        self.segments.iter().any(|s| s.phoneme == phoneme)
    }

    /// Every frame index covered by a segment of `phoneme`, ascending.
    pub fn frames_of(&self, phoneme: usize) -> Vec<usize> {
        self.segments
            .iter()
            .filter(|s| s.phoneme == phoneme)
            .flat_map(|s| s.start..s.end)
            .collect()
    }

    /// `(start, end)` pairs of every segment of `phoneme`.
    pub fn spans_of(&self, phoneme: usize) -> Vec<(usize, usize)> {
        self.segments
            .iter()
            .filter(|s| s.phoneme == phoneme)
            .map(|s| (s.start, s.end))
            .collect()
    }

    /// Restricts the alignment to the window `[start, start + len)` and
    /// re-bases it to frame 0. Partial segments are truncated, segments
    /// falling outside the window are dropped.
    pub fn clip(&self, start: usize, len: usize) -> Alignment {
        let end = start + len;
        let segments = self
            .segments
            .iter()
            .filter_map(|s| {
                let lo = s.start.max(start);
                let hi = s.end.min(end);
                (lo < hi).then(|| Segment::new(s.phoneme, lo - start, hi - start))
            })
            .collect();
        Alignment { segments }
    }
}

/// Phonemes present in both alignments.
pub fn shared_phonemes(a: &Alignment, b: &Alignment) -> BTreeSet<usize> {
    let pa = a.phonemes();
    b.phonemes().intersection(&pa).copied().collect()
}

/// One recording: frame features plus alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    n_frames: usize,
    dim: usize,
    frames: Vec<f32>,
    alignment: Alignment,
}

impl Utterance {
    /// Builds a validated utterance from a row-major `n_frames x dim` matrix.
    pub fn new(
        id: impl Into<String>,
        speaker_id: impl Into<String>,
        dim: usize,
        frames: Vec<f32>,
        alignment: Alignment,
        inventory_size: usize,
    ) -> Result<Self> {
        let id = id.into();
        if dim == 0 {
            return Err(Error::InvalidUtterance {
                utterance: id,
                reason: "feature dimension must be at least 1".into(),
            });
        }
        if !frames.len().is_multiple_of(dim) || frames.is_empty() {
            return Err(Error::InvalidUtterance {
                utterance: id,
                reason: format!(
                    "frame buffer of length {} is not a non-empty multiple of F = {dim}",
                    frames.len()
                ),
            });
        }
        if let Some(pos) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidUtterance {
                utterance: id,
                reason: format!("non-finite feature at frame {}", pos / dim),
            });
        }
        let n_frames = frames.len() / dim;
        alignment.validate(&id, n_frames, inventory_size)?;
        Ok(Self {
            id,
            speaker_id: speaker_id.into(),
            n_frames,
            dim,
            frames,
            alignment,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn alignment(&self) -> &Alignment {
        &self.alignment
    }

    /// Contiguous window `[start, start + len)` with the alignment clipped to it.
    pub fn crop(&self, start: usize, len: usize) -> Utterance {
        let len = len.min(self.n_frames - start);
        Utterance {
            id: self.id.clone(),
            speaker_id: self.speaker_id.clone(),
            n_frames: len,
            dim: self.dim,
            frames: self.frames[start * self.dim..(start + len) * self.dim].to_vec(),
            alignment: self.alignment.clip(start, len),
        }
    }

    /// Replaces frames and alignment, keeping ids. Used by frame-removal
    /// transforms that have already re-based the alignment.
    pub(crate) fn with_content(&self, frames: Vec<f32>, alignment: Alignment) -> Utterance {
        Utterance {
            id: self.id.clone(),
            speaker_id: self.speaker_id.clone(),
            n_frames: frames.len() / self.dim,
            dim: self.dim,
            frames,
            alignment,
        }
    }
}
