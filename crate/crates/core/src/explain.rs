//! Local (per-trial), global (per-phoneme weight) and centroid explanations.

use std::fmt::Write as _;

use serde::Serialize;

use crate::encoder::TraitSet;
use crate::error::{Error, Result};
use crate::inventory::{PhonemeInventory, Utterance};
use crate::model::Model;
use crate::scoring::{aggregate, phonetic_cosine};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialIds {
    pub enroll: String,
    pub test: String,
}

/// One shared phoneme of a trial. Spans are half-open frame ranges.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalRow {
    pub label: String,
    pub enroll_span: Vec<[usize; 2]>,
    pub test_span: Vec<[usize; 2]>,
    pub d: f64,
    pub s: f64,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalReport {
    pub trial: TrialIds,
    pub phonemes: Vec<LocalRow>,
    pub y: f64,
}

fn spans(u: &Utterance, i: usize) -> Vec<[usize; 2]> {
    u.alignment().spans_of(i).into_iter().map(|(s, e)| [s, e]).collect()
}

pub fn explain_trial(
    model: &Model,
    inventory: &PhonemeInventory,
    enroll: &Utterance,
    test: &Utterance,
) -> Result<LocalReport> {
    check_inventory(model, inventory)?;
    let b = model.score(enroll, test)?;
    let phonemes = b
        .shared()
        .map(|i| LocalRow {
            label: inventory.label(i).to_string(),
            enroll_span: spans(enroll, i),
            test_span: spans(test, i),
            d: b.d[i].unwrap(),
            s: b.s[i].unwrap(),
            w: b.w[i],
        })
        .collect();
    Ok(LocalReport {
        trial: TrialIds {
            enroll: enroll.id.clone(),
            test: test.id.clone(),
        },
        phonemes,
        y: b.y,
    })
}

fn check_inventory(model: &Model, inventory: &PhonemeInventory) -> Result<()> {
    if inventory.len() != model.config.n_phonemes {
        return Err(Error::Shape(format!(
            "inventory has {} phonemes, model expects {}",
            inventory.len(),
            model.config.n_phonemes
        )));
    }
    Ok(())
}

impl LocalReport {
    /// Recomputes `y` from the listed rows alone.
    pub fn reaggregate(&self, epsilon: f64) -> Result<f64> {
        aggregate(self.phonemes.iter().map(|r| (r.w, r.s)), epsilon)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let fmt_spans = |v: &[[usize; 2]]| {
            v.iter()
                .map(|[s, e]| format!("[{s},{e})"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let rows: Vec<[String; 6]> = self
            .phonemes
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    fmt_spans(&r.enroll_span),
                    fmt_spans(&r.test_span),
                    format!("{:.2}", r.d),
                    format!("{:.2}", r.s),
                    format!("{:.2}", r.w),
                ]
            })
            .collect();
        let header = ["phoneme", "enroll", "test", "d", "s", "w"].map(String::from);
        let mut widths = header.clone().map(|h| h.len());
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = format!("enroll: {}\ntest:   {}\n", self.trial.enroll, self.trial.test);
        for r in std::iter::once(&header).chain(&rows) {
            let line: Vec<String> = r
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(k, (c, w))| if k < 3 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        let _ = writeln!(out, "y = {:.4}", self.y);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalEntry {
    pub label: String,
    pub phoneme: usize,
    pub weight: f64,
}

/// Phonemes ranked by normalized weight, descending; ties by label.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalReport {
    pub entries: Vec<GlobalEntry>,
}

pub fn explain_global(model: &Model, inventory: &PhonemeInventory) -> Result<GlobalReport> {
    check_inventory(model, inventory)?;
    Ok(rank_weights(&model.weights(), inventory))
}

pub fn rank_weights(weights: &[f64], inventory: &PhonemeInventory) -> GlobalReport {
    let mut entries: Vec<GlobalEntry> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| GlobalEntry {
            label: inventory.label(i).to_string(),
            phoneme: i,
            weight: w,
        })
        .collect();
    entries.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.label.cmp(&b.label)));
    GlobalReport { entries }
}

impl GlobalReport {
    pub fn order(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.phoneme).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,weight\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{}", e.label, e.weight);
        }
        out
    }
}

/// Mean cosine between a speaker's individual traits and per-phoneme
/// centroids. `values[a][b]` pairs the phoneme `order[a]` (traits) with
/// `order[b]` (centroid); `None` marks phonemes the speaker never produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CentroidHeatmap {
    pub speaker: String,
    pub order: Vec<usize>,
    pub values: Vec<Vec<Option<f64>>>,
}

/// Builds the heatmap from one trait set per utterance of a speaker.
pub fn centroid_heatmap_from_traits(speaker: &str, traits: &[TraitSet], order: &[usize]) -> Result<CentroidHeatmap> {
    let n = traits.first().map_or(0, TraitSet::len);
    let occurrences: Vec<Vec<&[f64]>> = (0..n)
        .map(|i| traits.iter().filter(|t| t.is_present(i)).map(|t| t.get(i)).collect())
        .collect();
    let centroids: Vec<Option<Vec<f64>>> = occurrences
        .iter()
        .map(|occ| {
            let first = occ.first()?;
            let mut c = vec![0.0; first.len()];
            for o in occ {
                for (c, v) in c.iter_mut().zip(*o) {
                    *c += v;
                }
            }
            Some(c.into_iter().map(|v| v / occ.len() as f64).collect())
        })
        .collect();
    let values = order
        .iter()
        .map(|&i| {
            order
                .iter()
                .map(|&j| {
                    let c = centroids[j].as_ref()?;
                    if occurrences[i].is_empty() {
                        return None;
                    }
                    let sum: Result<f64> = occurrences[i].iter().map(|o| phonetic_cosine(o, c)).sum();
                    Some(sum.map(|s| s / occurrences[i].len() as f64))
                })
                .map(Option::transpose)
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CentroidHeatmap {
        speaker: speaker.to_string(),
        order: order.to_vec(),
        values,
    })
}

/// Heatmap of one speaker, rows and columns in global-report order.
pub fn centroid_heatmap(model: &Model, inventory: &PhonemeInventory, utterances: &[Utterance]) -> Result<CentroidHeatmap> {
    check_inventory(model, inventory)?;
    let speaker = utterances
        .first()
        .map(|u| u.speaker_id.clone())
        .ok_or_else(|| Error::Insufficient("heatmap needs at least one utterance".into()))?;
    if let Some(u) = utterances.iter().find(|u| u.speaker_id != speaker) {
        return Err(Error::Config(format!(
            "heatmap mixes speakers {speaker} and {}",
            u.speaker_id
        )));
    }
    let traits = utterances.iter().map(|u| model.traits(u)).collect::<Result<Vec<_>>>()?;
    let order = explain_global(model, inventory)?.order();
    centroid_heatmap_from_traits(&speaker, &traits, &order)
}

impl CentroidHeatmap {
    pub fn diagonal_mean(&self) -> Option<f64> {
        let d: Vec<f64> = (0..self.order.len()).filter_map(|a| self.values[a][a]).collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }

    pub fn off_diagonal_mean(&self) -> Option<f64> {
        let n = self.order.len();
        let d: Vec<f64> = (0..n)
            .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
            .filter_map(|(a, b)| self.values[a][b])
            .collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }
}

/// Rows `speaker,i,j,value` with phoneme labels; undefined cells are empty.
pub fn heatmaps_to_csv(maps: &[CentroidHeatmap], inventory: &PhonemeInventory) -> String {
    let mut out = String::from("speaker,i,j,value\n");
    for m in maps {
        for (a, &i) in m.order.iter().enumerate() {
            for (b, &j) in m.order.iter().enumerate() {
                let v = m.values[a][b].map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{},{},{},{}", m.speaker, inventory.label(i), inventory.label(j), v);
            }
        }
    }
    out
}
