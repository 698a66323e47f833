//! Verification metrics and leave-one-phoneme-out ablations.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::encoder::{remove_phoneme_frames, TraitSet};
use crate::error::{Error, Result};
use crate::inventory::{PhonemeInventory, Utterance};
use crate::model::Model;
use crate::trials::TrialLabel;

pub const DEFAULT_P_TARGET: f64 = 0.05;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScoreSet {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
}

impl ScoreSet {
    pub fn new(target: Vec<f64>, nontarget: Vec<f64>) -> Self {
        Self { target, nontarget }
    }

    pub fn push(&mut self, label: TrialLabel, score: f64) {
        match label {
            TrialLabel::Target => self.target.push(score),
            TrialLabel::Nontarget => self.nontarget.push(score),
        }
    }

    fn check(&self) -> Result<()> {
        if self.target.is_empty() || self.nontarget.is_empty() {
            return Err(Error::Metric(format!(
                "empty class: {} target, {} nontarget scores",
                self.target.len(),
                self.nontarget.len()
            )));
        }
        if self.target.iter().chain(&self.nontarget).any(|s| s.is_nan()) {
            return Err(Error::Metric("NaN score".into()));
        }
        Ok(())
    }
}

/// One ROC step: error rates when accepting every score `>= threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Operating {
    threshold: f64,
    p_fa: f64,
    p_miss: f64,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Operating points at `-inf`, every distinct score, and `+inf`.
fn sweep(s: &ScoreSet) -> Vec<Operating> {
    let tar = sorted(&s.target);
    let non = sorted(&s.nontarget);
    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    let mut thresholds: Vec<f64> = tar.iter().chain(&non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    std::iter::once(f64::NEG_INFINITY)
        .chain(thresholds)
        .chain(std::iter::once(f64::INFINITY))
        .map(|th| {
            let miss = tar.partition_point(|&x| x < th) as f64;
            let fa = non.len() - non.partition_point(|&x| x < th);
            Operating {
                threshold: th,
                p_fa: fa as f64 / nn,
                p_miss: miss / nt,
            }
        })
        .collect()
}

/// EER at the first sign change of `P_miss - P_fa`, linearly interpolated
/// between the two bracketing ROC steps.
fn crossing(points: &[Operating]) -> (f64, f64) {
    let mut prev = points[0];
    for &p in points {
        let g1 = p.p_miss - p.p_fa;
        if g1 >= 0.0 {
            if g1 == 0.0 {
                return (p.p_fa, p.threshold);
            }
            let g0 = prev.p_miss - prev.p_fa;
            let t = -g0 / (g1 - g0);
            return (prev.p_fa + t * (p.p_fa - prev.p_fa), p.threshold);
        }
        prev = p;
    }
    unreachable!("P_miss - P_fa is 1 at +inf")
}

fn dcf(p: &Operating, p_target: f64, c_miss: f64, c_fa: f64) -> f64 {
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    (c_miss * p.p_miss * p_target + c_fa * p.p_fa * (1.0 - p_target)) / norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Eer {
    pub eer: f64,
    /// Accept threshold at the crossing, clamped to the observed score range.
    pub threshold: f64,
}

pub fn compute_eer(s: &ScoreSet) -> Result<Eer> {
    s.check()?;
    let (eer, th) = crossing(&sweep(s));
    let lo = s.target.iter().chain(&s.nontarget).copied().fold(f64::INFINITY, f64::min);
    let hi = s.target.iter().chain(&s.nontarget).copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Eer {
        eer,
        threshold: th.clamp(lo, hi),
    })
}

pub fn compute_min_dcf(s: &ScoreSet, p_target: f64, c_miss: f64, c_fa: f64) -> Result<f64> {
    s.check()?;
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::Metric(format!("p_target {p_target} outside (0, 1)")));
    }
    if !(c_miss > 0.0 && c_fa > 0.0) {
        return Err(Error::Metric("costs must be positive".into()));
    }
    Ok(sweep(s)
        .iter()
        .map(|p| dcf(p, p_target, c_miss, c_fa))
        .fold(f64::INFINITY, f64::min))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(Error::Metric(format!(
            "spearman needs equal lengths >= 3, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Metric("zero variance in ranks".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut end = k + 1;
        while end < idx.len() && v[idx[end]] == v[idx[k]] {
            end += 1;
        }
        let avg = (k + end - 1) as f64 / 2.0 + 1.0;
        for &i in &idx[k..end] {
            out[i] = avg;
        }
        k = end;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Spectrogram,
    Trait,
}

/// Scores of a trial list plus the number of trials that could not be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub scores: ScoreSet,
    pub skipped: usize,
}

fn unscorable(e: &Error) -> bool {
    matches!(e, Error::NoSharedPhonemes | Error::DegenerateWeights(_))
}

/// Scores trials from per-utterance traits; `None` traits make a trial
/// unscorable.
pub fn score_from_traits(
    model: &Model,
    traits: &[Option<TraitSet>],
    trials: &[(usize, usize, TrialLabel)],
) -> Result<Scored> {
    let weights = model.weights();
    let mut out = Scored {
        scores: ScoreSet::default(),
        skipped: 0,
    };
    for &(e, t, label) in trials {
        let (Some(te), Some(tt)) = (&traits[e], &traits[t]) else {
            out.skipped += 1;
            continue;
        };
        match model.score_traits_with(te, tt, &weights) {
            Ok(b) => out.scores.push(label, b.y),
            Err(err) if unscorable(&err) => out.skipped += 1,
            Err(err) => return Err(err),
        }
    }
    Ok(out)
}

fn referenced(trials: &[(usize, usize, TrialLabel)]) -> BTreeSet<usize> {
    trials.iter().flat_map(|&(e, t, _)| [e, t]).collect()
}

/// Traits of every utterance named by a trial, computed after `edit`.
fn traits_for(
    model: &Model,
    utterances: &[Utterance],
    trials: &[(usize, usize, TrialLabel)],
    edit: impl Fn(&Utterance) -> Result<Option<Utterance>> + Sync,
) -> Result<Vec<Option<TraitSet>>> {
    let used = referenced(trials);
    utterances
        .par_iter()
        .enumerate()
        .map(|(k, u)| {
            if !used.contains(&k) {
                return Ok(None);
            }
            match edit(u)? {
                Some(u) => model.traits(&u).map(Some),
                None => Ok(None),
            }
        })
        .collect()
}

/// Baseline scores of unmodified utterances.
pub fn score_trials(
    model: &Model,
    utterances: &[Utterance],
    trials: &[(usize, usize, TrialLabel)],
) -> Result<Scored> {
    let traits = traits_for(model, utterances, trials, |u| Ok(Some(u.clone())))?;
    score_from_traits(model, &traits, trials)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub phoneme: usize,
    /// `None` when no target or no nontarget trial stayed scorable.
    pub eer: Option<f64>,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ablation {
    pub mode: AblationMode,
    pub rows: Vec<AblationRow>,
}

/// Leave-one-phoneme-out EER for every phoneme of the inventory.
///
/// Spectrogram mode deletes the phoneme's frames and re-encodes; trait mode
/// clears the phoneme from both trait sets before scoring.
pub fn leave_one_out(
    model: &Model,
    utterances: &[Utterance],
    trials: &[(usize, usize, TrialLabel)],
    mode: AblationMode,
) -> Result<Ablation> {
    let n = model.config.n_phonemes;
    let base = match mode {
        AblationMode::Trait => Some(traits_for(model, utterances, trials, |u| Ok(Some(u.clone())))?),
        AblationMode::Spectrogram => None,
    };
    let rows = (0..n)
        .map(|i| {
            let scored = match &base {
                Some(base) => {
                    let cleared: Vec<Option<TraitSet>> = base
                        .iter()
                        .map(|t| {
                            t.clone().map(|mut t| {
                                t.clear(i);
                                t
                            })
                        })
                        .collect();
                    score_from_traits(model, &cleared, trials)?
                }
                None => {
                    let traits = traits_for(model, utterances, trials, |u| match remove_phoneme_frames(u, i) {
                        Ok(u) => Ok(Some(u)),
                        Err(Error::EmptyAfterRemoval) => Ok(None),
                        Err(e) => Err(e),
                    })?;
                    score_from_traits(model, &traits, trials)?
                }
            };
            let eer = match compute_eer(&scored.scores) {
                Ok(e) => Some(e.eer),
                Err(Error::Metric(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(AblationRow {
                phoneme: i,
                eer,
                skipped: scored.skipped,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ablation { mode, rows })
}

/// Mean absolute difference between spectrogram-removal and trait-removal
/// EER changes, over phonemes defined in both.
pub fn fidelity_score(baseline: f64, spec: &[Option<f64>], traits: &[Option<f64>]) -> Result<f64> {
    if spec.len() != traits.len() {
        return Err(Error::Metric("ablations cover different inventories".into()));
    }
    let diffs: Vec<f64> = spec
        .iter()
        .zip(traits)
        .filter_map(|(s, t)| Some(((s.as_ref()? - baseline) - (t.as_ref()? - baseline)).abs()))
        .collect();
    if diffs.is_empty() {
        return Err(Error::Metric("no phoneme defined in both ablations".into()));
    }
    Ok(diffs.iter().sum::<f64>() / diffs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhonemeAblation {
    pub phoneme: String,
    pub weight: f64,
    pub eer_spec: Option<f64>,
    pub eer_trait: Option<f64>,
    pub skipped_spec: usize,
    pub skipped_trait: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_target: usize,
    pub n_nontarget: usize,
    pub skipped: usize,
    pub eer: f64,
    pub threshold: f64,
    pub min_dcf: f64,
    pub p_target: f64,
    pub ablation: Vec<PhonemeAblation>,
    /// Fraction units.
    pub fidelity: Option<f64>,
    /// Percentage points.
    pub fidelity_pct: Option<f64>,
}

/// Baseline metrics, both ablations and fidelity.
pub fn evaluate(
    model: &Model,
    inventory: &PhonemeInventory,
    utterances: &[Utterance],
    trials: &[(usize, usize, TrialLabel)],
    p_target: f64,
) -> Result<EvalReport> {
    if inventory.len() != model.config.n_phonemes {
        return Err(Error::Shape(format!(
            "inventory has {} phonemes, model expects {}",
            inventory.len(),
            model.config.n_phonemes
        )));
    }
    let base = score_trials(model, utterances, trials)?;
    let eer = compute_eer(&base.scores)?;
    let min_dcf = compute_min_dcf(&base.scores, p_target, 1.0, 1.0)?;
    let (spec, tr) = rayon::join(
        || leave_one_out(model, utterances, trials, AblationMode::Spectrogram),
        || leave_one_out(model, utterances, trials, AblationMode::Trait),
    );
    let (spec, tr) = (spec?, tr?);
    let spec_eer: Vec<_> = spec.rows.iter().map(|r| r.eer).collect();
    let trait_eer: Vec<_> = tr.rows.iter().map(|r| r.eer).collect();
    let fidelity = fidelity_score(eer.eer, &spec_eer, &trait_eer).ok();
    let weights = model.weights();
    let ablation = (0..inventory.len())
        .map(|i| PhonemeAblation {
            phoneme: inventory.label(i).to_string(),
            weight: weights[i],
            eer_spec: spec.rows[i].eer,
            eer_trait: tr.rows[i].eer,
            skipped_spec: spec.rows[i].skipped,
            skipped_trait: tr.rows[i].skipped,
        })
        .collect();
    Ok(EvalReport {
        n_target: base.scores.target.len(),
        n_nontarget: base.scores.nontarget.len(),
        skipped: base.skipped,
        eer: eer.eer,
        threshold: eer.threshold,
        min_dcf,
        p_target,
        ablation,
        fidelity,
        fidelity_pct: fidelity.map(|f| f * 100.0),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// One row per phoneme; undefined EERs are left empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let delta = |v: Option<f64>| opt(v.map(|v| v - self.eer));
        let mut out = String::from("phoneme,weight,baseline_eer,eer_spec,eer_trait,delta_spec,delta_trait\n");
        for r in &self.ablation {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.phoneme,
                r.weight,
                self.eer,
                opt(r.eer_spec),
                opt(r.eer_trait),
                delta(r.eer_spec),
                delta(r.eer_trait)
            );
        }
        out
    }
}
