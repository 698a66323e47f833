//! Verification and phonetic-trait losses, on plain values and on a tape.

use crate::autodiff::{lse, Tape, Tensor, Var};
use crate::encoder::TraitSet;
use crate::error::{Error, Result};

/// Cross-entropy of each score-matrix row against its diagonal entry:
/// `-(1/K) sum_k log(exp(Y[k][k]) / sum_j exp(Y[k][j]))`.
pub fn loss_veri(y: &[Vec<f64>]) -> Result<f64> {
    let k = y.len();
    if k == 0 || y.iter().any(|row| row.len() != k) {
        return Err(Error::Shape("score matrix must be square and non-empty".into()));
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "loss_veri" });
    }
    let total: f64 = y
        .iter()
        .enumerate()
        .map(|(i, row)| lse(row) - row[i])
        .sum();
    Ok(total / k as f64)
}

/// Smallest value `loss_veri` can take when every score lies in `(-1, 1)`.
pub fn loss_veri_floor(k: usize) -> f64 {
    let e = std::f64::consts::E;
    -(e / (e + (k as f64 - 1.0) / e)).ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Pulls matched traits together and pushes each enrollment trait away from
/// its nearest unmatched test trait:
///
/// `alpha/N1 * sum ||e_k^i - t_k^i||^2 - beta/N2 * sum min_{j != k} ||e_k^i - t_j^i||^2`
///
/// The first sum runs over `(i, k)` with both traits present. The second
/// runs over `(i, k)` with `e_k^i` present and at least one present
/// `t_j^i`, `j != k`; the minimum only considers those `j`.
pub fn loss_pho(enroll: &[TraitSet], test: &[TraitSet], alpha: f64, beta: f64) -> f64 {
    let k = enroll.len();
    let n_phonemes = enroll.first().map_or(0, |t| t.len());
    let (mut sum1, mut n1, mut sum2, mut n2) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n_phonemes {
        for a in 0..k {
            if !enroll[a].is_present(i) {
                continue;
            }
            if test[a].is_present(i) {
                sum1 += sq_dist(enroll[a].get(i), test[a].get(i));
                n1 += 1;
            }
            let nearest = (0..k)
                .filter(|&j| j != a && test[j].is_present(i))
                .map(|j| sq_dist(enroll[a].get(i), test[j].get(i)))
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))));
            if let Some(v) = nearest {
                sum2 += v;
                n2 += 1;
            }
        }
    }
    alpha / n1.max(1) as f64 * sum1 - beta / n2.max(1) as f64 * sum2
}

/// Records [`loss_veri`] for a `K x K` matrix of scalar score vars.
pub fn loss_veri_on_tape(tape: &Tape, y: &[Vec<Var>]) -> Result<Var> {
    let mut terms = Vec::with_capacity(y.len());
    for (k, row) in y.iter().enumerate() {
        let l = tape.log_sum_exp(tape.stack(row)?)?;
        terms.push(tape.sub(l, row[k])?);
    }
    tape.mean(tape.stack(&terms)?)
}

/// Records [`loss_pho`]; `None` marks an absent trait.
pub fn loss_pho_on_tape(
    tape: &Tape,
    enroll: &[Vec<Option<Var>>],
    test: &[Vec<Option<Var>>],
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let k = enroll.len();
    let n_phonemes = enroll.first().map_or(0, |t| t.len());
    let (mut matched, mut nearest) = (Vec::new(), Vec::new());
    for i in 0..n_phonemes {
        for a in 0..k {
            let Some(e) = enroll[a][i] else { continue };
            if let Some(t) = test[a][i] {
                matched.push(tape.squared_distance(e, t)?);
            }
            let candidates = (0..k)
                .filter(|&j| j != a)
                .filter_map(|j| test[j][i])
                .map(|t| tape.squared_distance(e, t))
                .collect::<Result<Vec<_>>>()?;
            if !candidates.is_empty() {
                nearest.push(tape.min(tape.stack(&candidates)?)?);
            }
        }
    }
    let zero = || tape.constant(Tensor::scalar(0.0));
    let term = |parts: &[Var], weight: f64| -> Result<Var> {
        if parts.is_empty() {
            return Ok(zero());
        }
        let s = tape.sum(tape.stack(parts)?)?;
        tape.scale(s, weight / parts.len() as f64)
    };
    let first = term(&matched, alpha)?;
    let second = term(&nearest, beta)?;
    tape.sub(first, second)
}
