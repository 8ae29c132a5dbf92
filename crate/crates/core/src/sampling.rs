//! Nucleus (top-p) sampling.

use rand::Rng;

use crate::error::{Error, Result};

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("nucleus mass p = {p} outside (0, 1]")));
    }
    Ok(())
}

/// The smallest set of tokens, taken in order of decreasing probability
/// (lower id first on ties), whose cumulative mass reaches `p`. If rounding
/// keeps the total below `p`, every token with nonzero mass is kept.
pub fn nucleus_candidates(probs: &[f64], p: f64) -> Result<Vec<usize>> {
    check_p(p)?;
    if probs.is_empty() {
        return Err(Error::DegenerateInput {
            op: "nucleus_candidates",
            detail: "empty distribution".into(),
        });
    }
    if probs.iter().any(|q| !q.is_finite() || *q < 0.0) {
        return Err(Error::Data("probabilities must be finite and non-negative".into()));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    for (k, &i) in order.iter().enumerate() {
        mass += probs[i];
        if mass >= p {
            order.truncate(k + 1);
            return Ok(order);
        }
    }
    let nonzero = order.iter().take_while(|&&i| probs[i] > 0.0).count().max(1);
    order.truncate(nonzero);
    Ok(order)
}

/// Draws one token from the renormalized nucleus of `probs`.
pub fn sample_nucleus<R: Rng + ?Sized>(probs: &[f64], p: f64, rng: &mut R) -> Result<usize> {
    let candidates = nucleus_candidates(probs, p)?;
    let total: f64 = candidates.iter().map(|&i| probs[i]).sum();
    if total <= 0.0 {
        return Ok(candidates[0]);
    }
    let mut u = rng.random::<f64>() * total;
    for &i in &candidates {
        u -= probs[i];
        if u < 0.0 {
            return Ok(i);
        }
    }
    Ok(*candidates.last().expect("nonempty nucleus"))
}
