//! Scale-invariant SDR, its improvement over the mixture, and two-speaker
//! permutation-invariant scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator floor. Caps the score of an exact match at about 120 dB
/// above the reference energy.
pub const EPSILON: f64 = 1e-12;

fn check_pair(reference: &[f32], estimate: &[f32]) -> Result<()> {
    if reference.is_empty() {
        return Err(Error::Domain("SI-SDR of an empty signal".into()));
    }
    if reference.len() != estimate.len() {
        return Err(Error::Domain(format!(
            "reference has {} samples, estimate has {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.iter().chain(estimate).any(|v| !v.is_finite()) {
        return Err(Error::Domain("SI-SDR input contains NaN or infinity".into()));
    }
    Ok(())
}

/// Scale-invariant signal-to-distortion ratio in dB, computed in f64.
/// Errors on empty, mismatched, non-finite or all-zero references. An
/// all-zero estimate scores negative infinity.
pub fn si_sdr(reference: &[f32], estimate: &[f32]) -> Result<f64> {
    check_pair(reference, estimate)?;
    let energy: f64 = reference.iter().map(|&r| f64::from(r).powi(2)).sum();
    if energy == 0.0 {
        return Err(Error::Domain("SI-SDR reference is identically zero".into()));
    }
    let dot: f64 = reference.iter().zip(estimate).map(|(&r, &e)| f64::from(r) * f64::from(e)).sum();
    let alpha = dot / energy;
    let (mut target, mut residual) = (0.0f64, 0.0f64);
    for (&r, &e) in reference.iter().zip(estimate) {
        let t = alpha * f64::from(r);
        target += t * t;
        residual += (f64::from(e) - t).powi(2);
    }
    Ok(10.0 * (target / (residual + EPSILON)).log10())
}

/// `si_sdr(reference, estimate) - si_sdr(reference, mixture)`.
pub fn si_sdr_improvement(reference: &[f32], estimate: &[f32], mixture: &[f32]) -> Result<f64> {
    check_pair(reference, mixture)?;
    Ok(si_sdr(reference, estimate)? - si_sdr(reference, mixture)?)
}

/// Best assignment of estimates to references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitScore {
    /// `permutation[i]` is the estimate matched to reference `i`.
    pub permutation: Vec<usize>,
    /// Per-reference SI-SDR under that permutation.
    pub scores: Vec<f64>,
    pub mean_db: f64,
}

/// Two-speaker permutation-invariant SI-SDR: tries both assignments and
/// keeps the one with the higher mean (identity on ties).
pub fn pit_score(references: &[&[f32]], estimates: &[&[f32]]) -> Result<PitScore> {
    if references.len() != 2 || estimates.len() != 2 {
        return Err(Error::Domain(format!(
            "permutation-invariant scoring takes 2 references and 2 estimates, got {} and {}",
            references.len(),
            estimates.len()
        )));
    }
    let mut best: Option<PitScore> = None;
    for perm in [[0usize, 1], [1, 0]] {
        let scores = vec![si_sdr(references[0], estimates[perm[0]])?, si_sdr(references[1], estimates[perm[1]])?];
        let mean_db = (scores[0] + scores[1]) / 2.0;
        if best.as_ref().is_none_or(|b| mean_db > b.mean_db) {
            best = Some(PitScore { permutation: perm.to_vec(), scores, mean_db });
        }
    }
    Ok(best.expect("two permutations"))
}
