//! Separation quality metrics and the best-assignment search.
//!
//! All dB values are clamped to [-100, +100] so that identical or orthogonal
//! signals yield finite, comparable scores. Zero-energy inputs are rejected
//! rather than clamped; silence in this pipeline indicates a bug upstream.

use itertools::Itertools;

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Numerical floor added to residual energies before taking the ratio.
pub const EPSILON: f64 = 1e-12;
/// Minimum sum of squares a signal must have to be scorable.
pub const MIN_ENERGY: f64 = 1e-12;
/// dB clamp applied to every metric value.
pub const DB_CLAMP: f64 = 100.0;
/// Largest source count the exhaustive permutation search accepts.
pub const MAX_SOURCES: usize = 8;

/// Which pairwise metric drives the assignment search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    SiSnr,
    Sdr,
}

/// Result of the exhaustive permutation search: the estimate-to-reference
/// mapping and the mean pairwise score it achieves.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `permutation[i]` is the estimate index paired with reference `i`.
    pub permutation: Vec<usize>,
    pub mean_score_db: f64,
}

fn check_pair(reference: &Waveform, estimate: &Waveform) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::Shape(format!(
            "length mismatch: reference {} vs estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.sample_rate_hz() != estimate.sample_rate_hz() {
        return Err(Error::Shape(format!(
            "sample rate mismatch: {} vs {}",
            reference.sample_rate_hz(),
            estimate.sample_rate_hz()
        )));
    }
    if reference.energy() <= MIN_ENERGY {
        return Err(Error::DegenerateSignal("reference has zero energy".into()));
    }
    if estimate.energy() <= MIN_ENERGY {
        return Err(Error::DegenerateSignal("estimate has zero energy".into()));
    }
    Ok(())
}

fn clamp_db(ratio: f64) -> f64 {
    let db = 10.0 * ratio.log10();
    db.clamp(-DB_CLAMP, DB_CLAMP)
}

/// Scale-invariant signal-to-noise ratio in dB. The estimate is projected
/// onto the reference; the score is the energy ratio of the projection to
/// the projection residual.
pub fn si_snr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    check_pair(reference, estimate)?;
    let s = reference.samples();
    let e = estimate.samples();
    let mut dot = 0.0f64;
    let mut ss = 0.0f64;
    for (&si, &ei) in s.iter().zip(e) {
        dot += ei as f64 * si as f64;
        ss += si as f64 * si as f64;
    }
    let alpha = dot / ss;
    let target_energy = alpha * alpha * ss;
    let mut residual = 0.0f64;
    for (&si, &ei) in s.iter().zip(e) {
        let d = alpha * si as f64 - ei as f64;
        residual += d * d;
    }
    Ok(clamp_db(target_energy / (residual + EPSILON)))
}

/// SI-SNR improvement of the estimate over the unprocessed mixture.
pub fn si_snri(reference: &Waveform, estimate: &Waveform, mixture: &Waveform) -> Result<f64> {
    Ok(si_snr(reference, estimate)? - si_snr(reference, mixture)?)
}

/// Signal-to-distortion ratio as a plain energy ratio (no projection family),
/// clamped like SI-SNR. Not scale-invariant.
pub fn sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    check_pair(reference, estimate)?;
    let mut ss = 0.0f64;
    let mut residual = 0.0f64;
    for (&si, &ei) in reference.samples().iter().zip(estimate.samples()) {
        ss += si as f64 * si as f64;
        let d = si as f64 - ei as f64;
        residual += d * d;
    }
    Ok(clamp_db(ss / (residual + EPSILON)))
}

/// SDR improvement over the unprocessed mixture.
pub fn sdri(reference: &Waveform, estimate: &Waveform, mixture: &Waveform) -> Result<f64> {
    Ok(sdr(reference, estimate)? - sdr(reference, mixture)?)
}

fn pairwise(metric: Metric, reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    match metric {
        Metric::SiSnr => si_snr(reference, estimate),
        Metric::Sdr => sdr(reference, estimate),
    }
}

/// Exhaustive search over all M! pairings of estimates to references,
/// maximizing the mean pairwise metric. Ties are broken by the
/// lexicographically smallest permutation.
pub fn best_assignment(
    references: &[Waveform],
    estimates: &[Waveform],
    metric: Metric,
) -> Result<Assignment> {
    let m = references.len();
    if m == 0 || estimates.len() != m {
        return Err(Error::Shape(format!(
            "source count mismatch: {} references vs {} estimates",
            m,
            estimates.len()
        )));
    }
    if m > MAX_SOURCES {
        return Err(Error::Capacity(format!(
            "exhaustive search supports at most {MAX_SOURCES} sources, got {m}"
        )));
    }

    // Score matrix: scores[i][j] = metric(references[i], estimates[j]).
    let mut scores = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        for j in 0..m {
            scores[i][j] = pairwise(metric, &references[i], &estimates[j])?;
        }
    }

    let mut best: Option<Assignment> = None;
    // itertools yields permutations of a sorted range in lexicographic order,
    // so strict improvement keeps the lexicographically smallest tie winner.
    for perm in (0..m).permutations(m) {
        let mean = perm
            .iter()
            .enumerate()
            .map(|(i, &j)| scores[i][j])
            .sum::<f64>()
            / m as f64;
        if best.as_ref().map_or(true, |b| mean > b.mean_score_db) {
            best = Some(Assignment {
                permutation: perm,
                mean_score_db: mean,
            });
        }
    }
    Ok(best.expect("at least one permutation"))
}
