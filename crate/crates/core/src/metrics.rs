//! Distances between distributions, curve extraction, log-log rate fits and
//! the per-draw concentration statistics.

use rayon::prelude::*;

use crate::builders::{KernelMatrix, ProbabilityVector, WeightedDigraph};
use crate::error::{Error, Result};
use crate::matrix::kahan_sum;
use crate::weights::{RngStream, WeightLaw};

fn same_len(a: &ProbabilityVector, b: &ProbabilityVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// `½ Σ |μ(i) − ν(i)|`.
pub fn tv_distance(mu: &ProbabilityVector, nu: &ProbabilityVector) -> Result<f64> {
    same_len(mu, nu)?;
    let s = kahan_sum(
        mu.as_slice()
            .iter()
            .zip(nu.as_slice())
            .map(|(a, b)| (a - b).abs()),
    );
    Ok((0.5 * s).min(1.0))
}

pub fn linf_distance(mu: &ProbabilityVector, nu: &ProbabilityVector) -> Result<f64> {
    same_len(mu, nu)?;
    Ok(mu
        .as_slice()
        .iter()
        .zip(nu.as_slice())
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
}

/// `n·π(i)` sorted in descending order.
pub fn descending_scaled(pi: &ProbabilityVector) -> Vec<f64> {
    let n = pi.len() as f64;
    let mut v: Vec<f64> = pi.as_slice().iter().map(|p| p * n).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least squares of `ln value` on `ln n`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "log-log fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if let Some((n, v)) = points.iter().find(|(n, v)| !(*n > 0.0 && *v > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "log-log fit needs positive coordinates, got ({n}, {v})"
        )));
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    if xs.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidParameter("log-log fit needs distinct n".into()));
    }
    let m = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    // A flat line fits perfectly.
    let r_squared = if syy <= 1e-300 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(LogLogFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Per-draw statistics tracking the concentration estimates on row sums,
/// kernel rows, two-step kernels and the jump-chain invariant distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaStatistics {
    pub n: usize,
    /// `max_i |Σ_j (X_ij − μ)|`; absent when μ is infinite.
    pub max_centered_rowsum: Option<f64>,
    /// `min_i Σ_{j≠i} X_ij`.
    pub min_offdiag_rowsum: f64,
    /// `max_i Σ_j X_ij`.
    pub max_rowsum: f64,
    /// `max_i Σ_j K_ij²`.
    pub max_row_l2: f64,
    /// `max_ij K_ij`.
    pub max_entry: f64,
    /// `min_ik (K²)_ik`.
    pub min_two_step: f64,
    /// `‖π_Q̂ − u‖_∞`.
    pub linf_jump_gap: f64,
}

pub fn compute_lemma_statistics(
    g: &WeightedDigraph,
    k: &KernelMatrix,
    pi_jump: &ProbabilityVector,
    mu: f64,
) -> Result<LemmaStatistics> {
    let n = g.n();
    if k.n() != n || pi_jump.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: if k.n() != n { k.n() } else { pi_jump.len() },
        });
    }
    let x = g.edge_weights();
    let mut max_centered = 0.0_f64;
    let mut min_off = f64::INFINITY;
    let mut max_row = 0.0_f64;
    for (i, row) in x.rows().enumerate() {
        let full = kahan_sum(row.iter().copied());
        let off = full - row[i];
        if mu.is_finite() {
            let centered = kahan_sum(row.iter().map(|v| v - mu));
            max_centered = max_centered.max(centered.abs());
        }
        min_off = min_off.min(off);
        max_row = max_row.max(full);
    }
    let km = k.matrix();
    let max_row_l2 = km
        .rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .fold(0.0_f64, f64::max);
    let max_entry = km.max_abs();
    let two = km.matmul(km)?;
    let min_two_step = two
        .as_slice()
        .par_chunks(n)
        .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
        .collect::<Vec<_>>()
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let linf_jump_gap = linf_distance(pi_jump, &ProbabilityVector::uniform(n))?;
    Ok(LemmaStatistics {
        n,
        max_centered_rowsum: mu.is_finite().then_some(max_centered),
        min_offdiag_rowsum: min_off,
        max_rowsum: max_row,
        max_row_l2,
        max_entry,
        min_two_step,
        linf_jump_gap,
    })
}

fn check_tail_params(mu: f64, sigma2: f64, eps: f64) -> Result<()> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::InfiniteMoment(format!("mean must be finite and > 0, got {mu}")));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InfiniteMoment(format!(
            "variance must be finite and > 0, got {sigma2}"
        )));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParameter(format!("epsilon must lie in (0,1), got {eps}")));
    }
    Ok(())
}

/// `exp(−ε²μ²n / (2(μ² + σ²)))`, an upper bound on `P(S_n ≤ (1−ε)μn)` for
/// sums of i.i.d. non-negative variables.
pub fn chernoff_bound(mu: f64, sigma2: f64, n: usize, eps: f64) -> Result<f64> {
    check_tail_params(mu, sigma2, eps)?;
    if n == 0 {
        return Err(Error::InvalidParameter("n must be >= 1".into()));
    }
    let m2 = mu * mu + sigma2;
    Ok((-(eps * eps * mu * mu * n as f64) / (2.0 * m2)).exp())
}

const TAIL_CHUNK: usize = 1000;

/// Fraction of `trials` sums of `n` draws that fall at or below
/// `(1−ε)μn`. Trials are split into fixed chunks, one lane each, so the
/// result does not depend on the thread count.
pub fn empirical_lower_tail(
    law: &WeightLaw,
    n: usize,
    eps: f64,
    trials: usize,
    stream: &RngStream,
) -> Result<f64> {
    let m = law.moments();
    if !m.has_finite_mean() || !m.has_finite_variance() {
        return Err(Error::InfiniteMoment(format!("{law} has an infinite mean or variance")));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParameter(format!("epsilon must lie in (0,1), got {eps}")));
    }
    if trials == 0 || n == 0 {
        return Err(Error::InvalidParameter("n and trials must be >= 1".into()));
    }
    let threshold = (1.0 - eps) * m.mean * n as f64;
    let chunks = trials.div_ceil(TAIL_CHUNK);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream.lane(c as u64).rng();
            let size = TAIL_CHUNK.min(trials - c * TAIL_CHUNK);
            (0..size)
                .filter(|_| {
                    let s: f64 = (0..n).map(|_| law.sample(&mut rng)).sum();
                    s <= threshold
                })
                .count()
        })
        .sum();
    Ok(hits as f64 / trials as f64)
}
