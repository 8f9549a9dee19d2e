//! Deterministic numeric kernels: softmax, divergences, and ranking.
//!
//! Every reduction in this module accumulates left to right in a fixed
//! order, so results are bit-reproducible across runs and thread counts.
//! Logit-level and probability-level scalars are `f64`; model tensors are
//! `f32` and cross into this module at the vector boundary.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Sentinel for a masked-out logit entry. The value is IEEE negative
/// infinity, but it is a tag: masked entries are skipped, never fed into
/// arithmetic, so `(-inf) - (-inf)` can never produce NaN downstream.
pub const MASKED: f64 = f64::NEG_INFINITY;

/// Pre-softmax scores over a vocabulary or expert set. Entries are either
/// finite reals or the [`MASKED`] sentinel; at least one entry is unmasked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitVector {
    values: Vec<f64>,
}

impl LogitVector {
    /// Validates that the input carries no NaN and has at least one
    /// unmasked entry.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(index) = values.iter().position(|v| v.is_nan()) {
            return Err(Error::NanInput { index });
        }
        if values.iter().all(|&v| v == MASKED) {
            return Err(Error::EmptySupport);
        }
        Ok(Self { values })
    }

    /// Converts model-side `f32` scores; all entries unmasked.
    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.values[i] == MASKED
    }

    /// Iterates `(index, value)` over unmasked entries.
    pub fn unmasked(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != MASKED)
            .map(|(i, &v)| (i, v))
    }

    /// Largest unmasked value, or an error when everything is masked.
    pub fn max_unmasked(&self) -> Result<f64> {
        let mut best: Option<f64> = None;
        for (_, v) in self.unmasked() {
            best = Some(match best {
                Some(b) if b >= v => b,
                _ => v,
            });
        }
        best.ok_or(Error::EmptySupport)
    }

    /// Index of the largest unmasked value; ties break toward the lower
    /// index.
    pub fn argmax(&self) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in self.unmasked() {
            match best {
                Some((_, bv)) if bv >= v => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| i).ok_or(Error::EmptySupport)
    }
}

/// A probability distribution: non-negative entries summing to 1 within
/// 1e-6 absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    values: Vec<f64>,
}

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(index) = values.iter().position(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "probability at index {index} is negative or NaN"
            )));
        }
        let mut sum = 0.0;
        for &v in &values {
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }
}

/// Numerically stable softmax over the unmasked entries of `z`.
///
/// Masked entries map to probability 0. Errors with
/// [`Error::EmptySupport`] when every entry is masked.
pub fn softmax(z: &LogitVector) -> Result<ProbVector> {
    let m = z.max_unmasked()?;
    let n = z.len();
    let mut exps = vec![0.0f64; n];
    let mut sum = 0.0f64;
    for i in 0..n {
        if !z.is_masked(i) {
            let e = (z.get(i) - m).exp();
            exps[i] = e;
            sum += e;
        }
    }
    // sum >= 1 because the max term contributes exp(0) = 1.
    for e in exps.iter_mut() {
        *e /= sum;
    }
    Ok(ProbVector { values: exps })
}

/// Softmax of `z / temperature` over unmasked entries.
pub fn softmax_with_temperature(z: &LogitVector, temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperature must be a positive real, got {temperature}"
        )));
    }
    let scaled: Vec<f64> = z
        .values()
        .iter()
        .map(|&v| if v == MASKED { MASKED } else { v / temperature })
        .collect();
    softmax(&LogitVector::new(scaled)?)
}

/// Kullback-Leibler divergence `KL(p || q)` in nats.
///
/// Terms with `p_i = 0` contribute nothing. `p_i > 0` with `q_i = 0` is an
/// error. The result is clamped at zero to absorb rounding residue when
/// `p` and `q` are nearly identical.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    let mut sum = 0.0f64;
    for i in 0..p.len() {
        let pi = p.get(i);
        if pi == 0.0 {
            continue;
        }
        let qi = q.get(i);
        if qi == 0.0 {
            return Err(Error::UnboundedDivergence { index: i });
        }
        sum += pi * (pi / qi).ln();
    }
    Ok(sum.max(0.0))
}

/// Jensen-Shannon divergence in nats: the symmetrized, bounded companion
/// of [`kl_divergence`], computed against the midpoint distribution.
pub fn jensen_shannon(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    let mut sum = 0.0f64;
    for i in 0..p.len() {
        let pi = p.get(i);
        let qi = q.get(i);
        let mi = 0.5 * (pi + qi);
        if pi > 0.0 {
            sum += 0.5 * pi * (pi / mi).ln();
        }
        if qi > 0.0 {
            sum += 0.5 * qi * (qi / mi).ln();
        }
    }
    Ok(sum.max(0.0))
}

/// Indices of `w` sorted by value descending; equal values keep the lower
/// index first. The output is a permutation of `0..w.len()`.
pub fn ranked_indices(w: &[f64]) -> Result<Vec<usize>> {
    if w.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(index) = w.iter().position(|v| v.is_nan()) {
        return Err(Error::NanInput { index });
    }
    let mut idx: Vec<usize> = (0..w.len()).collect();
    // Stable sort: ties preserve ascending index order.
    idx.sort_by(|&a, &b| w[b].partial_cmp(&w[a]).expect("NaN rejected above"));
    Ok(idx)
}
